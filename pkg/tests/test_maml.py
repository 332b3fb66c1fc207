import numpy as np
import pytest

from ssml import autodiff as ad
from ssml import maml as MM
from ssml import models as M
from ssml.data import Episode, EpisodeSpec, synthetic_dataset
from ssml.image import IDENTITY_PIPELINE, preset_pipeline
from ssml.rng import SeededRng


def cfg_with(**kw):
    base = dict(alpha=0.05, beta=0.01, outer_steps=1, inner_steps=1,
                temperature_inner=1.0, second_order=False,
                tasks_per_outer_step=1, eval_inner_steps=1, seed=0)
    base.update(kw)
    return MM.MamlConfig(**base)


class _Params:
    def __init__(self, named):
        self.named = dict(named)

    def items(self):
        return self.named.items()

    def tensors(self):
        return list(self.named.values())

    def replace_tensors(self, new):
        return _Params(new)

    def __getitem__(self, k):
        return self.named[k]


def diag_logistic_forward(params, x):
    """2-way model with logits [w0*x0, w1*x1]: small enough to hand-derive."""
    flat = ad.reshape(x, (x.shape[0], 2))
    w = ad.reshape(params["w"], (1, 2))
    return ad.mul(flat, ad.broadcast_to(w, (x.shape[0], 2)))


def scalar_episode(xs_support, ys_support, xs_query, ys_query):
    """Episode whose 'images' are [N,1,1,2] carriers for the toy forwards."""
    def imgs(xs):
        return np.asarray(xs, dtype=np.float64).reshape(-1, 1, 1, 2)
    return Episode(
        support_images=imgs(xs_support), support_labels=np.asarray(ys_support, dtype=np.float64),
        query_images=imgs(xs_query), query_labels=np.asarray(ys_query, dtype=np.float64),
        provenance="true_labels")


# ---------------------------------------------------------------------------
# inner loop


def test_inner_adapt_zero_alpha_is_identity():
    w = ad.parameter([0.7, -0.3], dtype=np.float64)
    theta = _Params({"w": w})
    sx = ad.Tensor(np.array([[0.5, 1.0]], dtype=np.float64).reshape(1, 1, 1, 2))
    sy = np.array([[1.0, 0.0]])
    out = MM.inner_adapt(theta, ad.reshape(sx, (1, 1, 1, 2)), sy,
                         cfg_with(alpha=0.0, inner_steps=3), forward=diag_logistic_forward)
    np.testing.assert_array_equal(out["w"].data, w.data)


def test_inner_adapt_matches_hand_derived_logistic_update():
    # one step at temperature T on the diagonal 2-way logistic model
    w0, w1 = 0.5, -0.1
    x = np.array([[0.3, -0.2], [1.0, 0.4]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    alpha, T = 0.1, 2.0

    z = np.stack([w0 * x[:, 0], w1 * x[:, 1]], axis=1) / T
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    dz = (p - y) / (T * len(x))                      # d mean-loss / d logits
    grad = np.array([(dz[:, 0] * x[:, 0]).sum(), (dz[:, 1] * x[:, 1]).sum()])
    expected = np.array([w0, w1]) - alpha * grad

    theta = _Params({"w": ad.parameter([w0, w1], dtype=np.float64)})
    sx = ad.Tensor(x.reshape(-1, 1, 1, 2))
    out = MM.inner_adapt(theta, sx, y, cfg_with(alpha=alpha, temperature_inner=T),
                         forward=diag_logistic_forward)
    np.testing.assert_allclose(out["w"].data, expected, atol=1e-10)


def test_inner_adapt_t1_equals_unscaled_path_bitwise():
    # manual loop with the identical ops but no temperature division
    x = np.array([[0.4, 0.8], [-0.5, 0.2], [1.1, -0.3]])
    y = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    alpha = 0.25

    theta = _Params({"w": ad.parameter([0.3, 0.9], dtype=np.float64)})
    sx = ad.Tensor(x.reshape(-1, 1, 1, 2))
    adapted = MM.inner_adapt(theta, sx, y, cfg_with(alpha=alpha, inner_steps=2),
                             forward=diag_logistic_forward)

    ref = _Params({"w": ad.parameter([0.3, 0.9], dtype=np.float64)})
    for _ in range(2):
        logits = diag_logistic_forward(ref, sx)
        shift = ad.Tensor(np.max(logits.data, axis=1, keepdims=True))
        zs = ad.sub(logits, shift)
        lse = ad.log(ad.sum_axes(ad.exp(zs), (1,), keepdims=True))
        picked = ad.sum_axes(ad.mul(zs, ad.Tensor(y)), (1,), keepdims=True)
        loss = ad.scale(ad.sum_axes(ad.sub(lse, picked)), 1.0 / 3)
        grads = ad.backward(loss, ref.tensors())
        ref = ad.apply_update(ref, grads, alpha, differentiable=False)
    np.testing.assert_array_equal(adapted["w"].data, ref["w"].data)


def test_alpha_linearity_of_single_step():
    x = np.array([[0.4, 0.8], [-0.5, 0.2]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    sx = ad.Tensor(x.reshape(-1, 1, 1, 2))
    w0 = np.array([0.3, 0.9])

    deltas = []
    for alpha in (0.25, 0.5):  # exact doubling in binary floating point
        theta = _Params({"w": ad.parameter(w0.copy(), dtype=np.float64)})
        out = MM.inner_adapt(theta, sx, y, cfg_with(alpha=alpha), forward=diag_logistic_forward)
        deltas.append(w0 - out["w"].data)
    np.testing.assert_allclose(deltas[1], 2.0 * deltas[0], rtol=1e-15)


# ---------------------------------------------------------------------------
# outer loop


def test_outer_step_beta_zero_reports_loss_keeps_theta():
    ep = scalar_episode([[0.3, -0.2]], [[1.0, 0.0]], [[0.5, 0.1]], [[1.0, 0.0]])
    theta = _Params({"w": ad.parameter([0.5, -0.1], dtype=np.float64)})
    new, loss = MM.outer_step(theta, [ep], cfg_with(beta=0.0), forward=diag_logistic_forward)
    assert np.isfinite(loss) and loss > 0
    np.testing.assert_array_equal(new["w"].data, theta["w"].data)


def test_outer_step_first_order_matches_hand_formula():
    # 1-parameter model, logits [theta*x, 0]; FOMAML: outer gradient is the
    # query-loss gradient at theta', applied to theta
    def forward(params, x):
        flat = ad.reshape(x, (x.shape[0], 1))
        z1 = ad.mul(flat, ad.broadcast_to(ad.reshape(params["w"], (1, 1)), (x.shape[0], 1)))
        z0 = ad.Tensor(np.zeros((x.shape[0], 1)))
        return ad.concat([z1, z0], axis=1)

    def xent_grad(theta_val, xs, ys):
        z = np.stack([theta_val * xs, np.zeros_like(xs)], axis=1)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        dz = (p - ys) / len(xs)
        return float((dz[:, 0] * xs).sum())

    theta0, alpha, beta = 0.8, 0.3, 0.2
    xs_s, ys_s = np.array([0.5, -1.0]), np.array([[1.0, 0.0], [0.0, 1.0]])
    xs_q, ys_q = np.array([0.7, 0.2]), np.array([[1.0, 0.0], [1.0, 0.0]])

    theta1 = theta0 - alpha * xent_grad(theta0, xs_s, ys_s)
    expected = theta0 - beta * xent_grad(theta1, xs_q, ys_q)

    ep = Episode(
        support_images=xs_s.reshape(-1, 1, 1, 1), support_labels=ys_s,
        query_images=xs_q.reshape(-1, 1, 1, 1), query_labels=ys_q,
        provenance="true_labels")
    theta = _Params({"w": ad.parameter([theta0], dtype=np.float64)})
    new, _ = MM.outer_step(theta, [ep], cfg_with(alpha=alpha, beta=beta), forward=forward)
    np.testing.assert_allclose(new["w"].data, [expected], atol=1e-12)


def test_outer_step_second_order_matches_finite_differences():
    # tiny conv backbone, one inner step; d/d theta of the adapted query loss
    cfg = M.BackboneConfig(1, 14, 14, filters=2, head="classifier", n_way=2)
    theta = M.init_params(cfg, seed=42, dtype=np.float64)
    rng = np.random.default_rng(42)
    sup_x = rng.uniform(0, 1, size=(2, 14, 14, 1))
    qry_x = rng.uniform(0, 1, size=(2, 14, 14, 1))
    sup_y = np.eye(2)
    qry_y = np.eye(2)[::-1].copy()
    mcfg = cfg_with(alpha=0.1, inner_steps=1, second_order=True)

    def forward(p, x):
        return M.forward_classifier(p, x, 2)

    def adapted_query_loss():
        adapted = MM.inner_adapt(theta, M.batch_to_tensor(sup_x, np.float64), sup_y, mcfg, forward)
        logits = forward(adapted, M.batch_to_tensor(qry_x, np.float64))
        return ad.softmax_xent_temperature(logits, qry_y, 1.0)

    loss = adapted_query_loss()
    grads = ad.backward(loss, theta.tensors())
    fd = ad.finite_diff_grad(lambda: adapted_query_loss().item(), theta.tensors(), h=1e-5)
    for name, t in theta.items():
        np.testing.assert_allclose(grads[t].data, fd[t].data, rtol=1e-3, atol=1e-7,
                                   err_msg=f"outer gradient mismatch for {name}")


def test_first_and_second_order_coincide_only_without_curvature():
    # inner objective linear in the parameter (zero Hessian): paths agree;
    # quadratic inner objective: they diverge
    c = np.array([0.7, -1.3])

    def run(second_order, inner):
        w = ad.parameter([0.4, 0.2], dtype=np.float64)
        params = _Params({"w": w})
        loss_in = inner(params["w"])
        g = ad.backward(loss_in, [params["w"]], create_higher_order=second_order)
        adapted = ad.apply_update(params, g, lr=0.3, differentiable=second_order)
        # query objective with curvature so the paths could differ
        q = ad.sum_axes(ad.mul(adapted["w"], ad.mul(adapted["w"], adapted["w"])))
        wrt = w if second_order else adapted["w"]
        return ad.backward(q, [wrt])[wrt].data

    linear = lambda w: ad.sum_axes(ad.mul(w, ad.Tensor(c)))
    quad = lambda w: ad.sum_axes(ad.mul(w, w))
    np.testing.assert_allclose(run(False, linear), run(True, linear), rtol=1e-12)
    assert not np.allclose(run(False, quad), run(True, quad), rtol=1e-3)


def test_outer_step_divergence_guard():
    def forward(params, x):
        flat = ad.reshape(x, (x.shape[0], 1))
        z1 = ad.mul(flat, ad.broadcast_to(ad.reshape(params["w"], (1, 1)), (x.shape[0], 1)))
        return ad.concat([z1, ad.Tensor(np.zeros((x.shape[0], 1)))], axis=1)

    ep = Episode(
        support_images=np.array([[[[1.0]]]]), support_labels=np.array([[0.0, 1.0]]),
        query_images=np.array([[[[1.0]]]]), query_labels=np.array([[0.0, 1.0]]),
        provenance="true_labels")
    theta = _Params({"w": ad.parameter([5000.0], dtype=np.float64)})
    with pytest.raises(MM.DivergenceError):
        MM.outer_step(theta, [ep], cfg_with(alpha=0.0), forward=forward)


# ---------------------------------------------------------------------------
# meta_train / evaluate


def test_meta_train_zero_steps_returns_reproducible_init(small_rgb_dataset):
    spec = EpisodeSpec(5, 1, 1, "supervised")
    cfg = cfg_with(outer_steps=0, seed=33)
    a, ma = MM.meta_train(small_rgb_dataset, "supervised", spec, None, cfg, filters=8)
    b, mb = MM.meta_train(small_rgb_dataset, "supervised", spec, None, cfg, filters=8)
    assert ma.steps == [] and mb.steps == []
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_meta_train_deterministic_metrics(small_rgb_dataset):
    spec = EpisodeSpec(5, 1, 1, "supervised")
    cfg = cfg_with(outer_steps=4, tasks_per_outer_step=2, seed=12)
    _, m1 = MM.meta_train(small_rgb_dataset, "supervised", spec, None, cfg, filters=8)
    _, m2 = MM.meta_train(small_rgb_dataset, "supervised", spec, None, cfg, filters=8)
    assert m1 == m2


def test_meta_train_mode_validation(small_rgb_dataset):
    spec = EpisodeSpec(5, 1, 1, "supervised")
    with pytest.raises(ValueError):
        MM.meta_train(small_rgb_dataset.erase_labels(), "supervised", spec, None, cfg_with())
    with pytest.raises(ValueError):
        MM.meta_train(small_rgb_dataset, "unsupervised", spec, None, cfg_with())  # no pipeline
    uspec = EpisodeSpec(5, 1, 1, "unsupervised")
    with pytest.raises(ValueError):
        MM.meta_train(small_rgb_dataset, "unsupervised", uspec, None, cfg_with())
    with pytest.raises(ValueError):
        MM.meta_train(small_rgb_dataset, "supervised", uspec, None, cfg_with())


def test_unsupervised_meta_train_runs_and_is_deterministic(small_rgb_dataset):
    pool = small_rgb_dataset.erase_labels()
    uspec = EpisodeSpec(5, 1, 2, "unsupervised")
    cfg = cfg_with(outer_steps=3, tasks_per_outer_step=2, temperature_inner=10.0, seed=5)
    a, m1 = MM.meta_train(pool, "unsupervised", uspec, preset_pipeline("ours_rgb"), cfg, filters=8)
    b, m2 = MM.meta_train(pool, "unsupervised", uspec, preset_pipeline("ours_rgb"), cfg, filters=8)
    assert m1 == m2
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_evaluate_untrained_is_chance_without_adaptation(small_rgb_dataset):
    spec = EpisodeSpec(5, 1, 1, "supervised")
    cfg = cfg_with(outer_steps=0, eval_inner_steps=0, seed=77)
    theta, _ = MM.meta_train(small_rgb_dataset, "supervised", spec, None, cfg, filters=8)
    res = MM.evaluate(theta, small_rgb_dataset, spec, cfg, episodes=500, seed=123)
    acc = res.evals[0].accuracy
    sigma = np.sqrt(0.2 * 0.8 / (500 * 5))
    assert abs(acc - 0.2) < 5 * sigma, f"untrained accuracy {acc} not at chance"


def test_evaluate_single_episode_has_zero_halfwidth(small_rgb_dataset):
    spec = EpisodeSpec(5, 1, 1, "supervised")
    cfg = cfg_with(outer_steps=0, eval_inner_steps=0)
    theta, _ = MM.meta_train(small_rgb_dataset, "supervised", spec, None, cfg, filters=8)
    res = MM.evaluate(theta, small_rgb_dataset, spec, cfg, episodes=1, seed=5)
    assert res.evals[0].ci95 == 0.0
    with pytest.raises(ValueError):
        MM.evaluate(theta, small_rgb_dataset, spec, cfg, episodes=0, seed=5)


def test_prediction_argmax_invariant_in_temperature(small_rgb_dataset):
    # fixed theta, no adaptation: the argmax prediction is the same for all T
    spec = EpisodeSpec(5, 1, 1, "supervised")
    theta, _ = MM.meta_train(small_rgb_dataset, "supervised", spec, None,
                             cfg_with(outer_steps=0, seed=3), filters=8)
    accs = []
    for T in (0.1, 1.0, 100.0, 1e6):
        cfg = cfg_with(outer_steps=0, eval_inner_steps=0, temperature_inner=T)
        res = MM.evaluate(theta, small_rgb_dataset, spec, cfg, episodes=40, seed=99)
        accs.append(res.evals[0].accuracy)
    assert len(set(accs)) == 1


@pytest.mark.slow
def test_meta_train_learns_above_chance(small_rgb_dataset):
    spec = EpisodeSpec(5, 1, 1, "supervised")
    cfg = MM.MamlConfig(alpha=0.05, beta=0.01, outer_steps=300, inner_steps=3,
                        temperature_inner=1.0, tasks_per_outer_step=2,
                        eval_inner_steps=5, seed=1)
    _, metrics = MM.meta_train(small_rgb_dataset, "supervised", spec, None, cfg, filters=16)
    tail = [r.accuracy for r in metrics.steps[-50:]]
    mean_acc = float(np.mean(tail))
    # 3 sigma above chance over the tail window (10 queries per step)
    sigma = np.sqrt(0.2 * 0.8 / (50 * 10))
    assert mean_acc > 0.2 + 3 * sigma, f"training accuracy {mean_acc} shows no learning"


@pytest.mark.slow
def test_trained_model_solves_trivial_two_class_problem():
    ds = synthetic_dataset(2, 30, 20, 20, 1, seed=9)
    spec = EpisodeSpec(2, 3, 3, "supervised")
    cfg = MM.MamlConfig(alpha=0.05, beta=0.02, outer_steps=150, inner_steps=3,
                        temperature_inner=1.0, tasks_per_outer_step=2,
                        eval_inner_steps=10, seed=2)
    theta, _ = MM.meta_train(ds, "supervised", spec, None, cfg, filters=8)
    res = MM.evaluate(theta, ds, spec, cfg, episodes=50, seed=7)
    assert res.evals[0].accuracy > 0.95
