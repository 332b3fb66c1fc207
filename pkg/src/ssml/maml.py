"""MAML meta-training with a temperature-scaled inner loop.

Inner loop: ``theta'_i = theta - alpha * grad` of the support cross-entropy
at temperature T. Outer loop: plain SGD on the summed query losses of the
adapted parameters, evaluated at T=1; with ``second_order`` the outer
gradient flows through the inner updates (exact Hessian-vector terms),
otherwise the updates are detached (first-order variant).

Runs in supervised mode (true-label episodes) or unsupervised mode
(pseudo-labeled episodes whose queries are augmentations of the support).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import Dataset, Episode, EpisodeSpec, sample_supervised_episode, sample_unsupervised_episode
from .image import AugmentationPipeline
from .metrics import RunMetrics
from .models import ParamSet
from .rng import SeededRng

DIVERGENCE_LIMIT = 1e3


class DivergenceError(ArithmeticError):
    """Query loss went non-finite or above the divergence limit."""


@dataclass(frozen=True)
class MamlConfig:
    alpha: float
    beta: float
    outer_steps: int
    inner_steps: int = 5
    temperature_inner: float = 1.0
    second_order: bool = False
    tasks_per_outer_step: int = 4
    eval_inner_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        # alpha=0 / beta=0 are allowed as degenerate no-op steps
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be non-negative")
        if self.temperature_inner <= 0:
            raise ValueError("inner temperature must be positive")
        if self.inner_steps < 1 or self.tasks_per_outer_step < 1:
            raise ValueError("inner_steps and tasks_per_outer_step must be >= 1")
        if self.outer_steps < 0 or self.eval_inner_steps < 0:
            raise ValueError("step counts must be non-negative")


def _accuracy(logits: np.ndarray, onehot: np.ndarray) -> tuple[int, int]:
    pred = np.argmax(logits, axis=1)
    true = np.argmax(onehot, axis=1)
    return int((pred == true).sum()), len(pred)


def _as_batch(images_hwc: np.ndarray, dtype) -> Tensor:
    return models.batch_to_tensor(images_hwc, dtype)


def inner_adapt(theta: ParamSet, support_x: Tensor, support_y: np.ndarray,
                cfg: MamlConfig, forward=None, steps: int | None = None) -> ParamSet:
    """Task adaptation: ``inner_steps`` gradient steps on the support loss at
    the inner temperature. With ``cfg.second_order`` the returned parameters
    stay graph-connected to ``theta``."""
    if forward is None:
        forward = lambda p, x: models.forward_classifier(p, x, support_y.shape[1])
    steps = cfg.inner_steps if steps is None else steps
    for _ in range(steps):
        logits = forward(theta, support_x)
        loss = ad.softmax_xent_temperature(logits, support_y, cfg.temperature_inner)
        if not np.isfinite(loss.item()):
            raise DivergenceError("non-finite support loss during adaptation")
        grads = ad.backward(loss, theta.tensors(), create_higher_order=cfg.second_order)
        theta = ad.apply_update(theta, grads, cfg.alpha, differentiable=cfg.second_order)
    return theta


def _task_query_loss(theta: ParamSet, task: Episode, cfg: MamlConfig, forward):
    """Adapt on the task's support set, then the query loss at T=1."""
    dtype = theta.tensors()[0].data.dtype
    sx = _as_batch(task.support_images, dtype)
    qx = _as_batch(task.query_images, dtype)
    sy = task.support_labels.astype(dtype)
    qy = task.query_labels.astype(dtype)
    adapted = inner_adapt(theta, sx, sy, cfg, forward)
    q_logits = forward(adapted, qx)
    loss = ad.softmax_xent_temperature(q_logits, qy, 1.0)
    correct, total = _accuracy(q_logits.data, qy)
    return loss, adapted, correct, total


def outer_step(theta: ParamSet, tasks: list[Episode], cfg: MamlConfig, forward=None):
    """One across-task update: sum the adapted query losses, step theta by
    beta against their gradient. Returns (new theta, mean query loss)."""
    new_theta, loss, _acc = _outer_pass(theta, tasks, cfg, forward)
    return new_theta, loss


def _outer_pass(theta: ParamSet, tasks: list[Episode], cfg: MamlConfig, forward=None):
    if not tasks:
        raise ValueError("outer step needs at least one task")
    for t in tasks:
        if len(t.query_images) == 0:
            raise ValueError("task with empty query set")
    if forward is None:
        n_way = tasks[0].n_way
        forward = lambda p, x: models.forward_classifier(p, x, n_way)

    total = None
    adapted_sets: list[ParamSet] = []
    correct = count = 0
    for task in tasks:
        loss, adapted, c, n = _task_query_loss(theta, task, cfg, forward)
        adapted_sets.append(adapted)
        correct += c
        count += n
        total = loss if total is None else ad.add(total, loss)

    mean_loss = total.item() / len(tasks)
    if not np.isfinite(mean_loss) or mean_loss > DIVERGENCE_LIMIT:
        raise DivergenceError(f"query loss {mean_loss} beyond divergence limit")

    if cfg.second_order:
        grad_map = ad.backward(total, theta.tensors())
    else:
        # first-order: gradient at the adapted parameters, applied to theta
        wrt = [t for a in adapted_sets for t in a.tensors()]
        gm = ad.backward(total, wrt)
        grad_map = {}
        for name, p in theta.items():
            acc = None
            for a in adapted_sets:
                g = gm[a[name]].data
                acc = g.copy() if acc is None else acc + g
            grad_map[p] = Tensor(acc)
    new_theta = ad.apply_update(theta, grad_map, cfg.beta, differentiable=False)
    return new_theta, mean_loss, correct / count


def _sample_task(source: Dataset, mode: str, spec: EpisodeSpec,
                 pipeline: AugmentationPipeline | None, rng: SeededRng) -> Episode:
    if mode == "supervised":
        return sample_supervised_episode(source, spec, rng)
    return sample_unsupervised_episode(source, spec, pipeline, rng)


def meta_train(
    source: Dataset,
    mode: str,
    spec: EpisodeSpec,
    pipeline: AugmentationPipeline | None,
    cfg: MamlConfig,
    init: ParamSet | None = None,
    filters: int = 16,
    val_source: Dataset | None = None,
    eval_every: int | None = None,
    eval_episodes: int = 100,
) -> tuple[ParamSet, RunMetrics]:
    """Meta-train for ``cfg.outer_steps`` outer iterations; every stream of
    randomness derives from ``cfg.seed``, so runs are bit-reproducible.

    Optionally evaluates on ``val_source`` every ``eval_every`` steps,
    appending evaluation records to the returned metrics.
    """
    if mode not in ("supervised", "unsupervised"):
        raise ValueError(f"unknown mode '{mode}'")
    if mode == "supervised":
        if not source.labeled:
            raise ValueError("supervised meta-training needs a labeled source")
        if spec.mode != "supervised":
            raise ValueError("episode spec mode does not match supervised training")
    else:
        if pipeline is None:
            raise ValueError("unsupervised meta-training needs an augmentation pipeline")
        if spec.mode != "unsupervised":
            raise ValueError("episode spec mode does not match unsupervised training")

    h, w, c = source.image_shape
    if init is None:
        config = models.BackboneConfig(c, h, w, filters=filters, head="classifier", n_way=spec.n_way)
        theta = models.init_params(config, seed=SeededRng(cfg.seed).split("model_init").seed)
    else:
        theta = init.detached()

    root = SeededRng(cfg.seed)
    metrics = RunMetrics()
    for step in range(cfg.outer_steps):
        tasks = [
            _sample_task(source, mode, spec, pipeline, root.split("episode", step, t))
            for t in range(cfg.tasks_per_outer_step)
        ]
        theta, loss, acc = _outer_pass(theta, tasks, cfg)
        metrics.add_step(step, loss, acc)
        if val_source is not None and eval_every and (step + 1) % eval_every == 0:
            ev = evaluate(theta, val_source, spec, cfg, eval_episodes,
                          seed=root.split("val_eval", step).seed)
            metrics.add_eval(step + 1, ev.evals[0].episodes, ev.evals[0].accuracy, ev.evals[0].ci95)
    return theta, metrics


def evaluate(theta: ParamSet, test_source: Dataset, spec: EpisodeSpec,
             cfg: MamlConfig, episodes: int, seed: int | None = None) -> RunMetrics:
    """Held-out evaluation: adapt ``eval_inner_steps`` on each episode's
    support set, classify its queries by argmax logit. Reports mean accuracy
    with a normal-approximation 95% half-width (0 for a single episode)."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    if not test_source.labeled:
        raise ValueError("evaluation needs a labeled source")
    eval_spec = EpisodeSpec(spec.n_way, spec.k_shot, spec.q_queries, "supervised")
    root = SeededRng(cfg.seed if seed is None else seed)
    dtype = theta.tensors()[0].data.dtype
    accs = np.empty(episodes)
    for i in range(episodes):
        ep = sample_supervised_episode(test_source, eval_spec, root.split("eval_episode", i))
        sx = _as_batch(ep.support_images, dtype)
        sy = ep.support_labels.astype(dtype)
        adapted = inner_adapt(theta, sx, sy, cfg, steps=cfg.eval_inner_steps)
        with ad.no_grad():
            q_logits = models.forward_classifier(adapted, _as_batch(ep.query_images, dtype), spec.n_way)
        c, n = _accuracy(q_logits.data, ep.query_labels)
        accs[i] = c / n
    mean = float(accs.mean())
    half = 0.0 if episodes == 1 else float(1.96 * accs.std(ddof=1) / np.sqrt(episodes))
    out = RunMetrics()
    out.add_eval(0, episodes, mean, half)
    return out
