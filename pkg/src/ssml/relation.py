"""Relation-network meta-training: embed support and query images, score
every (query, class) pair with the learned relation module, and regress the
scores onto the same-class indicator with a summed squared-error loss.

No inner-loop adaptation and no temperature anywhere: the model is
metric-based, and prediction is the argmax relation score per query row.
Supports the same supervised / unsupervised (pseudo-labeled) episode
sources as the MAML path, sharing checkpoints through the models module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import Dataset, Episode, EpisodeSpec, sample_supervised_episode, sample_unsupervised_episode
from .image import AugmentationPipeline
from .maml import DivergenceError, DIVERGENCE_LIMIT
from .metrics import RunMetrics
from .models import ParamSet
from .rng import SeededRng


@dataclass(frozen=True)
class RelationTrainConfig:
    lr: float = 1e-3
    outer_steps: int = 100
    tasks_per_step: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.outer_steps < 0 or self.tasks_per_step < 1:
            raise ValueError("invalid step counts")


def relation_scores(params: ParamSet, episode: Episode) -> Tensor:
    """Score matrix [n_query, n_way] in (0, 1).

    Embeds all images; k-shot support embeddings are summed per class;
    each query embedding is depth-concatenated (class first) with every
    class embedding and passed through the relation module.
    """
    dtype = params.tensors()[0].data.dtype
    n_way = episode.n_way
    k_shot = episode.support_images.shape[0] // n_way
    sup = models.forward_embedding(params, models.batch_to_tensor(episode.support_images, dtype))
    qry = models.forward_embedding(params, models.batch_to_tensor(episode.query_images, dtype))
    _, c, h, w = sup.shape
    if k_shot > 1:
        # support rows are slot-grouped: [n_way * k_shot, ...] -> sum over shots
        slot = np.argmax(episode.support_labels, axis=1)
        order = np.argsort(slot, kind="stable")
        if not np.array_equal(order, np.arange(len(slot))):
            raise ValueError("support rows must be grouped by class slot")
        sup = ad.sum_axes(ad.reshape(sup, (n_way, k_shot, c, h, w)), axes=(1,))
    n_q = qry.shape[0]
    sup_b = ad.broadcast_to(ad.reshape(sup, (1, n_way, c, h, w)), (n_q, n_way, c, h, w))
    qry_b = ad.broadcast_to(ad.reshape(qry, (n_q, 1, c, h, w)), (n_q, n_way, c, h, w))
    paired = ad.concat([ad.reshape(sup_b, (n_q * n_way, c, h, w)),
                        ad.reshape(qry_b, (n_q * n_way, c, h, w))], axis=1)
    scores = models.forward_relation(params, paired)      # [n_q * n_way, 1]
    return ad.reshape(scores, (n_q, n_way))


def relation_loss(scores: Tensor, query_labels: np.ndarray) -> Tensor:
    """Sum over (query, class) of (score - same_class_indicator)^2."""
    if tuple(query_labels.shape) != tuple(scores.shape):
        raise ValueError(f"scores {scores.shape} vs labels {query_labels.shape}")
    return ad.mse_loss(scores, np.asarray(query_labels, dtype=scores.data.dtype))


def _sample_task(source: Dataset, mode: str, spec: EpisodeSpec,
                 pipeline: AugmentationPipeline | None, rng: SeededRng) -> Episode:
    if mode == "supervised":
        return sample_supervised_episode(source, spec, rng)
    return sample_unsupervised_episode(source, spec, pipeline, rng)


def train_relation(
    source: Dataset,
    mode: str,
    spec: EpisodeSpec,
    pipeline: AugmentationPipeline | None,
    cfg: RelationTrainConfig,
    init: ParamSet | None = None,
    filters: int = 16,
    val_source: Dataset | None = None,
    eval_every: int | None = None,
    eval_episodes: int = 100,
) -> tuple[ParamSet, RunMetrics]:
    """SGD on the relation loss over freshly sampled episodes; deterministic
    under cfg.seed. Optionally evaluates on ``val_source`` periodically."""
    if mode not in ("supervised", "unsupervised"):
        raise ValueError(f"unknown mode '{mode}'")
    if mode == "supervised" and not source.labeled:
        raise ValueError("supervised training needs a labeled source")
    if mode == "unsupervised" and pipeline is None:
        raise ValueError("unsupervised training needs an augmentation pipeline")
    if (mode == "unsupervised") != (spec.mode == "unsupervised"):
        raise ValueError("episode spec mode does not match training mode")

    h, w, c = source.image_shape
    if init is None:
        config = models.RelationConfig(models.BackboneConfig(c, h, w, filters=filters, head="embedding"))
        params = models.init_params(config, seed=SeededRng(cfg.seed).split("model_init").seed)
    else:
        params = init.detached()

    root = SeededRng(cfg.seed)
    metrics = RunMetrics()
    for step in range(cfg.outer_steps):
        total = None
        correct = count = 0
        for t in range(cfg.tasks_per_step):
            task = _sample_task(source, mode, spec, pipeline, root.split("episode", step, t))
            scores = relation_scores(params, task)
            loss = relation_loss(scores, task.query_labels)
            pred = np.argmax(scores.data, axis=1)
            true = np.argmax(task.query_labels, axis=1)
            correct += int((pred == true).sum())
            count += len(pred)
            total = loss if total is None else ad.add(total, loss)
        mean_loss = total.item() / cfg.tasks_per_step
        if not np.isfinite(mean_loss) or mean_loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"relation loss {mean_loss} beyond divergence limit")
        grads = ad.backward(total, params.tensors())
        params = ad.apply_update(params, grads, cfg.lr, differentiable=False)
        metrics.add_step(step, mean_loss, correct / count)
        if val_source is not None and eval_every and (step + 1) % eval_every == 0:
            ev = evaluate_relation(params, val_source, spec, eval_episodes,
                                   seed=root.split("val_eval", step).seed)
            metrics.add_eval(step + 1, ev.evals[0].episodes, ev.evals[0].accuracy, ev.evals[0].ci95)
    return params, metrics


def evaluate_relation(params: ParamSet, test_source: Dataset, spec: EpisodeSpec,
                      episodes: int, seed: int) -> RunMetrics:
    """Metric-based evaluation (no adaptation): accuracy of argmax relation
    scores over held-out episodes, with the 95% normal half-width."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    if not test_source.labeled:
        raise ValueError("evaluation needs a labeled source")
    eval_spec = EpisodeSpec(spec.n_way, spec.k_shot, spec.q_queries, "supervised")
    root = SeededRng(seed)
    accs = np.empty(episodes)
    for i in range(episodes):
        ep = sample_supervised_episode(test_source, eval_spec, root.split("eval_episode", i))
        with ad.no_grad():
            scores = relation_scores(params, ep)
        pred = np.argmax(scores.data, axis=1)
        true = np.argmax(ep.query_labels, axis=1)
        accs[i] = (pred == true).mean()
    mean = float(accs.mean())
    half = 0.0 if episodes == 1 else float(1.96 * accs.std(ddof=1) / np.sqrt(episodes))
    out = RunMetrics()
    out.add_eval(0, episodes, mean, half)
    return out
