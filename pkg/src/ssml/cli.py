"""Command-line interface: the two-stage pipeline end to end.

Subcommands:
  pretrain         unsupervised meta-training on pseudo-labeled episodes,
                   saving the transferred parameters as a checkpoint
  train            supervised meta-training from random or checkpoint init
  eval             held-out accuracy of a checkpoint
  compare          paired two-arm study (e.g. random vs transferred init)
  prob             distinct-class probability of an episode draw
  sweep-temp       pretrain+eval per inner-loop temperature
  augment-preview  write augmented samples and their pixel histograms

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import models
from .autodiff import NonFiniteError
from .config import ConfigError, DataBundle, RunConfig, load_config, resolve_data, set_key
from .data import DataError, Dataset, EpisodeSpec, _decode_png, distinct_class_probability, \
    monte_carlo_distinct_estimate
from .image import apply_pipeline, pixel_histogram, preset_pipeline
from .maml import DivergenceError, MamlConfig, evaluate, meta_train
from .metrics import MetricsWriter, RunMetrics, fmt
from .models import CheckpointError, ParamSet, load_checkpoint, save_checkpoint, transfer_into
from .relation import RelationTrainConfig, evaluate_relation, train_relation
from .rng import SeededRng

HIST_BINS = 32


def _out_path(path: str, out_dir: str | None) -> Path:
    p = Path(path)
    if out_dir and not p.is_absolute():
        return Path(out_dir) / p
    return p


def _episode_spec(cfg: RunConfig, mode: str) -> EpisodeSpec:
    k = 1 if mode == "unsupervised" else cfg.k_shot
    return EpisodeSpec(cfg.n_way, k, cfg.q_queries, mode)


def _maml_cfg(cfg: RunConfig, temperature: float, seed: int | None = None) -> MamlConfig:
    return MamlConfig(
        alpha=cfg.alpha, beta=cfg.beta, outer_steps=cfg.outer_steps,
        inner_steps=cfg.inner_steps, temperature_inner=temperature,
        second_order=cfg.second_order, tasks_per_outer_step=cfg.tasks_per_step,
        eval_inner_steps=cfg.eval_inner_steps,
        seed=cfg.seed if seed is None else seed)


def _relation_cfg(cfg: RunConfig, seed: int | None = None) -> RelationTrainConfig:
    return RelationTrainConfig(lr=cfg.lr, outer_steps=cfg.outer_steps,
                               tasks_per_step=cfg.tasks_per_step,
                               seed=cfg.seed if seed is None else seed)


def _model_config(cfg: RunConfig, data: Dataset):
    h, w, c = data.image_shape
    if cfg.model == "maml":
        return models.BackboneConfig(c, h, w, filters=cfg.filters, head="classifier", n_way=cfg.n_way)
    return models.RelationConfig(models.BackboneConfig(c, h, w, filters=cfg.filters, head="embedding"))


def _eval_once(cfg: RunConfig, params: ParamSet, source: Dataset, spec: EpisodeSpec,
               episodes: int, seed: int) -> tuple[float, float]:
    """Held-out accuracy at the regular test setup (inner temperature 1)."""
    if cfg.model == "maml":
        m = replace(_maml_cfg(cfg, temperature=1.0), outer_steps=0)
        res = evaluate(params, source, spec, m, episodes, seed=seed)
    else:
        res = evaluate_relation(params, source, spec, episodes, seed=seed)
    e = res.evals[0]
    return e.accuracy, e.ci95


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg: RunConfig, out_dir: str | None = None) -> Path:
    """Stage 1: unsupervised meta-training over the label-erased pool."""
    if cfg.augment == "none":
        raise ConfigError("pretrain needs an augmentation preset ('augment' key)")
    bundle = resolve_data(cfg)
    pool = bundle.train.erase_labels()
    pipeline = preset_pipeline(cfg.augment)
    spec = _episode_spec(cfg, "unsupervised")
    temperature = cfg.resolved_temperature(unsupervised=True)
    eval_every = cfg.resolved_eval_every() if bundle.val is not None else None

    if cfg.model == "maml":
        mcfg = _maml_cfg(cfg, temperature)
        params, metrics = meta_train(
            pool, "unsupervised", spec, pipeline, mcfg, filters=cfg.filters,
            val_source=bundle.val, eval_every=eval_every, eval_episodes=cfg.eval_episodes)
        temp_col = temperature
    else:
        rcfg = _relation_cfg(cfg)
        params, metrics = train_relation(
            pool, "unsupervised", spec, pipeline, rcfg, filters=cfg.filters,
            val_source=bundle.val, eval_every=eval_every, eval_episodes=cfg.eval_episodes)
        temp_col = None

    ckpt = _out_path(cfg.checkpoint, out_dir)
    save_checkpoint(params, ckpt)
    writer = MetricsWriter(_out_path(cfg.metrics, out_dir))
    writer.write_run("pretrain", metrics, cfg.seed, temp_col, "random")
    print(f"pretrain: saved {ckpt} ({params.fingerprint})")
    return ckpt


def _stage2_init(cfg: RunConfig, train_data: Dataset, init: str) -> tuple[ParamSet | None, str]:
    if init == "random":
        return None, "random"
    loaded = load_checkpoint(init)
    params = transfer_into(_model_config(cfg, train_data), loaded, seed=cfg.seed)
    return params, "checkpoint"


def cmd_train(cfg: RunConfig, init: str = "random", out_dir: str | None = None) -> Path:
    """Stage 2: supervised meta-training, warm-started from a stage-1
    checkpoint when ``init`` names one (backbone copied, head re-initialized
    if the way count differs)."""
    bundle = resolve_data(cfg)
    init = init if init != "config" else (cfg.init_checkpoint or "random")
    init_params, init_label = _stage2_init(cfg, bundle.train, init)
    spec = _episode_spec(cfg, "supervised")
    temperature = cfg.resolved_temperature(unsupervised=False)
    val_source = bundle.val if bundle.val is not None else bundle.test
    eval_every = cfg.resolved_eval_every() if val_source is not None else None

    if cfg.model == "maml":
        mcfg = _maml_cfg(cfg, temperature)
        params, metrics = meta_train(
            bundle.train, "supervised", spec, None, mcfg, init=init_params,
            filters=cfg.filters, val_source=val_source, eval_every=eval_every,
            eval_episodes=cfg.eval_episodes)
        temp_col = temperature
    else:
        rcfg = _relation_cfg(cfg)
        params, metrics = train_relation(
            bundle.train, "supervised", spec, None, rcfg, init=init_params,
            filters=cfg.filters, val_source=val_source, eval_every=eval_every,
            eval_episodes=cfg.eval_episodes)
        temp_col = None

    ckpt = _out_path(cfg.checkpoint, out_dir)
    save_checkpoint(params, ckpt)
    writer = MetricsWriter(_out_path(cfg.metrics, out_dir))
    writer.write_run("train", metrics, cfg.seed, temp_col, init_label)
    print(f"train: saved {ckpt} ({params.fingerprint}, init={init_label})")
    return ckpt


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, out_dir: str | None = None) -> tuple[float, float]:
    """Evaluate a checkpoint on held-out classes; prints mean +/- 95% CI."""
    bundle = resolve_data(cfg)
    test = bundle.test if bundle.test is not None else bundle.val
    if test is None:
        raise ConfigError("eval needs a test split: set test_dataset or split_train/split_val")
    if test.n_classes < cfg.n_way:
        raise DataError(f"test split has {test.n_classes} classes, episode needs {cfg.n_way}")
    ckpt_path = checkpoint or str(_out_path(cfg.checkpoint, out_dir))
    params = load_checkpoint(ckpt_path)
    expected = models.fingerprint(_model_config(cfg, test))
    models.require_fingerprint(params, expected)
    spec = _episode_spec(cfg, "supervised")
    acc, ci = _eval_once(cfg, params, test, spec, cfg.episodes,
                         seed=SeededRng(cfg.seed).split("cmd_eval").seed)
    writer = MetricsWriter(_out_path(cfg.metrics, out_dir))
    writer.write_row("eval", 0, cfg.episodes, None, acc, ci, cfg.seed, None, "checkpoint")
    print(f"eval: accuracy {fmt(acc)} +/- {fmt(ci)} over {cfg.episodes} episodes")
    return acc, ci


_COMPARE_MAY_DIFFER = {"init_checkpoint", "label_fraction", "q_queries", "checkpoint", "metrics"}


def _comparable_dump(cfg: RunConfig) -> str:
    lines = []
    for line in cfg.dump().splitlines():
        key = line.split(" = ", 1)[0]
        if key not in _COMPARE_MAY_DIFFER:
            lines.append(line)
    return "\n".join(lines)


def _arm_init_path(cfg: RunConfig, seed: int) -> str:
    if not cfg.init_checkpoint:
        return "random"
    return cfg.init_checkpoint.replace("{seed}", str(seed))


def _run_arm(cfg: RunConfig, arm_seed: int, test: Dataset, spec: EpisodeSpec,
             bundle: DataBundle, eval_seed_root: SeededRng) -> tuple[list, float, int]:
    """One stage-2 run: held-out trajectory, final accuracy, steps to
    threshold. Both arms of a repeat share ``arm_seed``, so training episode
    streams and trajectory evaluation episodes are paired across arms."""
    init = _arm_init_path(cfg, arm_seed)
    init_params, _ = _stage2_init(cfg, bundle.train, init)
    eval_every = cfg.resolved_eval_every()

    if cfg.model == "maml":
        mcfg = _maml_cfg(cfg, cfg.resolved_temperature(unsupervised=False), seed=arm_seed)
        params, metrics = meta_train(bundle.train, "supervised", spec, None, mcfg,
                                     init=init_params, filters=cfg.filters, val_source=test,
                                     eval_every=eval_every, eval_episodes=cfg.eval_episodes)
    else:
        rcfg = _relation_cfg(cfg, seed=arm_seed)
        params, metrics = train_relation(bundle.train, "supervised", spec, None, rcfg,
                                         init=init_params, filters=cfg.filters, val_source=test,
                                         eval_every=eval_every, eval_episodes=cfg.eval_episodes)

    traj = [(e.step, e.accuracy) for e in metrics.evals]
    steps_to_threshold = -1
    for step, acc in traj:
        if acc >= cfg.threshold:
            steps_to_threshold = step
            break
    final_acc, _ = _eval_once(cfg, params, test, spec, cfg.episodes,
                              seed=eval_seed_root.split("final").seed)
    return traj, final_acc, steps_to_threshold


def cmd_compare(cfg_a: RunConfig, cfg_b: RunConfig, out_dir: str | None = None,
                repeats: int | None = None) -> Path:
    """Two-arm study over ``repeats`` seeds (base seed + 0..repeats-1).

    Arms must be identical except initialization, label_fraction, q_queries
    and artifact paths. Emits per-arm held-out trajectories, final
    accuracies, steps-to-threshold, and the percentage accuracy drop when
    the label fractions differ. Evaluation episodes are paired across arms.
    """
    if _comparable_dump(cfg_a) != _comparable_dump(cfg_b):
        raise ConfigError("compare arms differ beyond init/label_fraction/q_queries")
    repeats = repeats or cfg_a.repeats
    rows: list[tuple] = []   # (arm, seed, kind, step, value)
    finals: dict[str, list[float]] = {"A": [], "B": []}
    for r in range(repeats):
        seed_r = cfg_a.seed + r
        eval_root = SeededRng(seed_r).split("compare_eval")
        for arm, cfg in (("A", cfg_a), ("B", cfg_b)):
            bundle = resolve_data(cfg)
            test = bundle.test if bundle.test is not None else bundle.val
            if test is None:
                raise ConfigError("compare needs a held-out split in both arms")
            spec = _episode_spec(cfg, "supervised")
            traj, final_acc, stt = _run_arm(cfg, seed_r, test, spec, bundle, eval_root)
            for step, acc in traj:
                rows.append((arm, seed_r, "trajectory", step, acc))
            rows.append((arm, seed_r, "final", cfg.outer_steps, final_acc))
            rows.append((arm, seed_r, "steps_to_threshold", stt, float(stt)))
            finals[arm].append(final_acc)
            print(f"compare: arm {arm} seed {seed_r}: final {fmt(final_acc)}, "
                  f"steps to {fmt(cfg.threshold)} threshold: {stt if stt >= 0 else 'not reached'}")

    if cfg_a.label_fraction != cfg_b.label_fraction:
        # percentage drop from the fully(-er) labeled arm to the other
        hi, lo = ("A", "B") if cfg_a.label_fraction > cfg_b.label_fraction else ("B", "A")
        for r in range(repeats):
            full, part = finals[hi][r], finals[lo][r]
            drop = (full - part) / full * 100.0 if full > 0 else float("nan")
            rows.append((lo, cfg_a.seed + r, "drop_percent", 0, drop))

    out = Path(out_dir or ".") / "comparison.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("arm,seed,kind,step,value\n")
        for arm, seed, kind, step, value in rows:
            fh.write(f"{arm},{seed},{kind},{step},{fmt(float(value))}\n")
    print(f"compare: wrote {out}")
    return out


def cmd_prob(c: int, m: int, n: int, trials: int | None = None, seed: int = 0) -> float:
    """Closed-form distinct-class probability, optionally with a Monte Carlo
    cross-check and its 3-sigma binomial band."""
    p = distinct_class_probability(c, m, n)
    print(f"P(distinct classes | c={c}, m={m}, n={n}) = {p:.4f}")
    if trials:
        est = monte_carlo_distinct_estimate(c, m, n, trials, seed)
        sigma = float(np.sqrt(max(p * (1 - p), 1e-12) / trials))
        print(f"monte carlo ({trials} trials, seed {seed}) = {est:.4f} "
              f"(3-sigma band {p - 3 * sigma:.4f}..{p + 3 * sigma:.4f})")
    return p


def cmd_sweep_temperature(cfg: RunConfig, temperatures=None, out_dir: str | None = None) -> Path:
    """One pretrain+eval per temperature at a fixed seed; evaluation uses the
    regular test setup (inner temperature 1)."""
    if cfg.model != "maml":
        raise ConfigError("sweep-temp applies to the maml model only")
    if cfg.augment == "none":
        raise ConfigError("sweep-temp needs an augmentation preset")
    temps = tuple(temperatures) if temperatures else cfg.temperatures
    if any(t <= 0 for t in temps):
        raise ConfigError("temperatures must be positive")
    bundle = resolve_data(cfg)
    test = bundle.test if bundle.test is not None else bundle.val
    if test is None:
        raise ConfigError("sweep-temp needs a test split")
    pool = bundle.train.erase_labels()
    pipeline = preset_pipeline(cfg.augment)
    spec = _episode_spec(cfg, "unsupervised")
    eval_seed = SeededRng(cfg.seed).split("sweep_eval").seed

    out = Path(out_dir or ".") / "temperature_sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("temperature,accuracy\n")
        for t in temps:
            mcfg = _maml_cfg(cfg, temperature=float(t))
            params, _ = meta_train(pool, "unsupervised", spec, pipeline, mcfg, filters=cfg.filters)
            acc, _ = _eval_once(cfg, params, test, spec, cfg.episodes, seed=eval_seed)
            fh.write(f"{fmt(float(t))},{fmt(acc)}\n")
            print(f"sweep-temp: T={fmt(float(t))} accuracy {fmt(acc)}")
    print(f"sweep-temp: wrote {out}")
    return out


def cmd_augment_preview(image_path: str, preset: str, count: int, seed: int,
                        out_dir: str | None = None) -> Path:
    """Write ``count`` augmented PNGs plus per-sample pixel histograms
    (32 bins per channel; the first row is the unmodified input)."""
    from PIL import Image as PILImage

    img = _decode_png(Path(image_path))
    pipeline = preset_pipeline(preset)
    out = Path(out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, np.ndarray]] = [("original", pixel_histogram(img, HIST_BINS))]
    root = SeededRng(seed)
    for i in range(count):
        aug = apply_pipeline(img, pipeline, root.split("preview", i))
        rows.append((f"{i}", pixel_histogram(aug, HIST_BINS)))
        arr = np.clip(np.round(aug * 255.0), 0, 255).astype(np.uint8)
        pil = PILImage.fromarray(arr[:, :, 0], "L") if arr.shape[2] == 1 else PILImage.fromarray(arr, "RGB")
        pil.save(out / f"aug_{i:03d}.png")
    csv_path = out / "histograms.csv"
    with open(csv_path, "w") as fh:
        fh.write("sample,channel," + ",".join(f"b{i:02d}" for i in range(HIST_BINS)) + "\n")
        for name, hist in rows:
            for ch in range(hist.shape[0]):
                fh.write(f"{name},{ch}," + ",".join(str(int(v)) for v in hist[ch]) + "\n")
    print(f"augment-preview: wrote {count} samples and {csv_path}")
    return csv_path


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to a key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="directory for artifacts (relative paths land here)")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssml", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="stage-1 unsupervised meta-training")
    _add_common(p)

    p = sub.add_parser("train", help="stage-2 supervised meta-training")
    _add_common(p)
    p.add_argument("--init", default="config",
                   help="'random', a checkpoint path, or 'config' (use init_checkpoint key)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out classes")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: config key)")

    p = sub.add_parser("compare", help="two-arm comparison over repeated seeds")
    p.add_argument("--config-a", required=True, help="arm A config (e.g. random init)")
    p.add_argument("--config-b", required=True, help="arm B config (e.g. transferred init)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--repeats", type=int, default=None)

    p = sub.add_parser("prob", help="distinct-class probability of an episode draw")
    p.add_argument("c", type=int, help="number of classes")
    p.add_argument("m", type=int, help="samples per class")
    p.add_argument("n", type=int, help="draws")
    p.add_argument("--trials", type=int, default=None, help="Monte Carlo cross-check trials")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep-temp", help="pretrain+eval per inner-loop temperature")
    _add_common(p)
    p.add_argument("--temperatures", default=None, help="comma-separated list, e.g. 1,10,100")

    p = sub.add_parser("augment-preview", help="write augmented samples + histograms")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--preset", required=True, help="ours_rgb | simclr_rgb | omniglot_affine")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    return ap


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        set_key(cfg, "seed", str(args.seed))
    return cfg.validated()


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1          # argparse usage errors are config errors

    try:
        if args.command == "pretrain":
            cmd_pretrain(_load_cfg(args), out_dir=args.out)
        elif args.command == "train":
            cmd_train(_load_cfg(args), init=args.init, out_dir=args.out)
        elif args.command == "eval":
            cmd_eval(_load_cfg(args), checkpoint=args.checkpoint, out_dir=args.out)
        elif args.command == "compare":
            cfg_a = load_config(args.config_a)
            cfg_b = load_config(args.config_b)
            if args.seed is not None:
                set_key(cfg_a, "seed", str(args.seed))
                set_key(cfg_b, "seed", str(args.seed))
            cmd_compare(cfg_a.validated(), cfg_b.validated(), out_dir=args.out, repeats=args.repeats)
        elif args.command == "prob":
            cmd_prob(args.c, args.m, args.n, trials=args.trials, seed=args.seed)
        elif args.command == "sweep-temp":
            temps = None
            if args.temperatures:
                temps = tuple(float(x) for x in args.temperatures.split(",") if x.strip())
            cmd_sweep_temperature(_load_cfg(args), temperatures=temps, out_dir=args.out)
        elif args.command == "augment-preview":
            cmd_augment_preview(args.image, args.preset, args.count, args.seed, out_dir=args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (DivergenceError, NonFiniteError) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
