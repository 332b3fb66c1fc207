"""Flat run configuration: UTF-8 text, one ``key = value`` per line,
``#`` comments. Unknown keys are rejected; CLI flags override file values.

Dataset values are either a directory path (PNG tree, one subdirectory per
class when labeled) or an inline generator spec of the form
``synthetic:classes=32,per_class=40,h=28,w=28,channels=3,seed=7``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import Dataset, load_dataset, split_classes, subset_labels, synthetic_dataset


class ConfigError(Exception):
    """Bad configuration: unknown key, bad value, or missing requirement."""


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got '{s}'")


def _parse_float_list(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in s.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"expected comma-separated floats, got '{s}'") from e


@dataclass
class RunConfig:
    # model / episode spec
    model: str = "maml"                  # maml | relation
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 1
    filters: int = 16

    # data
    dataset: str = ""
    val_dataset: str = ""
    test_dataset: str = ""
    split_train: int = 0                 # >0 enables a class split of `dataset`
    split_val: int = 0
    split_seed: int = 0
    label_fraction: float = 1.0
    augment: str = "none"                # ours_rgb | simclr_rgb | omniglot_affine | none

    # maml hyperparameters
    alpha: float = 0.05
    beta: float = 0.01
    inner_steps: int = 3
    eval_inner_steps: int = 5
    temperature: str = "auto"            # float, or 'auto' for the tuned defaults
    second_order: bool = False

    # relation hyperparameters
    lr: float = 0.02

    # run shape
    outer_steps: int = 100
    tasks_per_step: int = 2
    seed: int = 0
    eval_every: int = 0                  # 0 -> every 10% of outer_steps
    eval_episodes: int = 40
    episodes: int = 200                  # final/eval-subcommand episode count
    threshold: float = 0.8               # compare: steps-to-threshold accuracy
    repeats: int = 5                     # compare: seeds per arm
    temperatures: tuple = (1.0, 10.0, 100.0)

    # artifacts
    checkpoint: str = "out/model.ckpt"
    init_checkpoint: str = ""
    metrics: str = "out/metrics.csv"

    def validated(self) -> "RunConfig":
        if self.model not in ("maml", "relation"):
            raise ConfigError(f"model must be 'maml' or 'relation', got '{self.model}'")
        if self.augment not in ("none", "ours_rgb", "simclr_rgb", "omniglot_affine"):
            raise ConfigError(f"unknown augment preset '{self.augment}'")
        if self.n_way < 2 or self.k_shot < 1 or self.q_queries < 1:
            raise ConfigError("episode spec needs n_way >= 2, k_shot >= 1, q_queries >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction {self.label_fraction} outside (0, 1]")
        if self.temperature != "auto":
            try:
                t = float(self.temperature)
            except ValueError:
                raise ConfigError(f"temperature must be a number or 'auto', got '{self.temperature}'")
            if t <= 0:
                raise ConfigError("temperature must be positive")
        return self

    def resolved_temperature(self, unsupervised: bool) -> float:
        """Inner-loop temperature. 'auto' follows the tuned defaults for RGB
        unsupervised runs: 100 for 5-way, 10 for 20-way, else 1."""
        if self.temperature != "auto":
            return float(self.temperature)
        if unsupervised and self.model == "maml" and self.augment in ("ours_rgb", "simclr_rgb"):
            if self.n_way == 5:
                return 100.0
            if self.n_way == 20:
                return 10.0
        return 1.0

    def resolved_eval_every(self) -> int:
        if self.eval_every > 0:
            return self.eval_every
        return max(1, self.outer_steps // 10)

    def dump(self) -> str:
        """Canonical key = value text; re-parsing it reproduces the config."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(format(x, "g") for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        set_key(cfg, key, value, where=f"{source}:{lineno}")
    return cfg.validated()


def set_key(cfg: RunConfig, key: str, value: str, where: str = "<override>") -> None:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"{where}: unknown key '{key}'")
    t = _FIELD_TYPES[key]
    try:
        if t in ("int",):
            setattr(cfg, key, int(value))
        elif t in ("float",):
            setattr(cfg, key, float(value))
        elif t in ("bool",):
            setattr(cfg, key, _parse_bool(value))
        elif t in ("tuple",):
            setattr(cfg, key, _parse_float_list(value))
        else:
            setattr(cfg, key, value)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for '{key}': {e}") from e


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file '{p}' does not exist")
    return parse_config_text(p.read_text(encoding="utf-8"), source=str(p))


# ---------------------------------------------------------------------------
# data resolution


def _dataset_from_value(value: str, labeled: bool) -> Dataset:
    if value.startswith("synthetic:"):
        params = {}
        for item in value[len("synthetic:"):].split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise ConfigError(f"bad synthetic spec item '{item}'")
            k, v = item.split("=", 1)
            params[k.strip()] = int(v)
        try:
            ds = synthetic_dataset(
                n_classes=params.pop("classes"), m_per_class=params.pop("per_class"),
                h=params.pop("h"), w=params.pop("w"),
                channels=params.pop("channels"), seed=params.pop("seed"))
        except KeyError as e:
            raise ConfigError(f"synthetic spec missing field {e}") from e
        if params:
            raise ConfigError(f"unknown synthetic spec fields {sorted(params)}")
        return ds if labeled else ds.erase_labels()
    return load_dataset(value, labeled)


@dataclass
class DataBundle:
    train: Dataset
    val: Dataset | None
    test: Dataset | None


def resolve_data(cfg: RunConfig) -> DataBundle:
    """Materialize train/val/test sources from the config.

    With split_train > 0 the main dataset is partitioned by class;
    explicit val_dataset / test_dataset values take precedence over the
    corresponding split parts. label_fraction subsamples the train part.
    """
    if not cfg.dataset:
        raise ConfigError("config needs a 'dataset'")
    ds = _dataset_from_value(cfg.dataset, labeled=True)
    val = test = None
    if cfg.split_train > 0:
        train, val, test = split_classes(ds, cfg.split_train, cfg.split_val, cfg.split_seed)
    else:
        train = ds
    if cfg.val_dataset:
        val = _dataset_from_value(cfg.val_dataset, labeled=True)
    if cfg.test_dataset:
        test = _dataset_from_value(cfg.test_dataset, labeled=True)
    if val is not None and len(val) == 0:
        val = None
    if test is not None and len(test) == 0:
        test = None
    if cfg.label_fraction < 1.0:
        train = subset_labels(train, cfg.label_fraction, seed=cfg.split_seed)
    return DataBundle(train=train, val=val, test=test)
