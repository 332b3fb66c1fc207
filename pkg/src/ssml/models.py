"""Few-shot backbones and parameter serialization.

One backbone serves both meta-learners: four blocks of conv3x3 (padding 1)
-> batchnorm -> relu -> maxpool 2x2, ending in either a linear classifier
head or a spatial embedding. The relation model pairs the embedding with a
two-conv-block scorer topped by two fully connected layers and a sigmoid.
Max pooling is skipped in any block whose spatial extent is smaller than
the window, so small inputs (e.g. 14x14) remain usable.

Checkpoints are a little-endian binary format with an architecture
fingerprint, and round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import SeededRng

N_BLOCKS = 4
CONV_K = 3
CONV_PAD = 1
POOL_K = 2
BN_EPS = 1e-5
RELATION_HIDDEN = 8

CHECKPOINT_MAGIC = b"SSML"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Ordered name -> Tensor mapping plus an architecture fingerprint."""

    def __init__(self, named: dict[str, Tensor], fingerprint: str):
        self._named = dict(named)
        self.fingerprint = fingerprint

    def items(self):
        return self._named.items()

    def names(self):
        return list(self._named)

    def tensors(self) -> list[Tensor]:
        return list(self._named.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._named[name]

    def __contains__(self, name: str) -> bool:
        return name in self._named

    def __len__(self) -> int:
        return len(self._named)

    def replace_tensors(self, new: dict[str, Tensor]) -> "ParamSet":
        """Same structure and fingerprint, new tensors (used by updates)."""
        if set(new) != set(self._named):
            raise ValueError("replacement names do not match parameter names")
        return ParamSet({name: new[name] for name in self._named}, self.fingerprint)

    def detached(self) -> "ParamSet":
        """Fresh leaf copies of every tensor (graph history dropped)."""
        return ParamSet(
            {n: ad.parameter(t.data.copy(), dtype=t.data.dtype) for n, t in self._named.items()},
            self.fingerprint)


# ---------------------------------------------------------------------------
# configurations and fingerprints


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int
    in_h: int
    in_w: int
    filters: int = 64
    head: str = "classifier"      # "classifier" | "embedding"
    n_way: int | None = None      # classifier head width

    def __post_init__(self):
        if self.head not in ("classifier", "embedding"):
            raise ValueError(f"unknown head '{self.head}'")
        if self.head == "classifier" and (self.n_way is None or self.n_way < 2):
            raise ValueError("classifier head needs n_way >= 2")
        h, w = _spatial_after_blocks(self.in_h, self.in_w)
        if h < 1 or w < 1:
            raise ValueError(f"input {self.in_h}x{self.in_w} collapses below 1x1")

    @property
    def feature_hw(self) -> tuple[int, int]:
        return _spatial_after_blocks(self.in_h, self.in_w)


@dataclass(frozen=True)
class RelationConfig:
    embedding: BackboneConfig

    def __post_init__(self):
        if self.embedding.head != "embedding":
            raise ValueError("relation model needs an embedding-head backbone")


def _spatial_after_blocks(h: int, w: int, blocks: int = N_BLOCKS) -> tuple[int, int]:
    for _ in range(blocks):
        # conv keeps spatial dims (k=3, pad=1); pool halves when it fits
        if h >= POOL_K and w >= POOL_K:
            h = (h - POOL_K) // POOL_K + 1
            w = (w - POOL_K) // POOL_K + 1
    return h, w


def _backbone_signature(cfg: BackboneConfig) -> str:
    return f"in={cfg.in_channels}x{cfg.in_h}x{cfg.in_w}/filters={cfg.filters}/blocks={N_BLOCKS}"


def fingerprint(config: BackboneConfig | RelationConfig) -> str:
    if isinstance(config, RelationConfig):
        e = config.embedding
        return (f"relation/{_backbone_signature(e)}"
                f"/relfilters={e.filters}/hidden={RELATION_HIDDEN}")
    if config.head == "classifier":
        return f"classifier/{_backbone_signature(config)}/n_way={config.n_way}"
    return f"embedding/{_backbone_signature(config)}"


def backbone_signature_of(fp: str) -> str:
    """The backbone portion of a fingerprint; equal signatures mean the
    convolutional stack (and batchnorm) tensors are interchangeable."""
    parts = fp.split("/")
    return "/".join(p for p in parts if p.startswith(("in=", "filters=", "blocks=")))


# ---------------------------------------------------------------------------
# initialization


def _he_conv(rng: SeededRng, out_c: int, in_c: int, k: int, dtype) -> np.ndarray:
    fan_in = in_c * k * k
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))).astype(dtype)


def _he_linear(rng: SeededRng, out_f: int, in_f: int, dtype) -> np.ndarray:
    return (rng.normal(0.0, np.sqrt(2.0 / in_f), size=(in_f, out_f))).astype(dtype)


def _init_blocks(rng: SeededRng, prefix: str, in_c: int, filters: int, dtype) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    c = in_c
    for blk in range(1, N_BLOCKS + 1):
        out[f"{prefix}block{blk}.conv.weight"] = _he_conv(rng.split(prefix, "conv", blk), filters, c, CONV_K, dtype)
        out[f"{prefix}block{blk}.conv.bias"] = np.zeros(filters, dtype=dtype)
        out[f"{prefix}block{blk}.bn.gamma"] = np.ones(filters, dtype=dtype)
        out[f"{prefix}block{blk}.bn.beta"] = np.zeros(filters, dtype=dtype)
        c = filters
    return out


def init_params(config: BackboneConfig | RelationConfig, seed: int, dtype=np.float32) -> ParamSet:
    """He-initialized conv/linear weights, zero biases, unit batchnorm."""
    rng = SeededRng(seed).split("init")
    arrays: dict[str, np.ndarray] = {}
    if isinstance(config, RelationConfig):
        e = config.embedding
        arrays.update(_init_blocks(rng, "embed.", e.in_channels, e.filters, dtype))
        c = 2 * e.filters
        for blk in range(1, 3):
            arrays[f"rel.block{blk}.conv.weight"] = _he_conv(rng.split("rel", blk), e.filters, c, CONV_K, dtype)
            arrays[f"rel.block{blk}.conv.bias"] = np.zeros(e.filters, dtype=dtype)
            arrays[f"rel.block{blk}.bn.gamma"] = np.ones(e.filters, dtype=dtype)
            arrays[f"rel.block{blk}.bn.beta"] = np.zeros(e.filters, dtype=dtype)
            c = e.filters
        fh, fw = e.feature_hw
        rh, rw = _spatial_after_blocks(fh, fw, blocks=2)
        flat = e.filters * rh * rw
        arrays["rel.fc1.weight"] = _he_linear(rng.split("rel_fc", 1), RELATION_HIDDEN, flat, dtype)
        arrays["rel.fc1.bias"] = np.zeros(RELATION_HIDDEN, dtype=dtype)
        arrays["rel.fc2.weight"] = _he_linear(rng.split("rel_fc", 2), 1, RELATION_HIDDEN, dtype)
        arrays["rel.fc2.bias"] = np.zeros(1, dtype=dtype)
    else:
        arrays.update(_init_blocks(rng, "", config.in_channels, config.filters, dtype))
        if config.head == "classifier":
            fh, fw = config.feature_hw
            flat = config.filters * fh * fw
            arrays["head.weight"] = _he_linear(rng.split("head"), config.n_way, flat, dtype)
            arrays["head.bias"] = np.zeros(config.n_way, dtype=dtype)
    named = {k: ad.parameter(v, dtype=dtype) for k, v in arrays.items()}
    return ParamSet(named, fingerprint(config))


# ---------------------------------------------------------------------------
# forward passes


def batch_to_tensor(images_hwc: np.ndarray, dtype=np.float32) -> Tensor:
    """[B, H, W, C] float batch -> untracked NCHW tensor."""
    arr = np.ascontiguousarray(images_hwc.transpose(0, 3, 1, 2)).astype(dtype)
    return Tensor(arr)


def _run_blocks(params: ParamSet, x: Tensor, prefix: str, n_blocks: int = N_BLOCKS) -> Tensor:
    for blk in range(1, n_blocks + 1):
        x = ad.conv2d(x, params[f"{prefix}block{blk}.conv.weight"],
                      params[f"{prefix}block{blk}.conv.bias"], stride=1, padding=CONV_PAD)
        x = ad.batchnorm2d(x, params[f"{prefix}block{blk}.bn.gamma"],
                           params[f"{prefix}block{blk}.bn.beta"], eps=BN_EPS)
        x = ad.relu(x)
        if x.shape[2] >= POOL_K and x.shape[3] >= POOL_K:
            x = ad.maxpool2d(x, POOL_K, POOL_K)
    return x


def forward_classifier(params: ParamSet, images: Tensor, n_way: int) -> Tensor:
    """Logits [B, n_way] from an NCHW image batch."""
    if not params.fingerprint.startswith("classifier/"):
        raise ValueError(f"expected classifier parameters, got '{params.fingerprint}'")
    if f"/n_way={n_way}" not in params.fingerprint:
        raise ValueError(f"parameters built for a different n_way than {n_way}: '{params.fingerprint}'")
    feat = _run_blocks(params, images, "")
    b = feat.shape[0]
    flat = ad.reshape(feat, (b, feat.shape[1] * feat.shape[2] * feat.shape[3]))
    return ad.add(ad.matmul(flat, params["head.weight"]),
                  ad.reshape(params["head.bias"], (1, n_way)))


def forward_embedding(params: ParamSet, images: Tensor) -> Tensor:
    """Feature maps [B, filters, H', W']; spatial extent retained."""
    if not (params.fingerprint.startswith("embedding/") or params.fingerprint.startswith("relation/")):
        raise ValueError(f"expected embedding parameters, got '{params.fingerprint}'")
    prefix = "embed." if params.fingerprint.startswith("relation/") else ""
    return _run_blocks(params, images, prefix)


def concat_features(f_support: Tensor, f_query: Tensor) -> Tensor:
    """Depth concatenation, support first."""
    if f_support.shape != f_query.shape:
        raise ValueError(f"feature shapes differ: {f_support.shape} vs {f_query.shape}")
    return ad.concat([f_support, f_query], axis=1)


def forward_relation(params: ParamSet, paired: Tensor) -> Tensor:
    """Relation scores in (0, 1), shape [pairs, 1]."""
    if not params.fingerprint.startswith("relation/"):
        raise ValueError(f"expected relation parameters, got '{params.fingerprint}'")
    if paired.shape[1] != params["rel.block1.conv.weight"].shape[1]:
        raise ValueError(
            f"paired features have {paired.shape[1]} channels, "
            f"relation module expects {params['rel.block1.conv.weight'].shape[1]}")
    x = _run_blocks(params, paired, "rel.", n_blocks=2)
    b = x.shape[0]
    flat = ad.reshape(x, (b, x.shape[1] * x.shape[2] * x.shape[3]))
    h = ad.relu(ad.add(ad.matmul(flat, params["rel.fc1.weight"]),
                       ad.reshape(params["rel.fc1.bias"], (1, RELATION_HIDDEN))))
    out = ad.add(ad.matmul(h, params["rel.fc2.weight"]),
                 ad.reshape(params["rel.fc2.bias"], (1, 1)))
    return ad.sigmoid(out)


# ---------------------------------------------------------------------------
# transfer


def _family(fp: str) -> str:
    kind = fp.split("/", 1)[0]
    # classifier and embedding share backbone tensor names; relation does not
    return "relation" if kind == "relation" else "backbone"


def transfer_into(config: BackboneConfig | RelationConfig, source: ParamSet,
                  seed: int, dtype=np.float32) -> ParamSet:
    """Warm start: copy every tensor whose name and shape match into a fresh
    init of ``config``; anything else (e.g. a head for a different n_way)
    keeps its fresh initialization. Model family and backbone signature must
    agree, so a classifier checkpoint cannot seed a relation model."""
    target = init_params(config, seed, dtype)
    if (_family(source.fingerprint) != _family(target.fingerprint)
            or backbone_signature_of(source.fingerprint) != backbone_signature_of(target.fingerprint)):
        raise CheckpointError(
            f"incompatible backbone: checkpoint '{source.fingerprint}' "
            f"vs config '{target.fingerprint}'")
    new: dict[str, Tensor] = {}
    for name, t in target.items():
        if name in source and source[name].shape == t.shape:
            new[name] = ad.parameter(source[name].data.astype(dtype), dtype=dtype)
        else:
            new[name] = t
    return target.replace_tensors(new)


# ---------------------------------------------------------------------------
# checkpoint format (little-endian):
#   magic "SSML" | version u32 | fingerprint (u32 len + utf-8) | count u32
#   per tensor: name (u32 len + utf-8) | dtype u8 (0=f32, 1=f64)
#               | rank u32 | extents u64[rank] | raw payload

_DTYPE_TAGS = {0: np.float32, 1: np.float64}


def save_checkpoint(params: ParamSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fp_bytes = params.fingerprint.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(fp_bytes)))
        fh.write(fp_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            tag = 0 if t.data.dtype == np.float32 else 1
            fh.write(struct.pack("<B", tag))
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data).astype("<" + t.data.dtype.str[1:]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str | Path) -> ParamSet:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint '{path}' does not exist")
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (fp_len,) = struct.unpack("<I", _read_exact(fh, 4, "fingerprint length"))
        fp = _read_exact(fh, fp_len, "fingerprint").decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        named: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (tag,) = struct.unpack("<B", _read_exact(fh, 1, f"dtype of '{name}'"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag} for tensor '{name}'")
            dtype = _DTYPE_TAGS[tag]
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of '{name}'"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"extents of '{name}'"))
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
            raw = _read_exact(fh, nbytes, f"payload of tensor '{name}'")
            arr = np.frombuffer(raw, dtype="<" + np.dtype(dtype).str[1:]).astype(dtype).reshape(shape)
            named[name] = ad.parameter(arr.copy(), dtype=dtype)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final tensor")
    return ParamSet(named, fp)


def require_fingerprint(params: ParamSet, expected: str) -> None:
    if params.fingerprint != expected:
        raise CheckpointError(
            f"fingerprint mismatch: checkpoint '{params.fingerprint}' vs expected '{expected}'")
