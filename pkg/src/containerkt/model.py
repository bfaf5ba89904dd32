"""Knowledge-tracing network with LSTM-derived attention inputs.

Pipeline per window::

    Q0 = [embedding(content) | query features]
    X  = MLP_b([MLP_a(Q0) | memory])
    H  = LSTM(X)                       # zero state, pads reset the state
    Hs = H gathered at plan.shift_index (last position of an earlier container)
    Qt = MLP_c([Hs | Q0 | hand-crafted])          -> attention query
    KV = MLP_d([Qt | memory])                     -> attention key and value
    A  = multi-head attention(Qt, KV, KV, plan.allowed)
    p  = sigmoid(MLP_e([A | Qt]))

Position ``i`` only reads the recurrent state and keys of earlier container
runs, so outcome features of its own container never reach its prediction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ModelConfig",
    "Batch",
    "param_shapes",
    "init_params",
    "forward",
    "loss",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedCheckpointError",
    "ShapeMismatchError",
]

MLP_NAMES = ("mlp_a", "mlp_b", "mlp_c", "mlp_d", "mlp_e")
_DROPOUT_LAYER = {name: k for k, name in enumerate(MLP_NAMES)} | {"attn": len(MLP_NAMES)}


@dataclass
class ModelConfig:
    n_content: int
    query_dim: int
    memory_dim: int
    handcrafted_dim: int
    d_model: int = 512
    n_heads: int = 4
    seq_len: int = 400
    dropout_rate: float = 0.2
    embed_dim: int = 512
    mlp_hidden: tuple[int, int, int, int, int] | None = None
    mask_window: int | None = None
    use_handcrafted: bool = True
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.mlp_hidden is None:
            self.mlp_hidden = (self.d_model,) * 5
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        sizes = (self.n_content, self.query_dim, self.memory_dim, self.d_model, self.n_heads, self.seq_len, self.embed_dim)
        if len(self.mlp_hidden) != 5 or min(sizes + self.mlp_hidden) < 1 or self.handcrafted_dim < 0:
            raise ValueError("all model sizes must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.mask_window is not None and self.mask_window < 1:
            raise ValueError("mask_window must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def window(self) -> int:
        return self.seq_len if self.mask_window is None else self.mask_window

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    """Left-padded model input for ``B`` windows of length ``L``.

    ``shift_index`` and ``allowed`` already include the padding offset; pad
    positions have ``pad_mask`` false, no allowed keys and are never attended.
    """

    content_index: np.ndarray  # (B, L) int
    query: np.ndarray  # (B, L, query_dim)
    memory: np.ndarray  # (B, L, memory_dim)
    handcrafted: np.ndarray  # (B, L, F)
    shift_index: np.ndarray  # (B, L) int, -1 = none
    allowed: np.ndarray  # (B, L, L) bool
    pad_mask: np.ndarray  # (B, L) bool, True = real event
    labels: np.ndarray | None = None  # (B, L)
    is_question: np.ndarray | None = None  # (B, L) bool
    user_ids: np.ndarray | None = None
    row_ids: np.ndarray | None = None  # (B, L), -1 on pads
    offsets: np.ndarray | None = None  # window start within each user history

    @property
    def loss_mask(self) -> np.ndarray:
        if self.is_question is None:
            raise ValueError("batch carries no question mask")
        return self.is_question & self.pad_mask

    def __len__(self) -> int:
        return int(self.content_index.shape[0])


# --------------------------------------------------------------------------- parameters


def _q0_dim(config: ModelConfig) -> int:
    return config.embed_dim + config.query_dim


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = config.d_model, config.memory_dim
    f = config.handcrafted_dim if config.use_handcrafted else 0
    q0 = _q0_dim(config)
    io = {
        "mlp_a": (q0, d),
        "mlp_b": (d + m, d),
        "mlp_c": (d + q0 + f, d),
        "mlp_d": (d + m, d),
        "mlp_e": (2 * d, 1),
    }
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.n_content, config.embed_dim)}
    for name, hidden in zip(MLP_NAMES, config.mlp_hidden):
        n_in, n_out = io[name]
        shapes[f"{name}.w1"] = (n_in, hidden)
        shapes[f"{name}.b1"] = (hidden,)
        shapes[f"{name}.w2"] = (hidden, n_out)
        shapes[f"{name}.b2"] = (n_out,)
        if name == "mlp_b":
            shapes["lstm.w_ih"] = (d, 4 * d)
            shapes["lstm.w_hh"] = (d, 4 * d)
            shapes["lstm.bias"] = (4 * d,)
    for proj in ("wq", "wk", "wv", "wo"):
        shapes[f"attn.{proj}"] = (d, d)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict) -> int:
    if name == "embedding":
        return shape[1]
    if len(shape) == 2:
        return shape[0]
    prefix = name.rsplit(".", 1)[0]
    if name == "lstm.bias":
        return shapes["lstm.w_hh"][0]
    weight = f"{prefix}.w{name[-1]}"
    return shapes[weight][0]


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor, one seeded stream."""
    rng = np.random.default_rng([seed, 17])
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        bound = 1.0 / math.sqrt(_fan_in(name, shape, shapes))
        data = rng.uniform(-bound, bound, size=shape).astype(config.dtype)
        params[name] = Tensor(data, requires_grad=True, name=name, dtype=config.dtype)
    return params


# --------------------------------------------------------------------------- forward


def _mlp(x: Tensor, params: dict[str, Tensor], name: str, config: ModelConfig, train: bool, seed: int, step: int) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{name}.w1"]), params[f"{name}.b1"]))
    h = ad.dropout(h, config.dropout_rate, train, seed, _DROPOUT_LAYER[name], step)
    return ad.add(ad.matmul(h, params[f"{name}.w2"]), params[f"{name}.b2"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return ad.transpose(ad.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def _attention(query: Tensor, kv: Tensor, allowed: np.ndarray, params, config: ModelConfig, train, seed, step) -> Tensor:
    B, L, d = query.shape
    h = config.n_heads
    q = _split_heads(ad.matmul(query, params["attn.wq"]), h)
    k = _split_heads(ad.matmul(kv, params["attn.wk"]), h)
    v = _split_heads(ad.matmul(kv, params["attn.wv"]), h)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // h))
    weights = ad.softmax_masked(scores, allowed[:, None, :, :])
    ctx = ad.matmul(weights, v)  # (B, h, L, dh)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
    out = ad.matmul(ctx, params["attn.wo"])
    return ad.dropout(out, config.dropout_rate, train, seed, _DROPOUT_LAYER["attn"], step)


def _check_batch(config: ModelConfig, batch: Batch) -> None:
    B, L = batch.content_index.shape
    expected = {
        "query": (B, L, config.query_dim),
        "memory": (B, L, config.memory_dim),
        "handcrafted": (B, L, config.handcrafted_dim),
        "shift_index": (B, L),
        "allowed": (B, L, L),
        "pad_mask": (B, L),
    }
    for name, shape in expected.items():
        got = np.shape(getattr(batch, name))
        if got != shape:
            raise ValueError(f"batch.{name} has shape {got}, expected {shape}")
    if L > config.seq_len:
        raise ValueError(f"window length {L} exceeds seq_len {config.seq_len}")
    shift = np.asarray(batch.shift_index)
    if (shift >= np.arange(L)).any() or (shift < -1).any():
        raise ValueError("plan mismatch: shift_index must satisfy -1 <= shift_index[i] < i")


def forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    batch: Batch,
    train: bool = False,
    seed: int = 0,
    step: int = 0,
) -> Tensor:
    """Per-position probability of a correct answer, shape (B, L, 1)."""
    _check_batch(config, batch)
    dt = config.dtype
    B, L = batch.content_index.shape
    d = config.d_model
    pad = np.asarray(batch.pad_mask, dtype=bool)
    content = np.where(pad, batch.content_index, -1)

    emb = ad.reshape(ad.row_gather(params["embedding"], content.reshape(-1)), (B, L, config.embed_dim))
    q0 = ad.concat([emb, Tensor(np.asarray(batch.query, dtype=dt))], axis=-1)
    memory = Tensor(np.asarray(batch.memory, dtype=dt))

    x1 = _mlp(q0, params, "mlp_a", config, train, seed, step)
    x2 = _mlp(ad.concat([x1, memory], axis=-1), params, "mlp_b", config, train, seed, step)
    hidden = ad.lstm(x2, params["lstm.w_ih"], params["lstm.w_hh"], params["lstm.bias"], step_mask=pad)

    shift = np.asarray(batch.shift_index, dtype=np.int64)
    flat_idx = np.where(shift >= 0, shift + (np.arange(B) * L)[:, None], -1)
    shifted = ad.reshape(ad.row_gather(ad.reshape(hidden, (B * L, d)), flat_idx.reshape(-1)), (B, L, d))

    parts = [shifted, q0]
    if config.use_handcrafted:
        parts.append(Tensor(np.asarray(batch.handcrafted, dtype=dt)))
    query = _mlp(ad.concat(parts, axis=-1), params, "mlp_c", config, train, seed, step)
    kv = _mlp(ad.concat([query, memory], axis=-1), params, "mlp_d", config, train, seed, step)

    allowed = np.asarray(batch.allowed, dtype=bool) & pad[:, None, :] & pad[:, :, None]
    attended = _attention(query, kv, allowed, params, config, train, seed, step)
    logits = _mlp(ad.concat([attended, query], axis=-1), params, "mlp_e", config, train, seed, step)
    return ad.sigmoid(logits)


def loss(
    params: dict[str, Tensor],
    config: ModelConfig,
    batch: Batch,
    train: bool = False,
    seed: int = 0,
    step: int = 0,
) -> Tensor:
    """Masked binary cross-entropy over question positions that are not padding."""
    if batch.labels is None:
        raise ValueError("batch carries no labels")
    mask = batch.loss_mask
    if not mask.any():
        raise ValueError("batch has no question positions to score")
    probs = forward(params, config, batch, train, seed, step)
    return ad.bce_masked(probs, np.asarray(batch.labels)[..., None], mask[..., None])


def predict(params: dict[str, Tensor], config: ModelConfig, batch: Batch) -> np.ndarray:
    with ad.no_grad():
        return forward(params, config, batch, train=False).data[..., 0]


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"RKT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(params: dict[str, Tensor], config: ModelConfig, path: str | Path, extra: dict | None = None) -> None:
    """Write magic, version, manifest length, JSON manifest, then raw little-endian tensors."""
    tensors = []
    blobs = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
        blobs.append(le.tobytes())
    manifest = {"config": config.to_dict(), "tensors": tensors, "extra": extra or {}}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for b in blobs:
            fh.write(b)


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    version, n = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 12 + n:
        raise TruncatedCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[12 : 12 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    return manifest, raw[12 + n :]


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    manifest, body = read_manifest(path)
    config = ModelConfig.from_dict(manifest["config"])
    expected = param_shapes(config)
    names = [t["name"] for t in manifest["tensors"]]
    if set(names) != set(expected):
        missing = sorted(set(expected) - set(names))
        unexpected = sorted(set(names) - set(expected))
        raise ShapeMismatchError(f"{path}: shape mismatch, manifest tensors differ from config (missing {missing}, unexpected {unexpected})")
    params = {}
    offset = 0
    for spec in manifest["tensors"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if shape != expected[name]:
            raise ShapeMismatchError(f"{path}: shape mismatch for tensor {name!r}: {shape} vs expected {expected[name]}")
        dtype = np.dtype(spec["dtype"]).newbyteorder("<")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(body):
            raise TruncatedCheckpointError(f"{path}: truncated data for tensor {name!r}")
        arr = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(dtype.newbyteorder("=")), requires_grad=True, name=name, dtype=arr.dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after tensor data")
    return params, config, manifest.get("extra", {})
