"""Conformer encoder stack with optional cross-layer parameter sharing.

Block structure (macaron): half-step FF, multi-head self-attention, depthwise
convolution module, half-step FF, final layer norm, residuals throughout.
Depth is chosen per call, the same shared parameter group being applied N
times when sharing is on. A traced forward keeps every per-layer embedding
for the diagnostics suite; shallow inference is just a prefix of the stack.

Checkpoint format (little-endian): magic "LCCK", u32 version=1, u32 config
byte length + utf-8 key=value lines, u64 tensor count, then per tensor u32
name length + name, u32 rank, u32 dims, f32 data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, FormatError
from .rng import substream

CHECKPOINT_MAGIC = b"LCCK"


@dataclass
class ConformerConfig:
    input_dim: int = 16
    model_dim: int = 16
    num_heads: int = 2
    ff_dim: int = 32
    conv_kernel: int = 7
    max_layers: int = 8
    min_layers: int = 2
    share_params: bool = True
    dropout: float = 0.1
    pos_bias: str = "relative-bias"  # "none" | "relative-bias"

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not (1 <= self.min_layers <= self.max_layers):
            raise ConfigError(f"need 1 <= min_layers <= max_layers, got {self.min_layers}, {self.max_layers}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pos_bias not in ("none", "relative-bias"):
            raise ConfigError(f"pos_bias must be 'none' or 'relative-bias', got {self.pos_bias!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ConformerConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type == "bool":
                kwargs[f.name] = raw in ("True", "true", "1")
            elif f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass
class LayerTrace:
    """Per-layer embeddings for one forward pass; entry 0 is the frontend output."""
    embeddings: list[np.ndarray]

    def __post_init__(self):
        shapes = {e.shape for e in self.embeddings}
        if len(shapes) > 1:
            raise ContractError(f"trace embeddings disagree on shape: {shapes}")

    @property
    def depth(self) -> int:
        return len(self.embeddings) - 1


# parameter names inside one layer group, in init order
_LAYER_SHAPES = (
    ("ff1.norm.gamma", "d"), ("ff1.norm.beta", "d"),
    ("ff1.w1", "d*ff"), ("ff1.b1", "ff"), ("ff1.w2", "ff*d"), ("ff1.b2", "d"),
    ("attn.norm.gamma", "d"), ("attn.norm.beta", "d"),
    # no key bias: it shifts every logit in a row equally, which softmax cancels
    ("attn.wq", "d*d"), ("attn.bq", "d"), ("attn.wk", "d*d"),
    ("attn.wv", "d*d"), ("attn.bv", "d"), ("attn.wo", "d*d"), ("attn.bo", "d"),
    ("conv.norm.gamma", "d"), ("conv.norm.beta", "d"),
    ("conv.pw1", "d*2d"), ("conv.pb1", "2d"), ("conv.dw", "k*d"),
    ("conv.pw2", "d*d"), ("conv.pb2", "d"),
    ("ff2.norm.gamma", "d"), ("ff2.norm.beta", "d"),
    ("ff2.w1", "d*ff"), ("ff2.b1", "ff"), ("ff2.w2", "ff*d"), ("ff2.b2", "d"),
    ("out.norm.gamma", "d"), ("out.norm.beta", "d"),
)


def _shape_of(spec: str, cfg: ConformerConfig) -> tuple[int, ...]:
    d, ff, k = cfg.model_dim, cfg.ff_dim, cfg.conv_kernel
    return {
        "d": (d,), "ff": (ff,), "2d": (2 * d,),
        "d*ff": (d, ff), "ff*d": (ff, d), "d*d": (d, d),
        "d*2d": (d, 2 * d), "k*d": (k, d),
    }[spec]


def _init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    if name.endswith("norm.gamma"):
        data = np.ones(shape)
    elif name.endswith(("norm.beta",)) or name.startswith("b") or ".b" in name or name.endswith(("pb1", "pb2")):
        data = np.zeros(shape)
    else:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, name=name)


class ParameterStore:
    """All trainable tensors, keyed by name.

    Shared mode keeps exactly one layer group under the "layer.shared." prefix
    and aliases it for every application; unshared mode keeps max_layers
    independent groups "layer.<i>.".
    """

    def __init__(self, config: ConformerConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.block_applications = 0  # op counter for compute assertions

    @classmethod
    def init(cls, config: ConformerConfig, rng: np.random.Generator) -> "ParameterStore":
        params: dict[str, Tensor] = {}
        d, D = config.model_dim, config.input_dim
        params["frontend.w"] = _init_tensor("frontend.w", (D, d), rng)
        params["frontend.b"] = Tensor(np.zeros(d), requires_grad=True, name="frontend.b")
        prefixes = ["layer.shared."] if config.share_params else [
            f"layer.{i}." for i in range(config.max_layers)
        ]
        for prefix in prefixes:
            for name, spec in _LAYER_SHAPES:
                full = prefix + name
                params[full] = _init_tensor(name, _shape_of(spec, config), rng)
                params[full].name = full
        params["predictor.w"] = _init_tensor("predictor.w", (d, D), rng)
        params["predictor.b"] = Tensor(np.zeros(D), requires_grad=True, name="predictor.b")
        return cls(config, params)

    def layer_group(self, i: int) -> dict[str, Tensor]:
        prefix = "layer.shared." if self.config.share_params else f"layer.{i}."
        return {name: self.params[prefix + name] for name, _ in _LAYER_SHAPES}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def zero_grad(self) -> None:
        for _, p in self.params.items():
            p.grad = None


# ---- block -------------------------------------------------------------------

_pos_bias_cache: dict[tuple[int, int, str], np.ndarray] = {}


def relative_position_bias(T: int, head_dim: int, dtype) -> np.ndarray:
    """Fixed sinusoidal bias over relative frame offsets, added to attn logits."""
    key = (T, head_dim, np.dtype(dtype).str)
    if key not in _pos_bias_cache:
        delta = np.arange(T)[:, None] - np.arange(T)[None, :]
        freqs = 1.0 / (10000.0 ** (2 * np.arange(head_dim // 2) / head_dim))
        bias = np.sin(delta[..., None] * freqs).mean(axis=-1) / np.sqrt(head_dim)
        _pos_bias_cache[key] = bias.astype(dtype)
    return _pos_bias_cache[key]


def _feed_forward(x: Tensor, g: dict[str, Tensor], which: str) -> Tensor:
    h = ad.layer_norm(x, g[f"{which}.norm.gamma"], g[f"{which}.norm.beta"])
    h = ad.swish(h @ g[f"{which}.w1"] + g[f"{which}.b1"])
    return h @ g[f"{which}.w2"] + g[f"{which}.b2"]


def _attention(x: Tensor, g: dict[str, Tensor], cfg: ConformerConfig,
               train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    T = x.shape[0]
    h, dh = cfg.num_heads, cfg.head_dim
    n = ad.layer_norm(x, g["attn.norm.gamma"], g["attn.norm.beta"])

    def heads(t: Tensor) -> Tensor:  # (T, d) -> (h, T, dh)
        return t.reshape(T, h, dh).transpose((1, 0, 2))

    q = heads(n @ g["attn.wq"] + g["attn.bq"])
    k = heads(n @ g["attn.wk"])
    v = heads(n @ g["attn.wv"] + g["attn.bv"])
    logits = ad.matmul(q, k.transpose((0, 2, 1))) * (1.0 / np.sqrt(dh))
    if cfg.pos_bias == "relative-bias":
        logits = logits + Tensor(relative_position_bias(T, dh, x.data.dtype))
    weights = ad.softmax(logits, axis=-1)
    if train_mode and cfg.dropout > 0.0:
        if rng is None:
            raise ContractError("train_mode attention needs an rng for dropout")
        weights = ad.dropout(weights, cfg.dropout, rng)
    ctx = ad.matmul(weights, v).transpose((1, 0, 2)).reshape(T, cfg.model_dim)
    return ctx @ g["attn.wo"] + g["attn.bo"]


def _conv_module(x: Tensor, g: dict[str, Tensor]) -> Tensor:
    d = x.shape[1]
    h = ad.layer_norm(x, g["conv.norm.gamma"], g["conv.norm.beta"])
    h = h @ g["conv.pw1"] + g["conv.pb1"]
    h = h[:, :d] * ad.sigmoid(h[:, d:])  # GLU
    h = ad.depthwise_conv1d(h, g["conv.dw"])
    h = ad.swish(h)
    return h @ g["conv.pw2"] + g["conv.pb2"]


def conformer_block(x: Tensor, group: dict[str, Tensor], cfg: ConformerConfig,
                    train_mode: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != cfg.model_dim:
        raise ContractError(f"block input must be T x {cfg.model_dim}, got {x.shape}")
    h = x + 0.5 * _feed_forward(x, group, "ff1")
    h = h + _attention(h, group, cfg, train_mode, rng)
    h = h + _conv_module(h, group)
    h = h + 0.5 * _feed_forward(h, group, "ff2")
    return ad.layer_norm(h, group["out.norm.gamma"], group["out.norm.beta"])


# ---- stack -------------------------------------------------------------------


def forward(x: Tensor | np.ndarray, store: ParameterStore, n_layers: int,
            collect_trace: bool = False, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, LayerTrace | None]:
    cfg = store.config
    if not (0 <= n_layers <= cfg.max_layers):
        raise ContractError(f"n_layers {n_layers} outside [0, {cfg.max_layers}]")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ContractError(f"input must be T x {cfg.input_dim}, got {x.shape}")
    h = x @ store.params["frontend.w"] + store.params["frontend.b"]
    trace = [h.data.copy()] if collect_trace else None
    for i in range(n_layers):
        store.block_applications += 1
        h = conformer_block(h, store.layer_group(i), cfg, train_mode, rng)
        if collect_trace:
            trace.append(h.data.copy())
    return h, (LayerTrace(trace) if collect_trace else None)


def sample_depth(low: int, high: int, rng: np.random.Generator) -> int:
    """Integer depth drawn uniformly from {low, ..., high} inclusive."""
    if not (1 <= low <= high):
        raise ConfigError(f"need 1 <= low <= high, got ({low}, {high})")
    return int(rng.integers(low, high + 1))


def sli_forward(x: Tensor | np.ndarray, store: ParameterStore, m: int) -> Tensor:
    """Inference with only the first m layers; no dropout, no masking required."""
    if not (1 <= m <= store.config.max_layers):
        raise ContractError(f"SLI layer count {m} outside [1, {store.config.max_layers}]")
    emb, _ = forward(x, store, m, collect_trace=False, train_mode=False)
    return emb


def param_count(cfg: ConformerConfig) -> dict[str, int]:
    d, D, ff, k, H = cfg.model_dim, cfg.input_dim, cfg.ff_dim, cfg.conv_kernel, cfg.max_layers
    per_layer = sum(int(np.prod(_shape_of(spec, cfg))) for _, spec in _LAYER_SHAPES)
    frontend = D * d + d
    predictor = d * D + D
    groups = 1 if cfg.share_params else H
    return {
        "frontend": frontend,
        "per_layer": per_layer,
        "total_encoder": per_layer * groups + frontend,
        "predictor": predictor,
    }


# ---- checkpoint I/O ----------------------------------------------------------


def save_checkpoint(path, store: ParameterStore, extra_config: dict[str, str] | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    cfg_lines = dict(store.config.to_dict())
    cfg_lines.update(extra_config or {})
    cfg_blob = "".join(f"{k}={v}\n" for k, v in sorted(cfg_lines.items())).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in store.named_parameters()]
    tensors += sorted((extra_tensors or {}).items())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", 1, len(cfg_blob)), cfg_blob,
             struct.pack("<Q", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated checkpoint reading {what}", offset=off)
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, cfg_len = struct.unpack("<II", take(8, "header"))
    if version != 1:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    config: dict[str, str] = {}
    for line in take(cfg_len, "config block").decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    (count,) = struct.unpack("<Q", take(8, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, "tensor data"), dtype="<f4").reshape(dims)
        tensors[name] = arr.copy()
    return config, tensors


def store_from_checkpoint(config: dict[str, str], tensors: dict[str, np.ndarray]) -> ParameterStore:
    cfg = ConformerConfig.from_dict(config)
    params: dict[str, Tensor] = {}
    for name, arr in tensors.items():
        if name.startswith(("frontend.", "layer.", "predictor.")):
            params[name] = Tensor(arr, requires_grad=True, name=name)
    store = ParameterStore(cfg, params)
    store.layer_group(0)  # raises KeyError early if the checkpoint is incomplete
    return store
