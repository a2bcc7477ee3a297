"""Separable transformer (vertical/horizontal axis attention), ViT baseline and
a closed-form parameter counter.

Spectrograms are ``[freq_bins, time_slots]`` matrices.  With patch size ``p``
there are ``k = freq_bins / p`` frequency tokens and ``n = time_slots / p``
time tokens, and the token grid is stored as ``(batch, n, k, d)``.  A vertical
pass attends over the ``k`` tokens of each time slot; a horizontal pass attends
over the ``n`` tokens of each frequency bin.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .formats import load_checkpoint, save_checkpoint
from .tensor import Tensor

VARIANTS = ("VH", "HV", "V", "H", "ViT")
VERTICAL = "vertical"
HORIZONTAL = "horizontal"

_ORDER = {
    "VH": (VERTICAL, HORIZONTAL),
    "HV": (HORIZONTAL, VERTICAL),
    "V": (VERTICAL, VERTICAL),
    "H": (HORIZONTAL, HORIZONTAL),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``depth`` is the number of separable blocks for SepTr variants (two axis
    passes each) and the number of standard blocks for ViT.
    """

    variant: str = "VH"
    depth: int = 3
    dim: int = 256
    heads: int = 5
    patch_size: int = 1
    mlp_ratio: int = 4
    num_classes: int = 6
    freq_bins: int = 128
    time_slots: int = 128
    vit_patch: int = 8
    vit_stride: int = 2
    init_std: float = 0.02
    norm_eps: float = 1e-5
    precision: str = "float64"  # compute dtype; float32 roughly halves training time

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.heads < 1 or self.dim < self.heads:
            raise ConfigError(f"need 1 <= heads <= dim, got heads={self.heads}, dim={self.dim}")
        if self.mlp_ratio < 1 or self.num_classes < 1:
            raise ConfigError("mlp_ratio and num_classes must be positive")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.freq_bins < 1 or self.time_slots < 1:
            raise ConfigError("input grid must be nonempty")
        if self.is_vit:
            if self.vit_patch < 1 or self.vit_stride < 1:
                raise ConfigError("vit_patch and vit_stride must be >= 1")
        elif self.freq_bins % self.patch_size or self.time_slots % self.patch_size:
            raise ConfigError(
                f"grid {self.freq_bins}x{self.time_slots} is not divisible by patch size {self.patch_size}"
            )

    @property
    def is_vit(self) -> bool:
        return self.variant == "ViT"

    @property
    def head_dim(self) -> int:
        return math.ceil(self.dim / self.heads)

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def freq_tokens(self) -> int:
        return self.freq_bins // self.patch_size

    @property
    def time_tokens(self) -> int:
        return self.time_slots // self.patch_size

    @property
    def vit_grid(self) -> tuple[int, int]:
        if self.freq_bins < self.vit_patch or self.time_slots < self.vit_patch:
            raise ShapeError(f"grid {self.freq_bins}x{self.time_slots} is smaller than one {self.vit_patch}x{self.vit_patch} patch")
        return (
            (self.freq_bins - self.vit_patch) // self.vit_stride + 1,
            (self.time_slots - self.vit_patch) // self.vit_stride + 1,
        )

    def axis_sequence(self) -> list[str]:
        """Axis of every attention pass in order (length 2 * depth)."""
        if self.is_vit:
            raise ConfigError("ViT has no axis passes")
        return list(_ORDER[self.variant]) * self.depth

    def axis_length(self, axis: str) -> int:
        return self.freq_tokens if axis == VERTICAL else self.time_tokens

    def attention_layers(self) -> int:
        return self.depth if self.is_vit else 2 * self.depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> bytes:
        """Architecture fingerprint; compute precision does not change the weights' layout."""
        arch = {k: v for k, v in self.to_dict().items() if k != "precision"}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **changes})


# ---------------------------------------------------------------------------
# Parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, inner, hidden = cfg.dim, cfg.inner_dim, cfg.mlp_ratio * cfg.dim
    return {
        "norm1.gamma": (d,),
        "norm1.beta": (d,),
        "attn.wq": (d, inner),
        "attn.wk": (d, inner),
        "attn.wv": (d, inner),
        "attn.wo": (inner, d),
        "attn.bo": (d,),
        "norm2.gamma": (d,),
        "norm2.beta": (d,),
        "mlp.w1": (d, hidden),
        "mlp.b1": (hidden,),
        "mlp.w2": (hidden, d),
        "mlp.b2": (d,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    d = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.is_vit:
        gh, gw = cfg.vit_grid
        shapes["patch.weight"] = (cfg.vit_patch**2, d)
        shapes["patch.bias"] = (d,)
        shapes["cls"] = (d,)
        shapes["pos"] = (gh * gw + 1, d)
        for i in range(cfg.depth):
            for name, shape in _block_shapes(cfg).items():
                shapes[f"layers.{i}.{name}"] = shape
    else:
        shapes["patch.weight"] = (cfg.patch_size**2, d)
        shapes["patch.bias"] = (d,)
        shapes["cls"] = (d,)
        for i, axis in enumerate(cfg.axis_sequence()):
            shapes[f"layers.{i}.pos"] = (cfg.axis_length(axis) + 1, d)
            for name, shape in _block_shapes(cfg).items():
                shapes[f"layers.{i}.{name}"] = shape
    shapes["head.w1"] = (d, d)
    shapes["head.b1"] = (d,)
    shapes["head.w2"] = (d, cfg.num_classes)
    shapes["head.b2"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf in ("beta", "bias", "bo", "b1", "b2"):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, cfg.init_std)
        params[name] = Tensor(data, requires_grad=True)
    return params


def block_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# Building blocks


def multi_head_attention(x: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated then projected.

    ``x`` has shape ``(..., m, d)``.
    """
    lead = x.shape[:-2]
    m = x.shape[-2]
    inner = p["attn.wq"].shape[1]
    dh = inner // heads

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, (-1, m, heads, dh))
        return T.permute(t, (0, 2, 1, 3))

    q = split(x @ p["attn.wq"])
    k = split(x @ p["attn.wk"])
    v = split(x @ p["attn.wv"])
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(dh))
    z = T.softmax_rows(scores) @ v
    z = T.reshape(T.permute(z, (0, 2, 1, 3)), (*lead, m, inner))
    return z @ p["attn.wo"] + p["attn.bo"]


def mlp(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return T.gelu(x @ p["mlp.w1"] + p["mlp.b1"]) @ p["mlp.w2"] + p["mlp.b2"]


def transformer_block(x: Tensor, p: dict[str, Tensor], heads: int, eps: float = 1e-5) -> Tensor:
    """Pre-norm residual block: P = f(norm(X)) + X, R = g(norm(P)) + P."""
    h = multi_head_attention(T.layer_norm(x, p["norm1.gamma"], p["norm1.beta"], eps), p, heads) + x
    return mlp(T.layer_norm(h, p["norm2.gamma"], p["norm2.beta"], eps), p) + h


def mlp_head(cls: Tensor, params: dict[str, Tensor]) -> Tensor:
    hidden = T.gelu(cls @ params["head.w1"] + params["head.b1"])
    return hidden @ params["head.w2"] + params["head.b2"]


# ---------------------------------------------------------------------------
# Token grid and axis passes


@dataclass
class TokenTensor:
    """Token grid ``values`` of shape ``(batch, n, k, d)`` plus class-token state.

    ``cls`` is ``(batch, d)`` when pooled and ``(batch, copies, d)`` when
    replicated (one copy per sample of the last axis pass).
    """

    values: Tensor
    cls: Tensor
    replicated: bool = False

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


def _as_batch(specs) -> tuple[np.ndarray, bool]:
    arr = specs.values if hasattr(specs, "values") and not isinstance(specs, np.ndarray) else specs
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise ShapeError(f"expected [freq, time] or [batch, freq, time] input, got shape {arr.shape}")
    return arr, False


def extract_patches(x: np.ndarray, p: int) -> np.ndarray:
    """Non-overlapping p x p patches of ``(B, F, T)`` as ``(B, n, k, p*p)``."""
    b, f, t = x.shape
    if f % p or t % p:
        raise ShapeError(f"grid {f}x{t} is not divisible by patch size {p}")
    k, n = f // p, t // p
    return x.reshape(b, k, p, n, p).transpose(0, 3, 1, 2, 4).reshape(b, n, k, p * p)


def tokenize_project(specs, params: dict[str, Tensor], cfg: ModelConfig) -> TokenTensor:
    x, _ = _as_batch(specs)
    if x.shape[1:] != (cfg.freq_bins, cfg.time_slots):
        raise ShapeError(f"input grid {x.shape[1:]} does not match configured {(cfg.freq_bins, cfg.time_slots)}")
    patches = Tensor(extract_patches(x, cfg.patch_size))
    values = patches @ params["patch.weight"] + params["patch.bias"]
    cls = T.broadcast_to(T.reshape(params["cls"], (1, cfg.dim)), (x.shape[0], cfg.dim))
    return TokenTensor(values, cls, replicated=False)


def axis_pass(tokens: TokenTensor, p: dict[str, Tensor], axis: str, heads: int, eps: float = 1e-5) -> TokenTensor:
    """One vertical or horizontal transformer over every sample of the axis.

    The pooled class token is replicated once per sample and prepended; the
    positional table (class slot first) is added before the block.
    """
    if tokens.replicated:
        raise ContractError("class tokens are replicated; pool them before the next axis pass")
    b, n, k, d = tokens.values.shape
    if axis == VERTICAL:
        samples, m = n, k
        seq = T.reshape(tokens.values, (b * n, k, d))
    elif axis == HORIZONTAL:
        samples, m = k, n
        seq = T.reshape(T.permute(tokens.values, (0, 2, 1, 3)), (b * k, n, d))
    else:
        raise ValueError(f"unknown axis {axis!r}")
    if p["pos"].shape[0] != m + 1:
        raise ShapeError(f"positional table covers {p['pos'].shape[0] - 1} positions, axis has {m}")
    cls = T.broadcast_to(T.reshape(tokens.cls, (b, 1, 1, d)), (b, samples, 1, d))
    x = T.concat([T.reshape(cls, (b * samples, 1, d)), seq], axis=1) + p["pos"]
    y = transformer_block(x, p, heads, eps)
    cls_out = T.reshape(y[:, 0, :], (b, samples, d))
    body = T.reshape(y[:, 1:, :], (b, samples, m, d))
    if axis == HORIZONTAL:
        body = T.permute(body, (0, 2, 1, 3))
    return TokenTensor(body, cls_out, replicated=True)


def pool_class_tokens(tokens: TokenTensor) -> TokenTensor:
    if not tokens.replicated:
        raise ContractError("class token is already pooled")
    return TokenTensor(tokens.values, T.mean_axis(tokens.cls, 1), replicated=False)


def septr_forward(specs, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Logits ``(batch, classes)``, or ``(classes,)`` for a single spectrogram."""
    _, single = _as_batch(specs)
    tokens = tokenize_project(specs, params, cfg)
    for i, axis in enumerate(cfg.axis_sequence()):
        tokens = axis_pass(tokens, block_params(params, f"layers.{i}."), axis, cfg.heads, cfg.norm_eps)
        tokens = pool_class_tokens(tokens)
    logits = mlp_head(tokens.cls, params)
    return T.reshape(logits, (cfg.num_classes,)) if single else logits


def extract_overlapping_patches(x: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """``(B, F, T)`` -> ``(B, gh * gw, patch * patch)`` sliding patches."""
    b, f, t = x.shape
    if f < patch or t < patch:
        raise ShapeError(f"grid {f}x{t} is smaller than one {patch}x{patch} patch")
    win = sliding_window_view(x, (patch, patch), axis=(1, 2))[:, ::stride, ::stride]
    gh, gw = win.shape[1], win.shape[2]
    return win.reshape(b, gh * gw, patch * patch)


def vit_forward(specs, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    x, single = _as_batch(specs)
    if x.shape[1:] != (cfg.freq_bins, cfg.time_slots):
        raise ShapeError(f"input grid {x.shape[1:]} does not match configured {(cfg.freq_bins, cfg.time_slots)}")
    b, d = x.shape[0], cfg.dim
    patches = Tensor(extract_overlapping_patches(x, cfg.vit_patch, cfg.vit_stride))
    tokens = patches @ params["patch.weight"] + params["patch.bias"]
    cls = T.broadcast_to(T.reshape(params["cls"], (1, 1, d)), (b, 1, d))
    h = T.concat([cls, tokens], axis=1) + params["pos"]
    for i in range(cfg.depth):
        h = transformer_block(h, block_params(params, f"layers.{i}."), cfg.heads, cfg.norm_eps)
    logits = mlp_head(h[:, 0, :], params)
    return T.reshape(logits, (cfg.num_classes,)) if single else logits


def forward(specs, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    return vit_forward(specs, params, cfg) if cfg.is_vit else septr_forward(specs, params, cfg)


# ---------------------------------------------------------------------------
# Model wrapper


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default=None)  # type: ignore[assignment]
    seed: int = 0

    def __post_init__(self):
        if self.params is None:
            with T.precision(self.config.precision):
                self.params = init_params(self.config, self.seed)
        expected = parameter_shapes(self.config)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ConfigError("parameter set does not match the model configuration")

    def __call__(self, specs) -> Tensor:
        with T.precision(self.config.precision):
            return forward(specs, self.params, self.config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if {k: v.shape for k, v in state.items()} != parameter_shapes(self.config):
            raise ConfigError("state does not match the model configuration")
        with T.precision(self.config.precision):
            self.params = {k: Tensor(np.array(state[k]), requires_grad=True) for k in parameter_shapes(self.config)}

    def logits(self, specs, batch_size: int = 64) -> np.ndarray:
        x, single = _as_batch(specs)
        out = []
        with T.no_grad(), T.precision(self.config.precision):
            for i in range(0, x.shape[0], batch_size):
                out.append(forward(x[i : i + batch_size], self.params, self.config).data)
        res = np.concatenate(out, axis=0)
        return res[0] if single else res

    def predict(self, specs, batch_size: int = 64) -> np.ndarray:
        return self.logits(specs, batch_size).argmax(axis=-1)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.state_dict(), self.config.digest())

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig) -> "Model":
        _, state = load_checkpoint(path, expected_digest=config.digest())
        model = cls(config)
        model.load_state_dict(state)
        return model


# ---------------------------------------------------------------------------
# Parameter analysis


def _block_count(cfg: ModelConfig) -> int:
    d, inner, hidden = cfg.dim, cfg.inner_dim, cfg.mlp_ratio * cfg.dim
    attention = 3 * d * inner + inner * d + d
    mlp_ = d * hidden + hidden + hidden * d + d
    norms = 4 * d
    return attention + mlp_ + norms


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts by group."""
    d = cfg.dim
    head = d * d + d + d * cfg.num_classes + cfg.num_classes
    if cfg.is_vit:
        gh, gw = cfg.vit_grid
        return {
            "patch": cfg.vit_patch**2 * d + d,
            "cls": d,
            "positional": (gh * gw + 1) * d,
            "blocks": cfg.depth * _block_count(cfg),
            "head": head,
        }
    pos = sum((cfg.axis_length(a) + 1) * d for a in cfg.axis_sequence())
    return {
        "patch": cfg.patch_size**2 * d + d,
        "cls": d,
        "positional": pos,
        "blocks": 2 * cfg.depth * _block_count(cfg),
        "head": head,
    }


def param_count(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


def size_dependent_count(cfg: ModelConfig) -> int:
    """Parameters that scale with the input grid (positional rows, class slot excluded)."""
    d = cfg.dim
    if cfg.is_vit:
        gh, gw = cfg.vit_grid
        return gh * gw * d
    return sum(cfg.axis_length(a) * d for a in cfg.axis_sequence())


def param_census(params: dict[str, Tensor | np.ndarray]) -> int:
    return int(sum(np.asarray(getattr(p, "data", p)).size for p in params.values()))


@dataclass(frozen=True)
class ScanRow:
    size: int
    septr_count: int
    vit_count: int

    @property
    def ratio(self) -> float:
        return self.vit_count / self.septr_count


def param_scan(septr_cfg: ModelConfig, vit_cfg: ModelConfig, sizes) -> list[ScanRow]:
    """Parameter counts of both models on square ``size x size`` inputs."""
    rows = []
    for s in sizes:
        a = septr_cfg.replace(freq_bins=s, time_slots=s)
        b = vit_cfg.replace(freq_bins=s, time_slots=s)
        rows.append(ScanRow(int(s), param_count(a), param_count(b)))
    return rows


def growth_exponent(xs, ys) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def paper_septr_config(**overrides) -> ModelConfig:
    base = dict(variant="VH", depth=3, dim=256, heads=5, patch_size=1, mlp_ratio=4)
    base.update(overrides)
    return ModelConfig(**base)


def paper_vit_config(**overrides) -> ModelConfig:
    base = dict(variant="ViT", depth=6, dim=256, heads=5, vit_patch=8, vit_stride=2, mlp_ratio=4)
    base.update(overrides)
    return ModelConfig(**base)
