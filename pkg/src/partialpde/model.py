"""Latent autoregressive neural operator for partially observed fields.

The network embeds coordinates plus a history of (masked) frames into
per-point features, then applies a stack of latent operator layers.  Each
layer aggregates observed points into a small set of latent tokens through
masked softmax attention maps, propagates the attention maps (and the
observation mask) one partial-convolution step outward, mixes the tokens,
and de-aggregates back to the grid.  Points the mask has not yet reached
decode to zero; the observed set grows monotonically with depth.

A dense kernel oracle materializes each layer's aggregation/de-aggregation
as an explicit low-rank kernel integral for verification.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"POBW"
CHECKPOINT_VERSION = 1

VARIANT_REUSE = "reuse"      # decode with the propagated encoder maps
VARIANT_RECALC = "recalc"    # decode with maps recomputed from coordinates
MIXERS = ("attention", "mlp", "none")

# test hook: added to the decode-map row sums to fault the normalization
_decode_norm_corruption = 0.0


def set_decode_norm_corruption(value: float) -> None:
    global _decode_norm_corruption
    _decode_norm_corruption = float(value)


class DegenerateMaskError(ValueError):
    pass


class OracleSizeError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 8
    channels: int = 64
    heads: int = 8
    latent_tokens: int = 32
    temperature: float = 0.5
    eps: float = 1e-6
    pconv_kernel: int = 3
    history: int = 10
    phys_channels: int = 1
    mlp_ratio: float = 2.0
    variant: str = VARIANT_REUSE
    token_mixer: str = "attention"
    boundary_first: bool = True

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(
                f"channels {self.channels} not divisible by heads {self.heads}")
        if self.layers < 1 or self.latent_tokens < 1:
            raise ValueError("layers and latent_tokens must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.variant not in (VARIANT_REUSE, VARIANT_RECALC):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.token_mixer not in MIXERS:
            raise ValueError(f"unknown token_mixer {self.token_mixer!r}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def embed_width(self) -> int:
        return 2 + self.history * self.phys_channels

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.channels * self.mlp_ratio)))


@dataclass
class LatentState:
    """Per-layer snapshot: masked attention maps, tokens, current mask."""
    s: np.ndarray        # (B, H, N, L) after masking
    z: np.ndarray        # (B, H, L, C_h)
    mask: np.ndarray     # (B, N) mask seen by the *next* layer
    layer: int


def _param_specs(cfg: ModelConfig):
    """(name, shape, init) triples in checkpoint declaration order."""
    c, h, ch, l, k = (cfg.channels, cfg.heads, cfg.head_dim,
                      cfg.latent_tokens, cfg.pconv_kernel)
    specs = [("embed.w", (cfg.embed_width, c), ("fanin", cfg.embed_width)),
             ("embed.b", (c,), ("fanin", cfg.embed_width))]
    for i in range(cfg.layers):
        p = f"L{i}."
        specs += [
            (p + "ln1_g", (c,), ("ones",)),
            (p + "ln1_b", (c,), ("zeros",)),
            (p + "slice_w1", (h, ch, ch), ("fanin", ch)),
            (p + "slice_b1", (h, 1, ch), ("fanin", ch)),
            (p + "slice_w2", (h, ch, l), ("fanin", ch)),
            (p + "slice_b2", (h, 1, l), ("fanin", ch)),
        ]
        if cfg.boundary_first:
            specs += [
                (p + "pconv_w", (h * l, k, k), ("pconv_avg",)),
                (p + "pconv_b", (h * l,), ("zeros",)),
            ]
        if cfg.token_mixer == "attention":
            specs += [(p + n, (h, ch, ch), ("fanin", ch))
                      for n in ("mix_wq", "mix_wk", "mix_wv")]
        elif cfg.token_mixer == "mlp":
            specs += [
                (p + "mix_w1", (l, l), ("fanin", l)),
                (p + "mix_b1", (l,), ("fanin", l)),
                (p + "mix_w2", (l, l), ("fanin", l)),
                (p + "mix_b2", (l,), ("fanin", l)),
            ]
        if cfg.variant == VARIANT_RECALC:
            specs += [
                (p + "pos_w1", (h, 2, ch), ("fanin", 2)),
                (p + "pos_b1", (h, 1, ch), ("fanin", 2)),
                (p + "pos_w2", (h, ch, l), ("fanin", ch)),
                (p + "pos_b2", (h, 1, l), ("fanin", ch)),
            ]
        specs += [
            (p + "merge_w", (c, c), ("zeros",)),   # zero init: layer starts as identity
            (p + "merge_b", (c,), ("zeros",)),
            (p + "ln2_g", (c,), ("ones",)),
            (p + "ln2_b", (c,), ("zeros",)),
            (p + "mlp_w1", (c, cfg.mlp_hidden), ("fanin", c)),
            (p + "mlp_b1", (cfg.mlp_hidden,), ("fanin", c)),
            (p + "mlp_w2", (cfg.mlp_hidden, c), ("fanin", cfg.mlp_hidden)),
            (p + "mlp_b2", (c,), ("fanin", cfg.mlp_hidden)),
        ]
    specs += [("out.w", (c, cfg.phys_channels), ("fanin", c)),
              ("out.b", (cfg.phys_channels,), ("fanin", c))]
    return specs


class ModelParams:
    """All learnable weights, keyed by name, in declaration order."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        dtype = dtype or T.default_dtype()
        rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        k = config.pconv_kernel
        for name, shape, init in _param_specs(config):
            if init[0] == "zeros":
                arr = np.zeros(shape)
            elif init[0] == "ones":
                arr = np.ones(shape)
            elif init[0] == "pconv_avg":
                arr = np.full(shape, 1.0 / (k * k))
            else:
                bound = 1.0 / np.sqrt(init[1])
                arr = rng.uniform(-bound, bound, size=shape)
            self._params[name] = Tensor(arr.astype(dtype), requires_grad=True,
                                        dtype=dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def astype(self, dtype) -> "ModelParams":
        clone = ModelParams.__new__(ModelParams)
        clone.config = self.config
        clone._params = {
            name: Tensor(t.data.astype(dtype), requires_grad=True, dtype=dtype)
            for name, t in self._params.items()
        }
        return clone


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(config))


# -- forward pieces ----------------------------------------------------------

def temporal_aggregate(coords: np.ndarray, frames: np.ndarray,
                       params: ModelParams) -> Tensor:
    """Embed concatenated coordinates and T frames per point: (B, N, C).

    frames: (B, T, H, W, C_phys), already masked; coords: (N, 2) or (H, W, 2).
    """
    cfg = params.config
    b, t = frames.shape[0], frames.shape[1]
    if t != cfg.history:
        raise ValueError(f"got {t} history frames, config expects {cfg.history}")
    if frames.shape[4] != cfg.phys_channels:
        raise ValueError(f"got {frames.shape[4]} physical channels, "
                         f"config expects {cfg.phys_channels}")
    n = frames.shape[2] * frames.shape[3]
    coords = coords.reshape(n, 2)
    vals = np.ascontiguousarray(frames.transpose(0, 2, 3, 1, 4)).reshape(
        b, n, t * frames.shape[4])
    dtype = params["embed.w"].dtype
    x_in = np.concatenate(
        [np.broadcast_to(coords, (b, n, 2)), vals], axis=-1).astype(dtype)
    return T.matmul(Tensor(x_in, dtype=dtype), params["embed.w"]) + params["embed.b"]


def _split_heads(y: Tensor, cfg: ModelConfig) -> Tensor:
    b, n, _ = y.shape
    return T.transpose(T.reshape(y, (b, n, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))


def _merge_heads(yh: Tensor, cfg: ModelConfig) -> Tensor:
    b = yh.shape[0]
    n = yh.shape[2]
    return T.reshape(T.transpose(yh, (0, 2, 1, 3)), (b, n, cfg.channels))


def phca_encode(yh: Tensor, mask: np.ndarray, params: ModelParams, layer: int):
    """Aggregate observed per-point features into latent tokens.

    yh: (B, H, N, C_h); mask: (B, N).  Returns (S, Z) with S masked so rows
    at unobserved points are exactly zero, and Z the S-weighted average of
    observed features (per-token column normalization, plus eps).
    """
    cfg = params.config
    if np.any(mask.sum(axis=-1) == 0):
        raise DegenerateMaskError("a sample has no observed points to aggregate")
    p = f"L{layer}."
    hidden = T.gelu(T.matmul(yh, params[p + "slice_w1"]) + params[p + "slice_b1"])
    logits = T.matmul(hidden, params[p + "slice_w2"]) + params[p + "slice_b2"]
    s = T.softmax(logits * (1.0 / cfg.temperature), axis=-1)
    mask_b = mask.astype(s.dtype)[:, None, :, None]
    s = s * mask_b
    denom = s.sum(axis=2, keepdims=True) + cfg.eps           # (B, H, 1, L)
    z = T.matmul(T.transpose(s, (0, 1, 3, 2)), yh) / T.transpose(denom, (0, 1, 3, 2))
    return s, z


def _window_counts(mask_grid: np.ndarray, k: int) -> np.ndarray:
    """Count observed cells in each kxk window (zero-padded)."""
    pad = k // 2
    mp = np.pad(mask_grid, [(0, 0)] * (mask_grid.ndim - 2) + [(pad, pad)] * 2)
    win = np.lib.stride_tricks.sliding_window_view(mp, (k, k), axis=(-2, -1))
    return win.sum(axis=(-2, -1))


def _window_sizes(gh: int, gw: int, k: int) -> np.ndarray:
    """In-bounds window size per cell (k*k in the interior, smaller at edges)."""
    return _window_counts(np.ones((gh, gw)), k)


def pconv_propagate(s: Tensor, mask: np.ndarray, params: ModelParams, layer: int,
                    gh: int, gw: int):
    """Partial convolution over the attention maps plus mask dilation.

    s: (B, H, N, L) with rows at unobserved points already zero.  Per output
    cell, if its window holds >= 1 observed cell the response is renormalized
    by (in-bounds window size / observed count) and biased; otherwise it is
    exactly zero.  Returns (s_next (B,H,N,L), mask_next (B,N)).
    """
    cfg = params.config
    b = s.shape[0]
    k = cfg.pconv_kernel
    hl = cfg.heads * cfg.latent_tokens
    grid = T.reshape(T.transpose(s, (0, 1, 3, 2)), (b, hl, gh, gw))
    num = T.depthwise_conv2d(grid, params[f"L{layer}.pconv_w"], padding=k // 2)

    mask_grid = mask.reshape(b, gh, gw)
    counts = _window_counts(mask_grid, k)                      # (B, gh, gw)
    observed = counts > 0
    sizes = _window_sizes(gh, gw, k)
    factor = np.where(observed, sizes / np.where(observed, counts, 1.0), 0.0)
    factor = factor[:, None].astype(num.dtype)                 # (B, 1, gh, gw)
    obs_b = observed[:, None].astype(num.dtype)

    bias = T.reshape(params[f"L{layer}.pconv_b"], (hl, 1, 1))
    out = num * Tensor(factor, dtype=num.dtype) + bias * Tensor(obs_b, dtype=num.dtype)
    s_next = T.transpose(T.reshape(out, (b, cfg.heads, cfg.latent_tokens, gh * gw)),
                         (0, 1, 3, 2))
    mask_next = observed.reshape(b, gh * gw).astype(mask.dtype)
    return s_next, mask_next


def propagate_mask_grid(mask_grid: np.ndarray, k: int, steps: int) -> np.ndarray:
    """Pure mask-update rule iterated `steps` times (no feature math)."""
    m = np.asarray(mask_grid)
    for _ in range(steps):
        m = (_window_counts(m, k) > 0).astype(m.dtype)
    return m


def token_mix(z: Tensor, params: ModelParams, layer: int) -> Tensor:
    """Mix latent tokens: per-head self-attention, a shared token MLP, or identity."""
    cfg = params.config
    p = f"L{layer}."
    if cfg.token_mixer == "none":
        return z
    if cfg.token_mixer == "attention":
        q = T.matmul(z, params[p + "mix_wq"])
        key = T.matmul(z, params[p + "mix_wk"])
        v = T.matmul(z, params[p + "mix_wv"])
        attn = T.softmax(T.matmul(q, T.transpose(key, (0, 1, 3, 2)))
                         * (1.0 / np.sqrt(cfg.head_dim)), axis=-1)
        return T.matmul(attn, v)
    # mlp: two-layer map along the token axis, shared across heads
    zt = T.transpose(z, (0, 1, 3, 2))                          # (B, H, C_h, L)
    h1 = T.gelu(T.matmul(zt, params[p + "mix_w1"]) + params[p + "mix_b1"])
    out = T.matmul(h1, params[p + "mix_w2"]) + params[p + "mix_b2"]
    return T.transpose(out, (0, 1, 3, 2))


def _recalc_decode_map(coords: np.ndarray, params: ModelParams, layer: int) -> Tensor:
    cfg = params.config
    p = f"L{layer}."
    n = coords.reshape(-1, 2).shape[0]
    dtype = params[p + "pos_w1"].dtype
    c = Tensor(np.broadcast_to(coords.reshape(n, 2),
                               (cfg.heads, n, 2)).astype(dtype), dtype=dtype)
    hidden = T.gelu(T.matmul(c, params[p + "pos_w1"]) + params[p + "pos_b1"])
    logits = T.matmul(hidden, params[p + "pos_w2"]) + params[p + "pos_b2"]
    return T.softmax(logits * (1.0 / cfg.temperature), axis=-1)   # (H, N, L)


def phca_decode(z_mixed: Tensor, s_next: Tensor, coords: np.ndarray,
                params: ModelParams, layer: int) -> Tensor:
    """De-aggregate tokens back to every grid point: (B, N, C).

    reuse: the propagated encoder maps are row-normalized over tokens; rows
    with zero sum (points the mask has not reached) decode to exact zero.
    recalc: maps are recomputed from coordinates and decode everywhere.
    """
    cfg = params.config
    if cfg.variant == VARIANT_RECALC:
        a = _recalc_decode_map(coords, params, layer)
    else:
        row = s_next.sum(axis=-1, keepdims=True)
        safe = T.masked_fill(row, row.data == 0.0, 1.0)
        if _decode_norm_corruption:
            safe = safe + _decode_norm_corruption
        a = s_next / safe
    out_h = T.matmul(a, z_mixed)                               # (B, H, N, C_h)
    merged = _merge_heads(out_h, cfg)
    return T.matmul(merged, params[f"L{layer}.merge_w"]) + params[f"L{layer}.merge_b"]


def phlp_branch(y_norm: Tensor, mask: np.ndarray, coords: np.ndarray,
                params: ModelParams, layer: int, gh: int, gw: int):
    """The propagator branch on (already normalized) features.

    Returns (branch (B,N,C), mask_next (B,N), state).
    """
    cfg = params.config
    yh = _split_heads(y_norm, cfg)
    s, z = phca_encode(yh, mask, params, layer)
    if cfg.boundary_first:
        s_next, mask_next = pconv_propagate(s, mask, params, layer, gh, gw)
    else:
        s_next, mask_next = s, mask
    z_mixed = token_mix(z, params, layer)
    branch = phca_decode(z_mixed, s_next, coords, params, layer)
    state = LatentState(s.data, z.data, mask_next, layer)
    return branch, mask_next, state


def _affine_layernorm(y: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return T.layernorm(y, axis=-1) * params[prefix + "_g"] + params[prefix + "_b"]


def latent_operator_layer(y: Tensor, mask: np.ndarray, coords: np.ndarray,
                          params: ModelParams, layer: int, gh: int, gw: int):
    """One residual block: propagator branch then per-point MLP branch."""
    cfg = params.config
    p = f"L{layer}."
    branch, mask_next, state = phlp_branch(
        _affine_layernorm(y, params, p + "ln1"), mask, coords, params, layer, gh, gw)
    y_hat = branch + y
    h = _affine_layernorm(y_hat, params, p + "ln2")
    h = T.gelu(T.matmul(h, params[p + "mlp_w1"]) + params[p + "mlp_b1"])
    h = T.matmul(h, params[p + "mlp_w2"]) + params[p + "mlp_b2"]
    y_out = h + y_hat
    return y_out, mask_next, state


def lano_forward(coords: np.ndarray, frames: np.ndarray, mask: np.ndarray,
                 params: ModelParams, collect_states: bool = False):
    """Predict the next frame on the full domain.

    coords: (N, 2) or (H, W, 2); frames: (B, T, H, W, C_phys);
    mask: (B, H, W) or (B, N) with 1 = observed.  Frame values at
    unobserved points are zeroed here, so the output depends only on
    observed values and mask bits.

    Returns prediction (B, H, W, C_phys) as a Tensor; with
    collect_states=True returns (prediction, [LatentState per layer]).
    """
    cfg = params.config
    b, _, gh, gw, _ = frames.shape
    n = gh * gw
    mask_flat = np.asarray(mask).reshape(b, n)
    if np.any(mask_flat.sum(axis=-1) == 0):
        raise DegenerateMaskError("each sample needs at least one observed point")
    frames = frames * mask_flat.reshape(b, 1, gh, gw, 1).astype(frames.dtype)

    y = temporal_aggregate(coords, frames, params)
    m_cur = mask_flat
    states = []
    for layer in range(cfg.layers):
        y, m_cur, state = latent_operator_layer(y, m_cur, coords, params,
                                                layer, gh, gw)
        if collect_states:
            states.append(state)
    pred = T.matmul(y, params["out.w"]) + params["out.b"]
    pred = T.reshape(pred, (b, gh, gw, cfg.phys_channels))
    return (pred, states) if collect_states else pred


# -- dense kernel oracle -------------------------------------------------------

@dataclass
class KernelOracleResult:
    kappa: np.ndarray      # (H, N, N) per-head scalar kernels
    integral: np.ndarray   # (N, C) brute-force contraction + head merge
    identity: np.ndarray   # (N, C) residual self-update term (zero when unobserved)
    mask: np.ndarray       # (N,)


def _np_gelu(x):
    return x * 0.5 * (1.0 + _erf(x * 0.7071067811865476))


def _np_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def kernel_oracle(params: ModelParams, layer: int, mask: np.ndarray,
                  y: np.ndarray, gh: int, gw: int,
                  max_points: int = 256) -> KernelOracleResult:
    """Materialize one layer's propagator branch as a dense low-rank kernel.

    Independent numpy re-derivation: aggregation columns (eps-normalization
    folded in) give the source factors, the row-normalized propagated maps
    plus head merge give the target factors, and the contraction runs as a
    dense (N x N) kernel multiply rather than through the token bottleneck.
    Only mixer "none" (skip) and "attention" (folded as a learned token-to-
    token transformation) admit the factorization.
    """
    cfg = params.config
    n = gh * gw
    if n > max_points:
        raise OracleSizeError(f"{n} points exceeds dense-kernel limit {max_points}")
    if cfg.token_mixer == "mlp":
        raise OracleSizeError("mlp token mixer does not fold into the kernel")
    if cfg.variant != VARIANT_REUSE:
        raise OracleSizeError("kernel oracle targets the reuse decode variant")
    mask = np.asarray(mask, dtype=np.float64).reshape(n)
    y = np.asarray(y, dtype=np.float64).reshape(n, cfg.channels)
    p = f"L{layer}."

    def w(name):
        return params[p + name].data.astype(np.float64)

    h, ch, l, k = cfg.heads, cfg.head_dim, cfg.latent_tokens, cfg.pconv_kernel
    yh = y.reshape(n, h, ch).transpose(1, 0, 2)                 # (H, N, C_h)

    logits = _np_gelu(yh @ w("slice_w1") + w("slice_b1")) @ w("slice_w2") \
        + w("slice_b2")
    s = _np_softmax(logits / cfg.temperature, axis=-1) * mask[None, :, None]
    psi = s / (s.sum(axis=1, keepdims=True) + cfg.eps)          # (H, N, L)

    if cfg.boundary_first:
        grid = s.transpose(0, 2, 1).reshape(h * l, gh, gw)
        pad = k // 2
        gp = np.pad(grid, [(0, 0), (pad, pad), (pad, pad)])
        win = np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(1, 2))
        num = np.einsum("chwij,cij->chw", win, w("pconv_w"))
        counts = _window_counts(mask.reshape(gh, gw), k)
        observed = counts > 0
        sizes = _window_sizes(gh, gw, k)
        factor = np.where(observed, sizes / np.where(observed, counts, 1.0), 0.0)
        s_next = num * factor + w("pconv_b")[:, None, None] * observed
        s_next = s_next.reshape(h, l, n).transpose(0, 2, 1)     # (H, N, L)
    else:
        s_next = s

    row = s_next.sum(axis=-1, keepdims=True)
    phi = np.where(row > 0, s_next / np.where(row > 0, row, 1.0), 0.0)

    if cfg.token_mixer == "attention":
        z = np.einsum("hnl,hnc->hlc", psi, yh)
        probs = _np_softmax((z @ w("mix_wq")) @ (z @ w("mix_wk")).transpose(0, 2, 1)
                            / np.sqrt(ch), axis=-1)             # (H, L, L)
        kappa = np.einsum("hnl,hlm,hkm->hnk", phi, probs, psi)
        value_map = w("mix_wv")
    else:
        kappa = np.einsum("hnl,hkl->hnk", phi, psi)
        value_map = np.broadcast_to(np.eye(ch), (h, ch, ch))

    contracted = np.einsum("hnk,hkc->hnc", kappa, yh @ value_map)
    merged = contracted.transpose(1, 0, 2).reshape(n, cfg.channels)
    integral = merged @ w("merge_w") + w("merge_b")
    identity = y * mask[:, None]
    return KernelOracleResult(kappa, integral, identity, mask)


# -- checkpoints -----------------------------------------------------------------
# magic "POBW", version u32, u32-length-prefixed key=value config text, then
# parameter tensors in declaration order: ndim u8, dims u32 each, float32 data.

_CONFIG_FIELDS = ("layers", "channels", "heads", "latent_tokens", "temperature",
                  "eps", "pconv_kernel", "history", "phys_channels", "mlp_ratio",
                  "variant", "token_mixer", "boundary_first")


def config_to_text(cfg: ModelConfig) -> str:
    return "\n".join(f"{k}={getattr(cfg, k)!r}" for k in _CONFIG_FIELDS)


def config_from_text(text: str) -> ModelConfig:
    kw = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, val = line.split("=", 1)
        kw[key] = _parse_literal(val)
    return ModelConfig(**kw)


def _parse_literal(v: str):
    v = v.strip()
    if v in ("True", "False"):
        return v == "True"
    if v.startswith("'") and v.endswith("'"):
        return v[1:-1]
    try:
        return int(v)
    except ValueError:
        return float(v)


def save_checkpoint(params: ModelParams, path) -> None:
    cfg_blob = config_to_text(params.config).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    for _, t in params.items():
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class CheckpointError(IOError):
    pass


def load_checkpoint(path, dtype=None) -> ModelParams:
    dtype = dtype or T.default_dtype()
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    cfg = config_from_text(bytes(view[off:off + cfg_len]).decode("utf-8"))
    off += cfg_len
    params = ModelParams(cfg, seed=0, dtype=dtype)
    for name, _, _ in _param_specs(cfg):
        if off >= len(raw):
            raise CheckpointError(f"{path}: truncated before {name}")
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        want = params[name].shape
        if tuple(shape) != tuple(want):
            raise CheckpointError(
                f"{path}: {name} has shape {shape}, expected {want}")
        count = int(np.prod(shape)) if ndim else 1
        end = off + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        params[name].data = arr.reshape(shape).astype(dtype)
        off = end
    return params
