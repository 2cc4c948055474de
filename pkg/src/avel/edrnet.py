"""Temporal decomposition/recomposition network over segment features.

The model runs up to three branches (audio, visual, joint) of stacked valid
1-d convolutions over the segment axis, shrinking length by k-1 per layer,
then mirrors the audio and visual branches back up with transposed
convolutions, adding the matching decomposition level of the same branch and
of the joint branch at every step. When both recomposition branches exist, a
sigmoid gate convexly mixes them per segment and channel; a shared linear
head with softmax produces per-segment class posteriors, and mean pooling
over segments gives the video-level posterior for weakly supervised runs.

Everything is numpy. Parameters are stored float32 (the checkpoint format is
float32 blobs); all arithmetic happens in float64 so finite-difference
gradient checks are meaningful. ``backward`` is the exact adjoint of
``forward_with_cache``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BRANCH_A = "A"
BRANCH_V = "V"
BRANCH_AV = "AV"


class EdrError(ValueError):
    """Raised for invalid configurations or shape mismatches."""


def max_layers(k: int, n: int) -> int:
    """Deepest decomposition depth for kernel length k over n segments.

    Valid convolution at layer l leaves n - l*(k-1) steps; depth is maximal
    while the final length stays positive but below k (so no further layer
    fits). For n=10 this gives 9, 4, 3, 2 at k = 2, 3, 4, 5.
    """
    if not 2 <= k <= n:
        raise EdrError(f"kernel length must satisfy 2 <= k <= {n}, got {k}")
    depth = (n - 1) // (k - 1)
    if n - depth * (k - 1) >= k:  # only possible when (k-1) divides into n oddly
        raise EdrError(f"no admissible depth for k={k}, n={n}")
    return depth


def positional_encoding(n: int, width: int) -> np.ndarray:
    """Sinusoidal position table, shape (n, width), positions t = 1..n.

    Column 2m holds sin(w_m t) and column 2m+1 holds cos(w_m t) with
    w_m = 10^(-8m / width). Widths below 2 are rejected since the sin/cos
    pairing needs at least one full pair.
    """
    if width < 2:
        raise EdrError(f"positional encoding needs width >= 2, got {width}")
    t = np.arange(1, n + 1, dtype=np.float64)[:, None]
    pairs = np.arange(width, dtype=np.float64) // 2
    omega = np.power(10.0, -8.0 * pairs / width)[None, :]
    phase = omega * t
    pe = np.empty((n, width), dtype=np.float64)
    pe[:, 0::2] = np.sin(phase[:, 0::2])
    pe[:, 1::2] = np.cos(phase[:, 1::2])
    return pe


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EdrConfig:
    """Model hyper-parameters. Defaults match the full-scale setting."""

    k: int = 3
    layers: int = 4
    width: int = 768
    segments: int = 10
    classes: int = 29
    audio_dim: int = 128
    visual_dim: int = 512
    spatial_size: int = 49
    spatial_kernel: int = 3
    branch_a: bool = True
    branch_v: bool = True
    branch_av: bool = True
    positional: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.segments < 2:
            raise EdrError(f"segments must be >= 2, got {self.segments}")
        lmax = max_layers(self.k, self.segments)  # also validates k
        if not 1 <= self.layers <= lmax:
            raise EdrError(
                f"layers must lie in [1, {lmax}] for k={self.k}, "
                f"n={self.segments}; got {self.layers}"
            )
        if self.width < 2:
            raise EdrError(f"width must be >= 2, got {self.width}")
        if self.classes < 2:
            raise EdrError(f"need at least 2 classes, got {self.classes}")
        if self.audio_dim < 2 or self.visual_dim < 2:
            raise EdrError("audio_dim and visual_dim must be >= 2")
        if not (self.branch_a or self.branch_v):
            raise EdrError("at least one of the audio/visual branches must be enabled")
        if self.needs_spatial:
            side = math.isqrt(self.spatial_size)
            if side * side != self.spatial_size:
                raise EdrError(
                    f"spatial_size must be a perfect square, got {self.spatial_size}"
                )
            if self.spatial_kernel < 1:
                raise EdrError("spatial_kernel must be >= 1")

    @property
    def side(self) -> int:
        return math.isqrt(self.spatial_size)

    @property
    def needs_spatial(self) -> bool:
        return self.branch_v or self.branch_av

    @property
    def has_gate(self) -> bool:
        return self.branch_a and self.branch_v

    @property
    def dec_branches(self) -> tuple[str, ...]:
        out = []
        if self.branch_a:
            out.append(BRANCH_A)
        if self.branch_v:
            out.append(BRANCH_V)
        if self.branch_av:
            out.append(BRANCH_AV)
        return tuple(out)

    @property
    def rec_branches(self) -> tuple[str, ...]:
        return tuple(b for b in (BRANCH_A, BRANCH_V) if b in self.dec_branches)

    def branch_input_width(self, branch: str) -> int:
        if branch == BRANCH_A:
            return self.audio_dim
        if branch == BRANCH_V:
            return self.visual_dim
        if branch == BRANCH_AV:
            return self.audio_dim + self.visual_dim
        raise EdrError(f"unknown branch {branch!r}")

    def dec_length(self, layer: int) -> int:
        return self.segments - layer * (self.k - 1)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: EdrConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, in a fixed deterministic order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.needs_spatial:
        q = cfg.spatial_kernel
        shapes["spatial.w"] = (cfg.visual_dim, cfg.visual_dim, q, q)
        shapes["spatial.b"] = (cfg.visual_dim,)
    for branch in cfg.dec_branches:
        for layer in range(1, cfg.layers + 1):
            c_in = cfg.branch_input_width(branch) if layer == 1 else cfg.width
            shapes[f"dec.{branch}.{layer}.w"] = (cfg.width, c_in, cfg.k)
            shapes[f"dec.{branch}.{layer}.b"] = (cfg.width,)
    for branch in cfg.rec_branches:
        for layer in range(1, cfg.layers + 1):
            shapes[f"rec.{branch}.{layer}.w"] = (cfg.width, cfg.width, cfg.k)
            shapes[f"rec.{branch}.{layer}.b"] = (cfg.width,)
    if cfg.has_gate:
        shapes["gate.w"] = (cfg.width, 2 * cfg.width, cfg.k)
        shapes["gate.b"] = (cfg.width,)
    shapes["head.w"] = (cfg.width, cfg.classes)
    shapes["head.b"] = (cfg.classes,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "head.w":
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(cfg: EdrConfig) -> dict[str, np.ndarray]:
    """He-style fan-in uniform weights, zero biases, float32, seeded."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = math.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def count_parameters(cfg: EdrConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def decomposition_param_count(cfg: EdrConfig, branch: str) -> int:
    """Closed-form size of one decomposition stack, for ablation bookkeeping."""
    d, k = cfg.width, cfg.k
    first = d * cfg.branch_input_width(branch) * k + d
    rest = (cfg.layers - 1) * (d * d * k + d)
    return first + rest


# ---------------------------------------------------------------------------
# primitive ops (float64 in, float64 out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid correlation along axis 0. x (T, c_in), w (c_out, c_in, k) -> (T-k+1, c_out)."""
    k = w.shape[2]
    if x.shape[0] < k:
        raise EdrError(f"sequence of length {x.shape[0]} shorter than kernel {k}")
    if x.shape[1] != w.shape[1]:
        raise EdrError(f"channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0)
    return np.einsum("tik,oik->to", windows, w, optimize=True) + b


def conv1d_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = w.shape[2]
    t_out = dy.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0)
    dw = np.einsum("to,tik->oik", dy, windows, optimize=True)
    db = dy.sum(axis=0)
    dx = np.zeros_like(x)
    for j in range(k):
        dx[j : j + t_out] += dy @ w[:, :, j]
    return dx, dw, db


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Length-preserving correlation (zero padding, extra pad on the right for even k)."""
    left, right = _same_pad(w.shape[2])
    xp = np.pad(x, ((left, right), (0, 0)))
    return conv1d(xp, w, b)


def conv1d_same_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    left, right = _same_pad(w.shape[2])
    xp = np.pad(x, ((left, right), (0, 0)))
    dxp, dw, db = conv1d_backward(dy, xp, w)
    return dxp[left : left + x.shape[0]], dw, db


def conv1d_transpose(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Adjoint of the valid correlation; grows length by k-1.

    x (T, c_in), w (c_out, c_in, k) -> (T+k-1, c_out).
    """
    t_in, k = x.shape[0], w.shape[2]
    y = np.zeros((t_in + k - 1, w.shape[0]), dtype=np.float64)
    for j in range(k):
        y[j : j + t_in] += x @ w[:, :, j].T
    return y + b


def conv1d_transpose_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t_in, k = x.shape[0], w.shape[2]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for j in range(k):
        dx += dy[j : j + t_in] @ w[:, :, j]
        dw[:, :, j] = dy[j : j + t_in].T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


def conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 2-d correlation over (n, h, w, c_in) with kernel (c_out, c_in, q, q)."""
    q = w.shape[2]
    top, bottom = _same_pad(q)
    xp = np.pad(x, ((0, 0), (top, bottom), (top, bottom), (0, 0)))
    n, h, wid = x.shape[0], x.shape[1], x.shape[2]
    y = np.zeros((n, h, wid, w.shape[0]), dtype=np.float64)
    for r in range(q):
        for c in range(q):
            y += xp[:, r : r + h, c : c + wid, :] @ w[:, :, r, c].T
    return y + b


def conv2d_same_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = w.shape[2]
    top, bottom = _same_pad(q)
    xp = np.pad(x, ((0, 0), (top, bottom), (top, bottom), (0, 0)))
    n, h, wid = x.shape[0], x.shape[1], x.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for r in range(q):
        for c in range(q):
            patch = xp[:, r : r + h, c : c + wid, :]
            dw[:, :, r, c] = np.einsum("nhwo,nhwi->oi", dy, patch, optimize=True)
            dxp[:, r : r + h, c : c + wid, :] += dy @ w[:, :, r, c]
    db = dy.sum(axis=(0, 1, 2))
    return dxp[:, top : top + h, top : top + wid, :], dw, db


def softmax_rows(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


# ---------------------------------------------------------------------------
# model surface


def _as64(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def _spatial_forward(
    visual: np.ndarray, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n, s, d_v = visual.shape
    side = math.isqrt(s)
    if side * side != s:
        raise EdrError(f"spatial positions {s} do not form a square grid")
    grid = visual.reshape(n, side, side, d_v)
    pre = conv2d_same(grid, w, b)
    maps = relu(pre)
    encoded = maps.reshape(n, s, d_v).mean(axis=1)
    return encoded, maps.reshape(n, s, d_v), pre, grid


def spatial_maps(visual: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Post-activation per-position maps (N, S, d_v), before spatial averaging."""
    p = _as64(params)
    visual = np.asarray(visual, dtype=np.float64)
    return _spatial_forward(visual, p["spatial.w"], p["spatial.b"])[1]


def spatial_encode(visual: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Segment-level visual vectors (N, d_v): conv + relu, then spatial mean."""
    p = _as64(params)
    visual = np.asarray(visual, dtype=np.float64)
    return _spatial_forward(visual, p["spatial.w"], p["spatial.b"])[0]


def decompose(
    x0: np.ndarray, branch: str, cfg: EdrConfig, params: dict[str, np.ndarray]
) -> list[np.ndarray]:
    """Run one decomposition stack; returns [D^0, D^1, ..., D^L]."""
    if branch not in cfg.dec_branches:
        raise EdrError(f"branch {branch!r} is disabled in this configuration")
    p = _as64(params)
    levels = [np.asarray(x0, dtype=np.float64)]
    for layer in range(1, cfg.layers + 1):
        pre = conv1d(levels[-1], p[f"dec.{branch}.{layer}.w"], p[f"dec.{branch}.{layer}.b"])
        levels.append(relu(pre))
    return levels


def recompose(
    dec: dict[str, list[np.ndarray]], cfg: EdrConfig, params: dict[str, np.ndarray]
) -> dict[str, list[np.ndarray]]:
    """Mirror the A/V stacks back to full length; returns branch -> [R^1..R^L].

    Layer l takes R^(l-1) plus the D levels of matching length: the branch's
    own D^(L-l+1) and, when the joint branch exists, its D^(L-l+1) as well.
    Layer 1 starts from D^L (+ joint D^L).
    """
    p = _as64(params)
    out: dict[str, list[np.ndarray]] = {}
    for branch in cfg.rec_branches:
        own = dec[branch]
        joint = dec.get(BRANCH_AV) if cfg.branch_av else None
        x = own[cfg.layers]
        if joint is not None:
            x = x + joint[cfg.layers]
        levels = []
        for layer in range(1, cfg.layers + 1):
            pre = conv1d_transpose(
                x, p[f"rec.{branch}.{layer}.w"], p[f"rec.{branch}.{layer}.b"]
            )
            r = relu(pre)
            levels.append(r)
            if layer < cfg.layers:
                partner = cfg.layers - layer  # D level with matching length
                x = r + own[partner]
                if joint is not None:
                    x = x + joint[partner]
        out[branch] = levels
    return out


def gate(
    r_a: np.ndarray, r_v: np.ndarray, cfg: EdrConfig, params: dict[str, np.ndarray]
) -> np.ndarray:
    """Per-segment, per-channel mixing weights in (0, 1) from [R_A || R_V]."""
    if not cfg.has_gate:
        raise EdrError("gate requires both the audio and visual branches")
    if r_a.shape != r_v.shape:
        raise EdrError(f"gate inputs disagree: {r_a.shape} vs {r_v.shape}")
    p = _as64(params)
    concat = np.concatenate([np.asarray(r_a, np.float64), np.asarray(r_v, np.float64)], axis=1)
    return sigmoid(conv1d_same(concat, p["gate.w"], p["gate.b"]))


def fuse_gated(r_a: np.ndarray, r_v: np.ndarray, g: np.ndarray) -> np.ndarray:
    if not (r_a.shape == r_v.shape == g.shape):
        raise EdrError(
            f"fuse_gated shapes disagree: {r_a.shape}, {r_v.shape}, {g.shape}"
        )
    return g * r_a + (1.0 - g) * r_v


def classify(
    features: np.ndarray, params: dict[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Linear head + row softmax; returns (logits, probabilities)."""
    p = _as64(params)
    logits = np.asarray(features, np.float64) @ p["head.w"] + p["head.b"]
    return logits, softmax_rows(logits)


def mil_pool(seg_probs: np.ndarray) -> np.ndarray:
    """Video-level posterior as the mean of segment posteriors."""
    return np.asarray(seg_probs, np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# full forward / backward


@dataclass
class Activations:
    """Everything downstream consumers need from one forward pass."""

    dec: dict[str, list[np.ndarray]]
    rec: dict[str, list[np.ndarray]]
    gate: np.ndarray | None
    features: np.ndarray
    logits: np.ndarray
    seg_probs: np.ndarray
    video_probs: np.ndarray
    visual_encoded: np.ndarray | None
    spatial_pre_gap: np.ndarray | None


@dataclass
class _Cache:
    params64: dict[str, np.ndarray]
    audio: np.ndarray
    grid: np.ndarray | None
    spatial_pre: np.ndarray | None
    dec_pre: dict[str, list[np.ndarray]]
    rec_pre: dict[str, list[np.ndarray]]
    rec_in: dict[str, list[np.ndarray]]
    gate_concat: np.ndarray | None
    acts: Activations


def forward(record, cfg: EdrConfig, params: dict[str, np.ndarray]) -> Activations:
    return forward_with_cache(record, cfg, params)[0]


def forward_with_cache(
    record, cfg: EdrConfig, params: dict[str, np.ndarray]
) -> tuple[Activations, _Cache]:
    p = _as64(params)
    audio = np.asarray(record.audio, dtype=np.float64)
    visual = np.asarray(record.visual, dtype=np.float64)
    if audio.shape != (cfg.segments, cfg.audio_dim):
        raise EdrError(
            f"audio shape {audio.shape} does not match config "
            f"({cfg.segments}, {cfg.audio_dim})"
        )
    if visual.shape != (cfg.segments, cfg.spatial_size, cfg.visual_dim):
        raise EdrError(
            f"visual shape {visual.shape} does not match config "
            f"({cfg.segments}, {cfg.spatial_size}, {cfg.visual_dim})"
        )

    encoded = maps = pre = grid = None
    if cfg.needs_spatial:
        encoded, maps, pre, grid = _spatial_forward(visual, p["spatial.w"], p["spatial.b"])

    x0: dict[str, np.ndarray] = {}
    if cfg.branch_a:
        x0[BRANCH_A] = audio.copy()
    if cfg.branch_v:
        x0[BRANCH_V] = encoded.copy()
    if cfg.branch_av:
        x0[BRANCH_AV] = np.concatenate([audio, encoded], axis=1)
    if cfg.positional:
        for branch, x in x0.items():
            x0[branch] = x + positional_encoding(cfg.segments, x.shape[1])

    dec: dict[str, list[np.ndarray]] = {}
    dec_pre: dict[str, list[np.ndarray]] = {}
    for branch in cfg.dec_branches:
        levels = [x0[branch]]
        pres = []
        for layer in range(1, cfg.layers + 1):
            z = conv1d(
                levels[-1], p[f"dec.{branch}.{layer}.w"], p[f"dec.{branch}.{layer}.b"]
            )
            pres.append(z)
            levels.append(relu(z))
        dec[branch] = levels
        dec_pre[branch] = pres

    rec: dict[str, list[np.ndarray]] = {}
    rec_pre: dict[str, list[np.ndarray]] = {}
    rec_in: dict[str, list[np.ndarray]] = {}
    for branch in cfg.rec_branches:
        own = dec[branch]
        joint = dec[BRANCH_AV] if cfg.branch_av else None
        x = own[cfg.layers] + joint[cfg.layers] if joint is not None else own[cfg.layers].copy()
        levels, pres, ins = [], [], []
        for layer in range(1, cfg.layers + 1):
            ins.append(x)
            z = conv1d_transpose(
                x, p[f"rec.{branch}.{layer}.w"], p[f"rec.{branch}.{layer}.b"]
            )
            pres.append(z)
            r = relu(z)
            levels.append(r)
            if layer < cfg.layers:
                partner = cfg.layers - layer
                x = r + own[partner]
                if joint is not None:
                    x = x + joint[partner]
        rec[branch] = levels
        rec_pre[branch] = pres
        rec_in[branch] = ins

    gate_concat = g = None
    if cfg.has_gate:
        gate_concat = np.concatenate([rec[BRANCH_A][-1], rec[BRANCH_V][-1]], axis=1)
        g = sigmoid(conv1d_same(gate_concat, p["gate.w"], p["gate.b"]))
        features = fuse_gated(rec[BRANCH_A][-1], rec[BRANCH_V][-1], g)
    else:
        features = rec[cfg.rec_branches[0]][-1]

    logits = features @ p["head.w"] + p["head.b"]
    seg_probs = softmax_rows(logits)
    acts = Activations(
        dec=dec,
        rec=rec,
        gate=g,
        features=features,
        logits=logits,
        seg_probs=seg_probs,
        video_probs=seg_probs.mean(axis=0),
        visual_encoded=encoded,
        spatial_pre_gap=maps,
    )
    cache = _Cache(
        params64=p,
        audio=audio,
        grid=grid,
        spatial_pre=pre,
        dec_pre=dec_pre,
        rec_pre=rec_pre,
        rec_in=rec_in,
        gate_concat=gate_concat,
        acts=acts,
    )
    return acts, cache


def backward(
    cache: _Cache,
    d_logits: np.ndarray | None,
    d_features: np.ndarray | None,
    cfg: EdrConfig,
) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar objective given its logits/features adjoints.

    ``d_logits`` feeds through the head; ``d_features`` adds directly onto the
    classifier input (the gated fusion, or the lone branch's R^L). Either may
    be None. Returns float64 gradients keyed like the parameters.
    """
    p = cache.params64
    acts = cache.acts
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    dfeat = np.zeros_like(acts.features)
    if d_logits is not None:
        grads["head.w"] += acts.features.T @ d_logits
        grads["head.b"] += d_logits.sum(axis=0)
        dfeat += d_logits @ p["head.w"].T
    if d_features is not None:
        dfeat = dfeat + d_features

    drec_top: dict[str, np.ndarray] = {}
    if cfg.has_gate:
        g = acts.gate
        r_a = acts.rec[BRANCH_A][-1]
        r_v = acts.rec[BRANCH_V][-1]
        dg = dfeat * (r_a - r_v)
        dpre_g = dg * g * (1.0 - g)
        dconcat, dw, db = conv1d_same_backward(dpre_g, cache.gate_concat, p["gate.w"])
        grads["gate.w"] += dw
        grads["gate.b"] += db
        drec_top[BRANCH_A] = dfeat * g + dconcat[:, : cfg.width]
        drec_top[BRANCH_V] = dfeat * (1.0 - g) + dconcat[:, cfg.width :]
    else:
        drec_top[cfg.rec_branches[0]] = dfeat

    ddec: dict[str, list[np.ndarray]] = {
        branch: [np.zeros_like(level) for level in levels]
        for branch, levels in acts.dec.items()
    }
    for branch in cfg.rec_branches:
        dr = drec_top[branch]
        for layer in range(cfg.layers, 0, -1):
            dpre = dr * (cache.rec_pre[branch][layer - 1] > 0)
            din, dw, db = conv1d_transpose_backward(
                dpre, cache.rec_in[branch][layer - 1], p[f"rec.{branch}.{layer}.w"]
            )
            grads[f"rec.{branch}.{layer}.w"] += dw
            grads[f"rec.{branch}.{layer}.b"] += db
            partner = cfg.layers - layer + 1
            ddec[branch][partner] += din
            if cfg.branch_av:
                ddec[BRANCH_AV][partner] += din
            if layer > 1:
                dr = din  # the residual sum also feeds R^(layer-1)

    dx0: dict[str, np.ndarray] = {}
    for branch in cfg.dec_branches:
        dlev = ddec[branch]
        for layer in range(cfg.layers, 0, -1):
            dpre = dlev[layer] * (cache.dec_pre[branch][layer - 1] > 0)
            dx, dw, db = conv1d_backward(
                dpre, acts.dec[branch][layer - 1], p[f"dec.{branch}.{layer}.w"]
            )
            grads[f"dec.{branch}.{layer}.w"] += dw
            grads[f"dec.{branch}.{layer}.b"] += db
            dlev[layer - 1] += dx
        dx0[branch] = dlev[0]

    if cfg.needs_spatial:
        dencoded = np.zeros_like(acts.visual_encoded)
        if cfg.branch_v:
            dencoded += dx0[BRANCH_V]
        if cfg.branch_av:
            dencoded += dx0[BRANCH_AV][:, cfg.audio_dim :]
        if np.any(dencoded):
            n = cfg.segments
            dmaps = np.broadcast_to(
                dencoded[:, None, :] / cfg.spatial_size,
                (n, cfg.spatial_size, cfg.visual_dim),
            ).reshape(n, cfg.side, cfg.side, cfg.visual_dim)
            dpre_sp = dmaps * (cache.spatial_pre > 0)
            _, dw, db = conv2d_same_backward(dpre_sp, cache.grid, p["spatial.w"])
            grads["spatial.w"] += dw
            grads["spatial.b"] += db
    return grads


# ---------------------------------------------------------------------------
# class activation maps


def argmax_time_channel(d1: np.ndarray) -> tuple[int, int]:
    """Location of the global maximum of a (T, d) map.

    Ties resolve to the lowest channel index, then the lowest time step.
    """
    peak = d1.max()
    t_idx, c_idx = np.nonzero(d1 == peak)
    order = np.lexsort((t_idx, c_idx))
    best = order[0]
    return int(t_idx[best]), int(c_idx[best])


def cam_extract(
    acts: Activations, cfg: EdrConfig, params: dict[str, np.ndarray], source: str
) -> np.ndarray:
    """Spatial class activation maps from a first-layer decomposition peak.

    Finds the strongest response in D^1 of ``source`` ("V" or "AV"), takes the
    visual slice of that channel's first-layer kernel, and projects each
    window of k pre-pool spatial maps through it, averaged over the kernel
    taps. Output is (N-k+1, side, side), each map min-max scaled to [0, 1]
    (all zeros when the map is constant).
    """
    if source not in (BRANCH_V, BRANCH_AV):
        raise EdrError(f"cam source must be V or AV, got {source!r}")
    if source not in cfg.dec_branches:
        raise EdrError(f"branch {source!r} is disabled in this configuration")
    if acts.spatial_pre_gap is None:
        raise EdrError("activations carry no spatial maps")
    d1 = acts.dec[source][1]
    _, channel = argmax_time_channel(d1)
    kernel = np.asarray(params[f"dec.{source}.1.w"], dtype=np.float64)[channel]
    if source == BRANCH_AV:
        kernel = kernel[cfg.audio_dim :, :]  # visual rows of the joint input
    maps = acts.spatial_pre_gap.reshape(cfg.segments, cfg.side, cfg.side, cfg.visual_dim)
    k = cfg.k
    out = np.zeros((cfg.segments - k + 1, cfg.side, cfg.side), dtype=np.float64)
    for t in range(out.shape[0]):
        acc = np.zeros((cfg.side, cfg.side), dtype=np.float64)
        for j in range(k):
            acc += maps[t + j] @ kernel[:, j]
        out[t] = acc / k
    for t in range(out.shape[0]):
        lo, hi = out[t].min(), out[t].max()
        if hi - lo > 0:
            out[t] = (out[t] - lo) / (hi - lo)
        else:
            out[t] = 0.0
    return out
