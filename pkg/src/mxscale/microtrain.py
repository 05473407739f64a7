"""Desk-scale training loop whose linear layers run FPROP/DGRAD/WGRAD in MX.

Every quantized linear layer ``y = x @ W.T + b`` keeps six MX copies per
step, all requantized from binary32 sources:

=========  =====================  ===========================
GEMM       operands               contraction
=========  =====================  ===========================
FPROP      ``A_row @ W_row.T``    input features
DGRAD      ``G_row @ W_col``      output features
WGRAD      ``G_col.T @ A_col``    batch
=========  =====================  ===========================

``A`` is the layer input, ``G`` the gradient of its output. A role whose
format is ``None`` is a pass-through: the tensor keeps its binary32 values
but still carries its axis tag, so copy selection is checked either way.
Biases, activations, softmax, attention BMMs, residual adds and the first and
last layers of the attention model stay in full precision.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from mxscale.block_quant import Axis, MxTensor, QuantStats, quantize_tensor
from mxscale.errors import AxisMismatch, GradcheckFailure
from mxscale.linalg import MmaConfig, f32_matmul, mx_matmul
from mxscale.minifloat import E4M3, E5M2, MiniFloatFormat
from mxscale.scaling import ScaleRoundingMode

log = logging.getLogger(__name__)

__all__ = [
    "ROLES",
    "PassThrough",
    "QuantizedLinearLayer",
    "TrainConfig",
    "TrainResult",
    "GradcheckReport",
    "make_regression_data",
    "train",
    "gradcheck",
]

ROLES = ("W", "A", "G")


@dataclass(frozen=True, eq=False)
class PassThrough:
    """Unquantized operand tagged with the axis it would be blocked along."""

    data: np.ndarray
    axis: Axis

    @property
    def T(self) -> "PassThrough":
        return PassThrough(self.data.T, self.axis.other)

    @property
    def shape(self):
        return self.data.shape


Operand = MxTensor | PassThrough


def _copy(x: np.ndarray, axis: Axis, fmt: MiniFloatFormat | None, mode: ScaleRoundingMode,
          stats: QuantStats) -> Operand:
    if fmt is None:
        return PassThrough(x, axis)
    q, s = quantize_tensor(x, axis, fmt, mode)
    stats += s
    return q


def gemm(a: Operand, b: Operand, cfg: MmaConfig = MmaConfig()) -> np.ndarray:
    if isinstance(a, MxTensor) and isinstance(b, MxTensor):
        return mx_matmul(a, b, cfg)
    if isinstance(a, PassThrough) and isinstance(b, PassThrough):
        if a.axis is not Axis.ROW or b.axis is not Axis.COL:
            raise AxisMismatch(f"operands blocked along {a.axis}/{b.axis}, need row/col")
        if a.data.dtype == np.float32 and b.data.dtype == np.float32:
            return f32_matmul(a.data, b.data)
        return a.data @ b.data
    # mixed quantized / pass-through operands: dequantize is not free, refuse
    raise TypeError("both GEMM operands must be quantized or both pass-through")


def _digest(op: Operand) -> str:
    raw = op.codes.tobytes() + op.scales.tobytes() if isinstance(op, MxTensor) else op.data.tobytes()
    return hashlib.sha1(raw).hexdigest()


class QuantizedLinearLayer:
    """``y = x @ W.T + b`` with per-role MX formats and binary32 master weights."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray,
                 formats: Mapping[str, MiniFloatFormat | None],
                 mode: ScaleRoundingMode = ScaleRoundingMode.ROUND_UP,
                 mma: MmaConfig = MmaConfig(), swap_weight_copies: bool = False):
        if set(formats) != set(ROLES):
            raise ValueError(f"formats must cover exactly {ROLES}, got {sorted(formats)}")
        self.weight = weight
        self.bias = bias
        self.formats = dict(formats)
        self.mode = mode
        self.mma = mma
        # fault injection: feed FPROP the wrong weight copy
        self.swap_weight_copies = swap_weight_copies
        self.stats = {role: QuantStats() for role in ROLES}
        self.copies: dict[str, Operand] = {}
        self.grad_weight: np.ndarray | None = None
        self.grad_bias: np.ndarray | None = None

    def _both(self, x, role):
        fmt = self.formats[role]
        return (_copy(x, Axis.ROW, fmt, self.mode, self.stats[role]),
                _copy(x, Axis.COL, fmt, self.mode, self.stats[role]))

    def forward(self, x: np.ndarray) -> np.ndarray:
        w_row, w_col = self._both(self.weight, "W")
        a_row, a_col = self._both(x, "A")
        self.copies.update(W_row=w_row, W_col=w_col, A_row=a_row, A_col=a_col)
        w_fprop = w_col if self.swap_weight_copies else w_row
        return gemm(a_row, w_fprop.T, self.mma) + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g_row, g_col = self._both(grad_out, "G")
        self.copies.update(G_row=g_row, G_col=g_col)
        grad_in = gemm(g_row, self.copies["W_col"], self.mma)
        self.grad_weight = gemm(g_col.T, self.copies["A_col"], self.mma)
        self.grad_bias = grad_out.sum(axis=0, dtype=grad_out.dtype)
        return grad_in

    def copy_digests(self) -> dict[str, str]:
        return {name: _digest(op) for name, op in self.copies.items()}


@dataclass
class TrainConfig:
    """Configuration of a desk-scale run.

    ``formats`` maps each role in ``{W, A, G}`` to an element format or
    ``None`` (pass-through).
    """

    in_dim: int = 32
    hidden: tuple[int, ...] = (64,)
    out_dim: int = 8
    steps: int = 2000
    lr: float | None = None  # 0.05 for the MLP, 0.01 for the attention block
    momentum: float = 0.9
    batch: int = 64
    seed: int = 0
    formats: dict = field(default_factory=lambda: {"W": E4M3, "A": E4M3, "G": E4M3})
    mode: ScaleRoundingMode = ScaleRoundingMode.ROUND_UP
    model: str = "mlp"
    noise: float = 0.3
    n_samples: int = 4096
    seq_len: int = 8
    mma: MmaConfig = MmaConfig()

    def __post_init__(self):
        if set(self.formats) != set(ROLES):
            raise ValueError(f"formats must cover exactly {ROLES}")
        if len(self.hidden) > 2 or any(h > 256 for h in self.hidden):
            raise ValueError("at most 2 hidden layers of width <= 256")
        if self.steps > 5000:
            raise ValueError("steps must be <= 5000")
        if self.model not in ("mlp", "attention"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.lr is None:
            # the residual attention block starts with a much larger loss and
            # overshoots at the MLP rate
            self.lr = 0.05 if self.model == "mlp" else 0.01

    @classmethod
    def cfg1(cls, **kw) -> "TrainConfig":
        return cls(formats={"W": E4M3, "A": E4M3, "G": E4M3}, **kw)

    @classmethod
    def cfg2(cls, **kw) -> "TrainConfig":
        return cls(formats={"W": E4M3, "A": E4M3, "G": E5M2}, **kw)

    @classmethod
    def passthrough(cls, **kw) -> "TrainConfig":
        return cls(formats={"W": None, "A": None, "G": None}, **kw)


@dataclass
class TrainResult:
    losses: list[float]
    ref_losses: list[float]
    status: str = "ok"
    diverged_at: int | None = None
    stats: dict[str, QuantStats] = field(default_factory=dict)
    grad_norms: list[list[float]] = field(default_factory=list)
    ref_grad_norms: list[list[float]] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def n_saturated(self) -> int:
        return sum(s.n_saturated for s in self.stats.values())

    def final_loss(self, window: int = 100) -> float:
        tail = self.losses[-window:]
        return float(np.mean(tail))

    def ref_final_loss(self, window: int = 100) -> float:
        return float(np.mean(self.ref_losses[-window:]))

    def trace_text(self, reference: bool = False) -> str:
        losses = self.ref_losses if reference else self.losses
        return "".join(f"{i} {v!r}\n" for i, v in enumerate(losses))


def make_regression_data(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Noisy targets from a fixed random two-layer tanh teacher."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    shape = (cfg.n_samples, cfg.seq_len, cfg.in_dim) if cfg.model == "attention" \
        else (cfg.n_samples, cfg.in_dim)
    x = rng.standard_normal(shape).astype(np.float32)
    width = 64
    t1 = rng.standard_normal((cfg.in_dim, width)) / math.sqrt(cfg.in_dim)
    t2 = rng.standard_normal((width, cfg.out_dim)) / math.sqrt(width)
    feats = x.astype(np.float64)
    if cfg.model == "attention":
        # interaction across positions: product of first token and the mean
        feats = feats[:, 0, :] * 0.5 + feats.mean(axis=1) * 1.5
    y = np.tanh(feats @ t1) @ t2 + cfg.noise * rng.standard_normal((cfg.n_samples, cfg.out_dim))
    return x, y.astype(np.float32)


def _batches(cfg: TrainConfig):
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    for _ in range(cfg.steps):
        yield rng.integers(0, cfg.n_samples, size=cfg.batch)


def _init_params(cfg: TrainConfig, dims: list[tuple[int, int]]):
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 2))
    params = []
    for fan_in, fan_out in dims:
        w = (rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        params.append((w, np.zeros(fan_out, dtype=np.float32)))
    return params


def _mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (np.float32(2.0 / diff.size) * diff).astype(np.float32)
    return loss, grad


def _sgd(param: np.ndarray, grad: np.ndarray, vel: np.ndarray, cfg: TrainConfig) -> None:
    vel *= np.float32(cfg.momentum)
    vel += grad
    param -= np.float32(cfg.lr) * vel


# ---------------------------------------------------------------- MLP ------


def _mlp_dims(cfg: TrainConfig) -> list[tuple[int, int]]:
    sizes = [cfg.in_dim, *cfg.hidden, cfg.out_dim]
    return list(zip(sizes[:-1], sizes[1:]))


class _Mlp:
    def __init__(self, cfg: TrainConfig, swap_weight_copies: bool = False):
        self.cfg = cfg
        self.layers = [
            QuantizedLinearLayer(w.copy(), b.copy(), cfg.formats, cfg.mode, cfg.mma,
                                 swap_weight_copies)
            for w, b in _init_params(cfg, _mlp_dims(cfg))
        ]
        self.vel = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers]
        self._masks: list[np.ndarray] = []

    def forward(self, x):
        self._masks = []
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i < len(self.layers) - 1:
                mask = h > 0
                self._masks.append(mask)
                h = np.where(mask, h, np.float32(0))
        return h

    def backward(self, g):
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1:
                g = np.where(self._masks[i], g, np.float32(0))
            g = self.layers[i].backward(g)
        return g

    def step(self):
        for layer, (vw, vb) in zip(self.layers, self.vel):
            _sgd(layer.weight, layer.grad_weight, vw, self.cfg)
            _sgd(layer.bias, layer.grad_bias, vb, self.cfg)

    def grad_norms(self):
        return [float(np.linalg.norm(l.grad_weight)) for l in self.layers]

    def stats(self):
        total = {role: QuantStats() for role in ROLES}
        for layer in self.layers:
            for role in ROLES:
                total[role] += layer.stats[role]
        return total


def _reference_mlp(cfg: TrainConfig, x_all, y_all) -> tuple[list[float], list[list[float]]]:
    """Plain binary32 training with explicit transposes and no tensor copies."""
    params = [(w.copy(), b.copy()) for w, b in _init_params(cfg, _mlp_dims(cfg))]
    vel = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    losses, norms = [], []
    for idx in _batches(cfg):
        x, y = x_all[idx], y_all[idx]
        acts, masks = [x], []
        h = x
        for i, (w, b) in enumerate(params):
            h = f32_matmul(h, w.T) + b
            if i < len(params) - 1:
                masks.append(h > 0)
                h = np.where(masks[-1], h, np.float32(0))
                acts.append(h)
        loss, g = _mse(h, y)
        losses.append(loss)
        if not math.isfinite(loss):
            break
        grads = [None] * len(params)
        for i in reversed(range(len(params))):
            if i < len(params) - 1:
                g = np.where(masks[i], g, np.float32(0))
            w, _ = params[i]
            grads[i] = (f32_matmul(g.T, acts[i]), g.sum(axis=0, dtype=np.float32))
            g = f32_matmul(g, w)
        norms.append([float(np.linalg.norm(gw)) for gw, _ in grads])
        for (w, b), (gw, gb), (vw, vb) in zip(params, grads, vel):
            _sgd(w, gw, vw, cfg)
            _sgd(b, gb, vb, cfg)
    return losses, norms


# ---------------------------------------------------------- attention ------


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class _AttentionBlock:
    """Embedding -> single-head self-attention -> FFN -> pooled output head.

    QKV, PROJ, FFN-up and FFN-down are quantized linear layers. Embedding and
    output head are binary32 linear layers outside the quantized set.
    """

    def __init__(self, cfg: TrainConfig, swap_weight_copies: bool = False):
        self.cfg = cfg
        d = cfg.hidden[0]
        ffn = cfg.hidden[1] if len(cfg.hidden) > 1 else 2 * d
        self.d = d
        dims = [(cfg.in_dim, d), (d, 3 * d), (d, d), (d, ffn), (ffn, d), (d, cfg.out_dim)]
        init = _init_params(cfg, dims)
        self.embed = [init[0][0].copy(), init[0][1].copy()]
        self.head = [init[5][0].copy(), init[5][1].copy()]
        self.layers = [
            QuantizedLinearLayer(w.copy(), b.copy(), cfg.formats, cfg.mode, cfg.mma,
                                 swap_weight_copies)
            for w, b in init[1:5]
        ]
        self.qkv, self.proj, self.up, self.down = self.layers
        self.vel = [(np.zeros_like(w), np.zeros_like(b))
                    for w, b in [self.embed, *[(l.weight, l.bias) for l in self.layers], self.head]]

    def forward(self, x):
        bsz, s, _ = x.shape
        d = self.d
        self.x = x.reshape(bsz * s, -1)
        self.e = (self.x @ self.embed[0].T + self.embed[1]).astype(x.dtype)
        qkv = self.qkv.forward(self.e).reshape(bsz, s, 3 * d)
        self.q, self.k, self.v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        self.p = _softmax(self.q @ self.k.transpose(0, 2, 1) / np.float32(math.sqrt(d)))
        o = (self.p @ self.v).reshape(bsz * s, d)
        self.h1 = self.e + self.proj.forward(o)
        u = self.up.forward(self.h1)
        self.mask = u > 0
        self.h2 = self.h1 + self.down.forward(np.where(self.mask, u, np.float32(0)))
        self.pooled = self.h2.reshape(bsz, s, d).mean(axis=1, dtype=x.dtype)
        self.shape = (bsz, s)
        return (self.pooled @ self.head[0].T + self.head[1]).astype(x.dtype)

    def backward(self, g):
        bsz, s = self.shape
        d = self.d
        self.g_head = (g.T @ self.pooled, g.sum(axis=0))
        g_pooled = g @ self.head[0]
        g_h2 = np.repeat(g_pooled[:, None, :] / np.float32(s), s, axis=1).reshape(bsz * s, d)
        g_u = np.where(self.mask, self.down.backward(g_h2), np.float32(0))
        g_h1 = g_h2 + self.up.backward(g_u)
        g_o = self.proj.backward(g_h1).reshape(bsz, s, d)
        g_p = g_o @ self.v.transpose(0, 2, 1)
        g_v = self.p.transpose(0, 2, 1) @ g_o
        g_s = self.p * (g_p - np.sum(g_p * self.p, axis=-1, keepdims=True))
        g_s = g_s / np.float32(math.sqrt(d))
        g_q = g_s @ self.k
        g_k = g_s.transpose(0, 2, 1) @ self.q
        g_qkv = np.concatenate([g_q, g_k, g_v], axis=-1).reshape(bsz * s, 3 * d)
        g_e = g_h1 + self.qkv.backward(g_qkv.astype(g.dtype))
        self.g_embed = (g_e.T @ self.x, g_e.sum(axis=0))
        return g_e

    def _params_and_grads(self):
        yield self.embed[0], self.embed[1], self.g_embed
        for l in self.layers:
            yield l.weight, l.bias, (l.grad_weight, l.grad_bias)
        yield self.head[0], self.head[1], self.g_head

    def step(self):
        for (w, b, (gw, gb)), (vw, vb) in zip(self._params_and_grads(), self.vel):
            _sgd(w, gw.astype(np.float32), vw, self.cfg)
            _sgd(b, gb.astype(np.float32), vb, self.cfg)

    def grad_norms(self):
        return [float(np.linalg.norm(gw)) for _, _, (gw, _) in self._params_and_grads()]

    stats = _Mlp.stats


def _build(cfg: TrainConfig, swap_weight_copies: bool = False):
    cls = _Mlp if cfg.model == "mlp" else _AttentionBlock
    return cls(cfg, swap_weight_copies)


def _run(model, cfg: TrainConfig, x_all, y_all, on_step=None):
    losses, norms = [], []
    for step, idx in enumerate(_batches(cfg)):
        with np.errstate(all="ignore"):
            pred = model.forward(x_all[idx])
            loss, g = _mse(pred, y_all[idx])
        losses.append(loss)
        if not math.isfinite(loss):
            log.warning("loss became %r at step %d", loss, step)
            return losses, norms, step
        model.backward(g)
        norms.append(model.grad_norms())
        model.step()
        if on_step is not None:
            on_step(step, model)
    return losses, norms, None


def train(cfg: TrainConfig, on_step=None) -> TrainResult:
    """Train the configured model and a binary32 reference on the same data.

    Both runs share initialization and batch order. A non-finite loss stops
    the quantized run with ``status='diverged'``; no exception is raised.
    """
    x_all, y_all = make_regression_data(cfg)
    model = _build(cfg)
    losses, norms, diverged_at = _run(model, cfg, x_all, y_all, on_step)
    if cfg.model == "mlp":
        with np.errstate(all="ignore"):
            ref_losses, ref_norms = _reference_mlp(cfg, x_all, y_all)
    else:
        ref_cfg = TrainConfig(**{**cfg.__dict__, "formats": {r: None for r in ROLES}})
        ref_losses, ref_norms, _ = _run(_build(ref_cfg), ref_cfg, x_all, y_all)
    return TrainResult(
        losses=losses,
        ref_losses=ref_losses,
        status="diverged" if diverged_at is not None else "ok",
        diverged_at=diverged_at,
        stats=model.stats(),
        grad_norms=norms,
        ref_grad_norms=ref_norms,
    )


# ---------------------------------------------------------- gradcheck ------


@dataclass
class GradcheckReport:
    deviations: dict[str, float]

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values())


def gradcheck(layer: QuantizedLinearLayer, x: np.ndarray, eps: float = 1e-6,
              tol: float = 1e-4, strict: bool = True, seed: int = 0) -> GradcheckReport:
    """Compare backprop through ``layer`` against central finite differences.

    With all roles pass-through the check runs in binary64 and must agree
    within ``tol`` (normwise relative deviation per tensor); otherwise the
    quantized analytic gradients are compared with differences of the
    unquantized function and the deviations are only reported.
    """
    passthrough = all(f is None for f in layer.formats.values())
    rng = np.random.Generator(np.random.PCG64(seed))
    w0 = layer.weight.astype(np.float64)
    b0 = layer.bias.astype(np.float64)
    x0 = np.asarray(x, dtype=np.float64)
    target = rng.standard_normal((x0.shape[0], w0.shape[0]))

    def loss(w, b, xx):
        r = xx @ w.T + b - target
        return 0.5 * float(np.sum(r * r))

    saved = layer.weight, layer.bias
    if passthrough:
        layer.weight, layer.bias = w0.copy(), b0.copy()
        out = layer.forward(x0)
    else:
        out = layer.forward(x0.astype(np.float32)).astype(np.float64)
    grad_x = np.asarray(layer.backward((out - target).astype(out.dtype)), dtype=np.float64)
    analytic = {"W": np.asarray(layer.grad_weight, dtype=np.float64),
                "b": np.asarray(layer.grad_bias, dtype=np.float64), "A": grad_x}
    layer.weight, layer.bias = saved

    def numeric(arr, f):
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            up = f()
            arr[i] = old - eps
            down = f()
            arr[i] = old
            g[i] = (up - down) / (2 * eps)
        return g

    w, b, xx = w0.copy(), b0.copy(), x0.copy()
    numerical = {
        "W": numeric(w, lambda: loss(w, b, xx)),
        "b": numeric(b, lambda: loss(w, b, xx)),
        "A": numeric(xx, lambda: loss(w, b, xx)),
    }
    deviations = {}
    for role, n in numerical.items():
        scale = max(float(np.max(np.abs(n))), 1e-12)
        deviations[role] = float(np.max(np.abs(analytic[role] - n))) / scale
    if passthrough and strict:
        for role, dev in deviations.items():
            if not dev < tol:
                raise GradcheckFailure(role, dev, tol)
    return GradcheckReport(deviations)
