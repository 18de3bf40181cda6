"""Zonotope abstract interpretation for ReLU networks.

A zonotope is an affine form z = center + sum_i generators[:, i] * eps_i
with each noise symbol eps_i ranging over [-1, 1].  Symbols are shared
across dimensions (column i is one symbol everywhere), which is what
makes differences of output dimensions tight: correlated terms cancel
before taking absolute values.

The ReLU transformer is the standard single-symbol relaxation: stable
dimensions pass through or zero out, a crossing dimension with bounds
l < 0 < u is replaced by slope*x + offset plus one fresh symbol, where
slope = u / (u - l) and offset = -slope * l / 2.  The fresh symbol's
coefficient equals the offset, so the relaxation encloses relu exactly
at x in {l, 0, u}.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, InputError, NumericError


@dataclass(frozen=True, eq=False)
class Zonotope:
    center: np.ndarray  # (d,)
    generators: np.ndarray  # (d, num_symbols)

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64, copy=True).reshape(-1)
        g = np.array(self.generators, dtype=np.float64, copy=True)
        if g.ndim != 2 or g.shape[0] != c.shape[0]:
            raise InputError(f"generators {g.shape} do not match center {c.shape}")
        if not (np.isfinite(c).all() and np.isfinite(g).all()):
            raise NumericError("zonotope entries must be finite")
        c.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", g)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.generators.shape[1]


@dataclass(frozen=True)
class IntervalBox:
    lower: np.ndarray
    upper: np.ndarray


@dataclass(frozen=True)
class CertEpsilon:
    """A perturbation radius with the role it plays (certification or attack)."""

    value: float
    role: str = "crt"

    def __post_init__(self):
        if self.value < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.value}")
        if self.role not in ("crt", "adv"):
            raise ConfigError(f"epsilon role must be 'crt' or 'adv', got {self.role!r}")


def eps_value(eps) -> float:
    """Accepts CertEpsilon or a bare non-negative float."""
    v = eps.value if isinstance(eps, CertEpsilon) else float(eps)
    if v < 0:
        raise ConfigError(f"epsilon must be >= 0, got {v}")
    return v


@dataclass(frozen=True)
class CertVerdict:
    certified: bool
    predicted_label: int
    logit_bounds: IntervalBox
    cert_loss: float


# ---------------------------------------------------------------------------
# construction and concretization


def from_linf_ball(x, eps, clip: tuple[float, float] | None = (0.0, 1.0)) -> Zonotope:
    """Axis-aligned box around x (flattened row-major), one symbol per dim.

    With `clip`, the ball is intersected with the [lo, hi] value domain
    first; centers and half-widths are adjusted accordingly.
    """
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise InputError("empty input")
    if not np.isfinite(flat).all():
        raise NumericError("non-finite input")
    e = eps_value(eps)
    lo_b, hi_b = flat - e, flat + e
    if clip is not None:
        lo, hi = float(clip[0]), float(clip[1])
        if lo > hi:
            raise ConfigError(f"clip range {clip} is empty")
        lo_b = np.clip(lo_b, lo, hi)
        hi_b = np.clip(hi_b, lo, hi)
    center = (lo_b + hi_b) / 2.0
    half = (hi_b - lo_b) / 2.0
    gens = np.zeros((flat.size, flat.size))
    np.fill_diagonal(gens, half)
    return Zonotope(center, gens)


def bounds(z: Zonotope) -> IntervalBox:
    r = np.abs(z.generators).sum(axis=1)
    return IntervalBox(lower=z.center - r, upper=z.center + r)


def instantiate(z: Zonotope, eps_values) -> np.ndarray:
    """Concrete point for a specific assignment of the noise symbols."""
    v = np.asarray(eps_values, dtype=np.float64).reshape(-1)
    if v.shape[0] != z.num_symbols:
        raise InputError(f"expected {z.num_symbols} symbol values, got {v.shape[0]}")
    if v.size and (v.min() < -1.0 or v.max() > 1.0):
        raise InputError("symbol values must lie in [-1, 1]")
    return z.center + z.generators @ v


# ---------------------------------------------------------------------------
# abstract transformers


def affine(z: Zonotope, W, b) -> Zonotope:
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if W.ndim != 2 or W.shape[1] != z.dim or W.shape[0] != b.shape[0]:
        raise InputError(f"affine shapes W {W.shape}, b {b.shape} vs dim {z.dim}")
    return Zonotope(W @ z.center + b, W @ z.generators)


def conv2d_abs(z: Zonotope, layer: nn.Conv2D, input_shape: tuple[int, int, int]) -> Zonotope:
    """Convolution applied to center and every generator column.

    Equivalent to `affine` with the unrolled convolution matrix; the
    batched path just avoids materializing that matrix.
    """
    c, h, w = input_shape
    if z.dim != c * h * w:
        raise InputError(f"zonotope dim {z.dim} does not match input shape {input_shape}")
    batch = np.concatenate([z.center[None, :], z.generators.T], axis=0)
    batch = batch.reshape(-1, c, h, w)
    out = nn._conv_forward(batch, layer.kernel, None, layer.stride)
    out = out.reshape(out.shape[0], -1)
    center = out[0] + np.repeat(layer.bias, out.shape[1] // layer.bias.shape[0])
    return Zonotope(center, out[1:].T)


def relu_deepzono(z: Zonotope) -> Zonotope:
    """ReLU transformer; exact bounds decide stable vs crossing dimensions.

    Dimensions with l >= 0 pass through, u <= 0 are zeroed, the rest get
    the crossing relaxation with one fresh symbol each, appended in
    ascending dimension order.
    """
    box = bounds(z)
    l, u = box.lower, box.upper
    passthru = l >= 0.0
    zeroed = (~passthru) & (u <= 0.0)
    crossing = ~(passthru | zeroed)
    center = z.center.copy()
    gens = z.generators.copy()
    center[zeroed] = 0.0
    gens[zeroed, :] = 0.0
    cross_idx = np.flatnonzero(crossing)
    if cross_idx.size:
        lc, uc = l[cross_idx], u[cross_idx]
        lam = uc / (uc - lc)
        mu = -lam * lc / 2.0
        center[cross_idx] = lam * center[cross_idx] + mu
        gens[cross_idx, :] *= lam[:, None]
        fresh = np.zeros((z.dim, cross_idx.size))
        fresh[cross_idx, np.arange(cross_idx.size)] = mu
        gens = np.concatenate([gens, fresh], axis=1)
    return Zonotope(center, gens)


def propagate(model: nn.Model, z: Zonotope) -> Zonotope:
    """Push an input zonotope through every layer to the logits."""
    if z.dim != int(np.prod(model.input_shape)):
        raise InputError(
            f"zonotope dim {z.dim} does not match model input {model.input_shape}")
    cur = z
    for layer, shape in zip(model.layers, model.layer_input_shapes):
        if isinstance(layer, nn.Dense):
            cur = affine(cur, layer.W, layer.b)
        elif isinstance(layer, nn.Conv2D):
            cur = conv2d_abs(cur, layer, shape)
        else:
            cur = relu_deepzono(cur)
    return cur


# ---------------------------------------------------------------------------
# certification


def pairwise_diff_upper(z: Zonotope, q: int, y: int, *, naive_interval: bool = False) -> float:
    """Upper bound on logit_q - logit_y over the zonotope.

    The default exploits shared symbols: the bound is the difference of
    centers plus sum_i |g_qi - g_yi|.  With naive_interval=True the two
    dimensions are bounded independently first (upper_q - lower_y),
    which ignores correlation and can only be looser.
    """
    d = z.dim
    if not (0 <= q < d and 0 <= y < d):
        raise InputError(f"class indices ({q}, {y}) outside [0, {d})")
    if q == y:
        raise InputError("pairwise difference needs two distinct classes")
    if naive_interval:
        box = bounds(z)
        return float(box.upper[q] - box.lower[y])
    diff = z.generators[q, :] - z.generators[y, :]
    return float(z.center[q] - z.center[y] + np.abs(diff).sum())


def cert_loss(z: Zonotope, y: int, *, naive_interval: bool = False) -> float:
    """Hinge on the worst pairwise difference bound: 0 iff certifiably safe
    with margin, positive otherwise."""
    if not (0 <= y < z.dim):
        raise InputError(f"label {y} outside [0, {z.dim})")
    worst = max(
        pairwise_diff_upper(z, q, y, naive_interval=naive_interval)
        for q in range(z.dim) if q != y
    )
    return max(0.0, worst)


def certify(model: nn.Model, x, y: int, eps, *, clip: tuple[float, float] | None = (0.0, 1.0),
            naive_interval: bool = False) -> CertVerdict:
    """Certificate that every point in the (clipped) eps-ball keeps label y.

    Certification demands a strict margin: every competing class's
    difference bound must be negative.  Ties are not certified.
    """
    y = int(y)
    if not (0 <= y < model.num_classes):
        raise InputError(f"label {y} outside [0, {model.num_classes})")
    logits = nn.forward(model, np.asarray(x, dtype=np.float64))
    predicted = int(np.argmax(logits))
    z = propagate(model, from_linf_ball(np.asarray(x).reshape(-1), eps, clip))
    uppers = [pairwise_diff_upper(z, q, y, naive_interval=naive_interval)
              for q in range(model.num_classes) if q != y]
    worst = max(uppers)
    return CertVerdict(
        certified=bool(worst < 0.0),
        predicted_label=predicted,
        logit_bounds=bounds(z),
        cert_loss=max(0.0, worst),
    )


def certified_stats(model: nn.Model, data, eps, *, clip: tuple[float, float] | None = (0.0, 1.0),
                    naive_interval: bool = False, threads: int = 1) -> tuple[float, float]:
    """(certified accuracy, mean certifiable loss) over a dataset.

    A point counts toward certified accuracy when it is certified and
    the concrete prediction matches its label.  Reduction follows
    dataset order regardless of thread count.
    """
    xs, ys = nn.dataset_arrays(data)
    n = xs.shape[0]
    if n == 0:
        raise ConfigError("certified_stats over an empty dataset")

    def one(i: int) -> CertVerdict:
        return certify(model, xs[i], int(ys[i]), eps, clip=clip,
                       naive_interval=naive_interval)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            verdicts = list(pool.map(one, range(n)))
    else:
        verdicts = [one(i) for i in range(n)]
    hits = sum(1 for v, y in zip(verdicts, ys) if v.certified and v.predicted_label == int(y))
    mean_loss = float(np.mean([v.cert_loss for v in verdicts]))
    return hits / n, mean_loss


# ---------------------------------------------------------------------------
# gradients of the certifiable loss w.r.t. model parameters
#
# Propagation is piecewise affine in the parameters once the ReLU case
# split and the crossing coefficients (slope, offset) are frozen, so a
# subgradient step treats them as locally constant, uses sign for the
# |.| terms, and backpropagates through the affine structure only.


def _propagate_trace(model: nn.Model, z: Zonotope):
    cur_c = z.center.copy()
    cur_g = z.generators.copy()
    trace = []
    for layer, shape in zip(model.layers, model.layer_input_shapes):
        if isinstance(layer, nn.Dense):
            trace.append(("dense", layer, cur_c, cur_g))
            cur_c = layer.W @ cur_c + layer.b
            cur_g = layer.W @ cur_g
        elif isinstance(layer, nn.Conv2D):
            trace.append(("conv", layer, shape, cur_c, cur_g))
            batch = np.concatenate([cur_c[None, :], cur_g.T], axis=0).reshape(-1, *shape)
            out = nn._conv_forward(batch, layer.kernel, None, layer.stride)
            flat = out.reshape(out.shape[0], -1)
            reps = flat.shape[1] // layer.bias.shape[0]
            cur_c = flat[0] + np.repeat(layer.bias, reps)
            cur_g = flat[1:].T
        else:
            r = np.abs(cur_g).sum(axis=1)
            l, u = cur_c - r, cur_c + r
            passthru = l >= 0.0
            zeroed = (~passthru) & (u <= 0.0)
            crossing = ~(passthru | zeroed)
            cross_idx = np.flatnonzero(crossing)
            lam = np.ones(cur_c.shape[0])
            lam[zeroed] = 0.0
            n_sym_in = cur_g.shape[1]
            if cross_idx.size:
                lc, uc = l[cross_idx], u[cross_idx]
                lam_c = uc / (uc - lc)
                mu_c = -lam_c * lc / 2.0
                lam[cross_idx] = lam_c
                cur_c = lam * cur_c
                cur_c[cross_idx] += mu_c
                cur_g = lam[:, None] * cur_g
                fresh = np.zeros((cur_c.shape[0], cross_idx.size))
                fresh[cross_idx, np.arange(cross_idx.size)] = mu_c
                cur_g = np.concatenate([cur_g, fresh], axis=1)
            else:
                cur_c = lam * cur_c
                cur_g = lam[:, None] * cur_g
            trace.append(("relu", lam, n_sym_in))
    return Zonotope(cur_c, cur_g), trace


def cert_loss_grads(model: nn.Model, x, y: int, eps,
                    *, clip: tuple[float, float] | None = (0.0, 1.0)):
    """Certifiable loss at one point plus parameter subgradients.

    Returns (loss, worst_diff_upper, param_grads) where param_grads is
    aligned with model.layers like nn.backward's.  The hinge passes no
    gradient when the worst difference bound is negative.
    """
    y = int(y)
    if not (0 <= y < model.num_classes):
        raise InputError(f"label {y} outside [0, {model.num_classes})")
    z0 = from_linf_ball(np.asarray(x).reshape(-1), eps, clip)
    z_out, trace = _propagate_trace(model, z0)
    uppers = np.array([
        pairwise_diff_upper(z_out, q, y) if q != y else -np.inf
        for q in range(model.num_classes)
    ])
    q_star = int(np.argmax(uppers))
    worst = float(uppers[q_star])
    loss = max(0.0, worst)
    param_grads = [None] * len(model.layers)
    if worst <= 0.0:
        return loss, worst, param_grads

    dc = np.zeros(z_out.dim)
    dc[q_star] = 1.0
    dc[y] = -1.0
    dg = np.zeros_like(z_out.generators)
    s = np.sign(z_out.generators[q_star, :] - z_out.generators[y, :])
    dg[q_star, :] = s
    dg[y, :] = -s

    # trace entries are appended one per layer, so indices line up
    for i in range(len(model.layers) - 1, -1, -1):
        entry = trace[i]
        kind = entry[0]
        if kind == "dense":
            _, layer, c_in, g_in = entry
            param_grads[i] = {
                "W": np.outer(dc, c_in) + dg @ g_in.T,
                "b": dc.copy(),
            }
            dc = layer.W.T @ dc
            dg = layer.W.T @ dg
        elif kind == "conv":
            _, layer, shape, c_in, g_in = entry
            n_sym = g_in.shape[1]
            x_batch = np.concatenate([c_in[None, :], g_in.T], axis=0).reshape(-1, *shape)
            f = layer.kernel.shape[0]
            out_hw = dc.shape[0] // f
            d_batch = np.concatenate([dc[None, :], dg.T], axis=0)
            d_batch = d_batch.reshape(n_sym + 1, f, *_conv_out_hw(layer, shape))
            dk, _, dx = nn._conv_backward(x_batch, layer.kernel, layer.stride, d_batch)
            param_grads[i] = {
                "kernel": dk,
                "bias": dc.reshape(f, out_hw).sum(axis=1),
            }
            flat = dx.reshape(n_sym + 1, -1)
            dc = flat[0]
            dg = flat[1:].T
        else:
            _, lam, n_sym_in = entry
            dc = lam * dc
            dg = lam[:, None] * dg[:, :n_sym_in]
    return loss, worst, param_grads


def _conv_out_hw(layer: nn.Conv2D, input_shape) -> tuple[int, int]:
    _, h, w = input_shape
    kh, kw = layer.kernel.shape[2:]
    sh, sw = layer.stride
    return ((h - kh) // sh + 1, (w - kw) // sw + 1)
