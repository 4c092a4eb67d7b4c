"""Adaptive denoising bank and the learned per-window filter selector.

Three scalar denoisers (constant-state Kalman, truncated Gaussian, exponential
low-pass) plus a small network that maps window context (RSSI variance, scan
age, step rate, modality presence) to a distribution over the three filters
and their coefficients.  At inference the argmax filter runs; during training
a soft mixture of all three keeps the selection differentiable, and each
filter carries analytic derivatives w.r.t. its own coefficient so gradients
reach the selector parameters.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .config import FilterConfig
from .mlp import TwoLayerNet, grads_add, grads_scale, grads_zeros_like, sigmoid, softmax, softmax_backward
from .serialize import dump_tensors, parse_tensors

FILTER_ORDER = ("kalman", "gaussian", "elp")
CONTEXT_DIM = 8  # rssi_variance, scan_age, step_rate, presence x5


# ---------------------------------------------------------------------------
# the three denoisers
# ---------------------------------------------------------------------------


def apply_kalman(series, q: float, r: float, init_mean: float = 0.0,
                 init_var: float = 1.0) -> np.ndarray:
    """Scalar random-walk Kalman smoother.

    Predict: variance += q.  Update: gain = var / (var + r).  The state is
    the signal level itself, so the output is the filtered estimate per step.
    """
    if r <= 0.0:
        raise ValueError("kalman measurement variance r must be > 0")
    if q < 0.0:
        raise ValueError("kalman process variance q must be >= 0")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("series must be nonempty")
    out = np.empty_like(x)
    mean, var = float(init_mean), float(init_var)
    for i, xi in enumerate(x):
        var = var + q
        gain = var / (var + r)
        mean = mean + gain * (xi - mean)
        var = (1.0 - gain) * var
        out[i] = mean
    return out


def _gaussian_kernel(sigma: float):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    offsets = np.arange(-radius, radius + 1)
    weights = np.exp(-(offsets.astype(float) ** 2) / (2.0 * sigma * sigma))
    return offsets, weights


def apply_gaussian(series, sigma: float) -> np.ndarray:
    """Convolve with a +-3 sigma truncated Gaussian, renormalized at the edges."""
    if sigma <= 0.0:
        raise ValueError("gaussian sigma must be > 0")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("series must be nonempty")
    offsets, weights = _gaussian_kernel(sigma)
    num = np.zeros_like(x)
    den = np.zeros_like(x)
    n = x.size
    for off, w in zip(offsets, weights):
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo >= hi:
            continue
        num[lo:hi] += w * x[lo + off:hi + off]
        den[lo:hi] += w
    return num / den


def apply_elp(series, alpha: float) -> np.ndarray:
    """Exponential low-pass: y0 = x0; yi = alpha*xi + (1-alpha)*y(i-1)."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("elp alpha must lie in (0, 1]")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("series must be nonempty")
    out = np.empty_like(x)
    out[0] = x[0]
    for i in range(1, x.size):
        out[i] = alpha * x[i] + (1.0 - alpha) * out[i - 1]
    return out


# ---------------------------------------------------------------------------
# context, choice, selector
# ---------------------------------------------------------------------------


@dataclass
class FilterContext:
    """Window context the selector conditions on."""

    rssi_variance: float = 0.0
    scan_age: float = 0.0
    step_rate: float = 0.0
    presence: tuple = (True, True, True, True, True)

    def __post_init__(self):
        for v in (self.rssi_variance, self.scan_age, self.step_rate):
            if not math.isfinite(v) or v < 0.0:
                raise ValueError("context fields must be finite and nonnegative")

    def features(self) -> np.ndarray:
        pres = [1.0 if p else 0.0 for p in self.presence]
        return np.array([self.rssi_variance, self.scan_age, self.step_rate] + pres)


@dataclass
class FilterChoice:
    """Distribution over the bank plus one coefficient set per filter."""

    weights: np.ndarray
    q: float
    r: float
    sigma: float
    alpha: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (3,):
            raise ValueError("weights must be a 3-vector over (kalman, gaussian, elp)")
        if np.any(self.weights < 0.0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.r <= 0.0 or self.q < 0.0 or self.sigma <= 0.0 or not 0.0 < self.alpha <= 1.0:
            raise ValueError("filter coefficients out of range")

    def hard_kind(self) -> str:
        # ties break by the documented order kalman < gaussian < elp
        return FILTER_ORDER[int(np.argmax(self.weights))]


@dataclass
class SelectorModel:
    """Two-layer map from context to 3 filter logits + 4 raw coefficients."""

    net: TwoLayerNet
    cfg: FilterConfig = field(default_factory=FilterConfig)

    @classmethod
    def from_seed(cls, seed: int, cfg: FilterConfig | None = None) -> "SelectorModel":
        cfg = cfg or FilterConfig()
        return cls(TwoLayerNet.from_seed(CONTEXT_DIM, cfg.hidden, 7, seed), cfg)

    @classmethod
    def zeros(cls, cfg: FilterConfig | None = None) -> "SelectorModel":
        cfg = cfg or FilterConfig()
        return cls(TwoLayerNet.zeros(CONTEXT_DIM, cfg.hidden, 7), cfg)

    def serialize(self) -> str:
        return dump_tensors(self.net.tensors("selector."))

    @classmethod
    def deserialize(cls, text: str, cfg: FilterConfig | None = None) -> "SelectorModel":
        return cls(TwoLayerNet.from_tensors(parse_tensors(text), "selector."),
                   cfg or FilterConfig())


def _squash(raw: np.ndarray, cfg: FilterConfig):
    """Map 4 raw outputs into the legal (q, r, sigma, alpha) boxes."""
    s = sigmoid(raw)
    ranges = (cfg.q_range, cfg.r_range, cfg.sigma_range, cfg.alpha_range)
    vals = np.array([lo + (hi - lo) * si for (lo, hi), si in zip(ranges, s)])
    # d(value)/d(raw) for the backward pass
    dvals = np.array([(hi - lo) * si * (1.0 - si) for (lo, hi), si in zip(ranges, s)])
    return vals, dvals


def select_filter(model: SelectorModel, ctx: FilterContext) -> FilterChoice:
    """Deterministic map (model, context) -> FilterChoice."""
    out, _ = model.net.forward(ctx.features())
    weights = softmax(out[:3])
    (q, r, sigma, alpha), _ = _squash(out[3:], model.cfg)
    return FilterChoice(weights, q, r, sigma, alpha)


def _apply_named(kind: str, choice: FilterChoice, series) -> np.ndarray:
    if kind == "kalman":
        return apply_kalman(series, choice.q, choice.r,
                            init_mean=float(np.asarray(series, dtype=float)[0]),
                            init_var=1.0)
    if kind == "gaussian":
        return apply_gaussian(series, choice.sigma)
    return apply_elp(series, choice.alpha)


def denoise(choice: FilterChoice, series) -> np.ndarray:
    """Hard selection at inference: run the argmax-weight filter."""
    return _apply_named(choice.hard_kind(), choice, series)


def denoise_matrix(choice: FilterChoice, arr: np.ndarray) -> np.ndarray:
    """Apply the hard-selected filter down each column of (T, F)."""
    arr = np.asarray(arr, dtype=float)
    out = np.empty_like(arr)
    for j in range(arr.shape[1]):
        out[:, j] = denoise(choice, arr[:, j])
    return out


# ---------------------------------------------------------------------------
# differentiable (training-mode) path
# ---------------------------------------------------------------------------


def _kalman_with_sens(x: np.ndarray, q: float, r: float):
    """Kalman output plus d(out)/dq and d(out)/dr, via forward sensitivities."""
    n = x.size
    out = np.empty(n)
    dq_out = np.empty(n)
    dr_out = np.empty(n)
    mean, var = float(x[0]), 1.0
    dmean_q = dvar_q = 0.0
    dmean_r = dvar_r = 0.0
    for i in range(n):
        var_p = var + q
        dvar_pq = dvar_q + 1.0
        dvar_pr = dvar_r
        denom = var_p + r
        gain = var_p / denom
        dgain_q = (dvar_pq * denom - var_p * dvar_pq) / (denom * denom)
        dgain_r = (dvar_pr * denom - var_p * (dvar_pr + 1.0)) / (denom * denom)
        resid = x[i] - mean
        new_mean = mean + gain * resid
        dmean_q = dmean_q + dgain_q * resid - gain * dmean_q
        dmean_r = dmean_r + dgain_r * resid - gain * dmean_r
        mean = new_mean
        var = (1.0 - gain) * var_p
        dvar_q = -dgain_q * var_p + (1.0 - gain) * dvar_pq
        dvar_r = -dgain_r * var_p + (1.0 - gain) * dvar_pr
        out[i] = mean
        dq_out[i] = dmean_q
        dr_out[i] = dmean_r
    return out, dq_out, dr_out


def _gaussian_with_sens(x: np.ndarray, sigma: float):
    """Gaussian smoothing plus d(out)/dsigma (kernel radius held fixed)."""
    offsets, weights = _gaussian_kernel(sigma)
    dweights = weights * (offsets.astype(float) ** 2) / sigma ** 3
    n = x.size
    num = np.zeros(n); den = np.zeros(n)
    dnum = np.zeros(n); dden = np.zeros(n)
    for off, w, dw in zip(offsets, weights, dweights):
        lo = max(0, -off)
        hi = min(n, n - off)
        if lo >= hi:
            continue
        seg = x[lo + off:hi + off]
        num[lo:hi] += w * seg
        dnum[lo:hi] += dw * seg
        den[lo:hi] += w
        dden[lo:hi] += dw
    out = num / den
    dsig = (dnum * den - num * dden) / (den * den)
    return out, dsig


def _elp_with_sens(x: np.ndarray, alpha: float):
    n = x.size
    out = np.empty(n)
    dal = np.empty(n)
    out[0] = x[0]
    dal[0] = 0.0
    for i in range(1, n):
        out[i] = alpha * x[i] + (1.0 - alpha) * out[i - 1]
        dal[i] = (x[i] - out[i - 1]) + (1.0 - alpha) * dal[i - 1]
    return out, dal


def soft_denoise_matrix(choice: FilterChoice, arr: np.ndarray):
    """Weighted mixture of the three filters down each column of (T, F).

    Returns (filtered, cache); the cache feeds ``soft_denoise_backward``.
    Equals the hard path exactly when one weight is 1.
    """
    arr = np.asarray(arr, dtype=float)
    T, F = arr.shape
    outs = np.empty((3, T, F))
    sens = np.zeros((4, T, F))  # d(out)/d(q, r, sigma, alpha) of the mixture
    for j in range(F):
        col = arr[:, j]
        yk, dq, dr = _kalman_with_sens(col, choice.q, choice.r)
        yg, ds = _gaussian_with_sens(col, choice.sigma)
        ye, da = _elp_with_sens(col, choice.alpha)
        outs[0, :, j] = yk
        outs[1, :, j] = yg
        outs[2, :, j] = ye
        sens[0, :, j] = choice.weights[0] * dq
        sens[1, :, j] = choice.weights[0] * dr
        sens[2, :, j] = choice.weights[1] * ds
        sens[3, :, j] = choice.weights[2] * da
    mixed = np.tensordot(choice.weights, outs, axes=(0, 0))
    return mixed, (outs, sens)


def soft_denoise_backward(cache, dout: np.ndarray):
    """Backprop through the mixture: d(loss)/dweights (3,), d/d(q,r,sig,al) (4,)."""
    outs, sens = cache
    dweights = np.tensordot(outs, dout, axes=((1, 2), (0, 1)))
    dparams = np.tensordot(sens, dout, axes=((1, 2), (0, 1)))
    return dweights, dparams


def selector_forward_training(model: SelectorModel, ctx: FilterContext):
    """Forward pass retaining caches so gradients can reach the parameters."""
    feats = ctx.features()
    out, net_cache = model.net.forward(feats)
    weights = softmax(out[:3])
    params, dparams_draw = _squash(out[3:], model.cfg)
    choice = FilterChoice(weights, *params)
    return choice, (net_cache, weights, dparams_draw)


def selector_backward(model: SelectorModel, cache, dweights, dparams):
    """Map mixture gradients back to selector parameter gradients."""
    net_cache, weights, dparams_draw = cache
    dout = np.empty(7)
    dout[:3] = softmax_backward(weights, dweights)
    dout[3:] = dparams * dparams_draw
    grads, _ = model.net.backward(net_cache, dout)
    return grads


def train_selector(model: SelectorModel, paired_batches, alignment_loss_fn,
                   epochs: int = 1, step_size: float = 0.05) -> SelectorModel:
    """Gradient descent on an alignment margin loss through the soft mixture.

    ``paired_batches`` is a list of items ``(ctx, pos_pair, neg_pairs)`` where
    each pair is ``(query_feats, query_present, proto_feats, proto_present)``.
    ``alignment_loss_fn(filtered_items) -> (loss, feature_grads)`` must return
    the gradient of the loss w.r.t. every filtered feature array it was given,
    in the same structure.  Returns a new model; the input is untouched.
    """
    if not paired_batches:
        raise ValueError("empty training batch")
    net = model.net.copy()
    current = SelectorModel(net, model.cfg)
    for _ in range(max(0, epochs)):
        acc = grads_zeros_like(net)
        total = 0.0
        for ctx, pos_pair, neg_pairs in paired_batches:
            choice, sel_cache = selector_forward_training(current, ctx)
            # filter every array once, remembering its mixture cache
            filtered, caches = [], []
            for pair in [pos_pair] + list(neg_pairs):
                fq, cq = soft_denoise_matrix(choice, pair[0])
                fp, cp = soft_denoise_matrix(choice, pair[2])
                filtered.append((fq, pair[1], fp, pair[3]))
                caches.append((cq, cp))
            loss, fgrads = alignment_loss_fn(filtered[0], filtered[1:])
            total += loss
            dweights = np.zeros(3)
            dparams = np.zeros(4)
            for (gq, gp), (cq, cp) in zip(fgrads, caches):
                for grad, cache in ((gq, cq), (gp, cp)):
                    if grad is None:
                        continue
                    dw, dp = soft_denoise_backward(cache, grad)
                    dweights += dw
                    dparams += dp
            grads_add(acc, selector_backward(current, sel_cache, dweights, dparams))
        if not math.isfinite(total):
            raise FloatingPointError("selector training loss is not finite")
        current = SelectorModel(current.net.step(grads_scale(acc, 1.0 / len(paired_batches)),
                                                 step_size), current.cfg)
    return current
