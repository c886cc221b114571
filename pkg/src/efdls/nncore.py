"""Numerical core: 1-D conv / batch-norm / dense layers with exact reverse-mode
gradients, the Adam optimizer, and a finite-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects in float64 (float32 is accepted),
with series data laid out as ``[batch, channel, length]``. Every op here is a
pure function over the arrays it is given: layers own their parameter arrays,
forward functions return fresh outputs plus an explicit cache, and backward
functions turn (cache, upstream gradient) into parameter/input gradients
without touching shared state. That makes the whole module safe to drive from
parallel workers as long as each worker owns its own layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Array dimensions are inconsistent with what an op requires."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the math requires finite numbers."""


class GradientStateError(RuntimeError):
    """A backward pass was requested without a matching cached forward."""


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    """Same-padding 1-D convolution. Kernel is [C_out, C_in, K] with K odd."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 3:
            raise ShapeError(f"conv kernel must be 3-D [C_out, C_in, K], got shape {self.kernel.shape}")
        k = self.kernel.shape[2]
        if k % 2 == 0:
            raise ShapeError(f"conv kernel width must be odd for symmetric same-padding, got K={k}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match C_out={self.kernel.shape[0]}")

    @property
    def padding(self) -> int:
        """Symmetric zero padding that keeps the length axis unchanged."""
        return (self.kernel.shape[2] - 1) // 2


@dataclass
class BatchNormLayer:
    """Per-channel batch normalization over the batch and length axes.

    ``alpha`` scales and ``beta`` shifts the normalized value; ``zeta`` keeps
    the denominator positive. Two normalization modes exist:

    * standard (default): divide by sqrt(population variance + zeta), and
      track running mean/variance with ``momentum`` decay for inference.
    * literal: divide by (sqrt(summed squared deviations) + zeta). This form
      is batch-size dependent; it is kept behind a flag for fidelity
      experiments. Its tracked running statistic is the summed-squared
      deviation itself, so inference applies the same normalization the
      training mode used.
    """

    alpha: np.ndarray
    beta: np.ndarray
    zeta: float = 1e-5
    momentum: float = 0.9
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    literal_form: bool = False

    def __post_init__(self):
        if self.zeta <= 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        c = self.alpha.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=self.alpha.dtype)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=self.alpha.dtype)


@dataclass
class DenseLayer:
    """Fully-connected layer: weight [D_out, D_in], bias [D_out]."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense bias shape {self.bias.shape} does not match D_out={self.weight.shape[0]}")


def init_conv(c_out: int, c_in: int, k: int, rng: np.random.Generator, dtype=np.float64) -> ConvLayer:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] with fan_in = C_in*K."""
    bound = 1.0 / np.sqrt(c_in * k)
    kernel = rng.uniform(-bound, bound, size=(c_out, c_in, k)).astype(dtype)
    bias = rng.uniform(-bound, bound, size=c_out).astype(dtype)
    return ConvLayer(kernel, bias)


def init_batchnorm(c: int, zeta: float = 1e-5, momentum: float = 0.9,
                   literal_form: bool = False, dtype=np.float64) -> BatchNormLayer:
    return BatchNormLayer(
        alpha=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        zeta=zeta,
        momentum=momentum,
        literal_form=literal_form,
    )


def init_dense(d_out: int, d_in: int, rng: np.random.Generator, dtype=np.float64) -> DenseLayer:
    bound = 1.0 / np.sqrt(d_in)
    weight = rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype)
    bias = rng.uniform(-bound, bound, size=d_out).astype(dtype)
    return DenseLayer(weight, bias)


# ---------------------------------------------------------------------------
# Forward / backward ops
# ---------------------------------------------------------------------------

def conv1d_forward(x: np.ndarray, layer: ConvLayer, want_cache: bool = False):
    """Same-padding direct convolution of [B, C_in, L] -> [B, C_out, L].

    out[b, o, t] = sum_{c,k} kernel[o, c, k] * padded(x)[b, c, t + k] + bias[o]
    """
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [batch, channel, length], got shape {x.shape}")
    if x.shape[1] != layer.kernel.shape[1]:
        raise ShapeError(
            f"conv input channel axis has size {x.shape[1]} but kernel expects C_in={layer.kernel.shape[1]}"
        )
    if x.shape[2] < 1:
        raise ShapeError(f"conv input length axis must be >= 1, got {x.shape[2]}")
    k = layer.kernel.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    windows = sliding_window_view(xp, k, axis=2)  # [B, C_in, L, K]
    out = np.einsum("bclk,ock->bol", windows, layer.kernel, optimize=True)
    out += layer.bias[None, :, None]
    if want_cache:
        return out, (xp, x.shape)
    return out


def conv1d_backward(gout: np.ndarray, layer: ConvLayer, cache):
    """Gradients of the same-padding convolution.

    Returns (g_input, g_kernel, g_bias). g_input is the correlation of the
    zero-extended upstream gradient with the length-reversed kernel.
    """
    if cache is None:
        raise GradientStateError("conv1d_backward called without a cached forward")
    xp, x_shape = cache
    k = layer.kernel.shape[2]
    pad = (k - 1) // 2
    windows = sliding_window_view(xp, k, axis=2)
    g_kernel = np.einsum("bot,bctk->ock", gout, windows, optimize=True)
    g_bias = gout.sum(axis=(0, 2))
    gp = np.pad(gout, ((0, 0), (0, 0), (k - 1, k - 1)))
    gwin = sliding_window_view(gp, k, axis=2)  # [B, C_out, L+K-1, K]
    kflip = layer.kernel[:, :, ::-1]
    g_padded = np.einsum("bosk,ock->bcs", gwin, kflip, optimize=True)
    g_input = g_padded[:, :, pad:pad + x_shape[2]]
    return g_input, g_kernel, g_bias


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, training: bool,
                      update_running: bool | None = None, want_cache: bool = False):
    """Normalize per channel. Training mode uses batch statistics (and by
    default folds them into the running statistics); inference mode uses the
    running statistics only.

    Accepts [B, C, L] or [B, C] input; statistics reduce over every axis but
    the channel axis.
    """
    if x.ndim == 2:
        reduce_axes = (0,)
        expand = (slice(None), slice(None))
    elif x.ndim == 3:
        reduce_axes = (0, 2)
        expand = (None, slice(None), None)
    else:
        raise ShapeError(f"batchnorm input must be 2-D or 3-D, got shape {x.shape}")
    if x.shape[0] < 1 and training:
        raise ShapeError("batchnorm training mode requires a non-empty batch")
    if update_running is None:
        update_running = training

    alpha = layer.alpha[expand] if x.ndim == 3 else layer.alpha[None, :]
    beta = layer.beta[expand] if x.ndim == 3 else layer.beta[None, :]

    if training:
        n = x.shape[0] * (x.shape[2] if x.ndim == 3 else 1)
        # overflow here is converted into NumericError by the finiteness checks
        with np.errstate(over="ignore", invalid="ignore"):
            mu = x.mean(axis=reduce_axes)
            if not np.isfinite(mu).all():
                raise NumericError("non-finite batch statistics in batchnorm")
            centered = x - (mu[expand] if x.ndim == 3 else mu[None, :])
            if layer.literal_form:
                sumsq = np.sum(centered * centered, axis=reduce_axes)
                delta = np.sqrt(sumsq)
                denom = delta + layer.zeta
                out = alpha * centered / (denom[expand] if x.ndim == 3 else denom[None, :]) + beta
                stat = sumsq
                cache = ("literal", centered, delta, denom, n)
            else:
                var = np.mean(centered * centered, axis=reduce_axes)
                inv = 1.0 / np.sqrt(var + layer.zeta)
                xhat = centered * (inv[expand] if x.ndim == 3 else inv[None, :])
                out = alpha * xhat + beta
                stat = var
                cache = ("standard", xhat, inv, n)
        if not np.isfinite(stat).all():
            raise NumericError("non-finite batch statistics in batchnorm")
        if update_running:
            m = layer.momentum
            layer.running_mean = m * layer.running_mean + (1.0 - m) * mu
            layer.running_var = m * layer.running_var + (1.0 - m) * stat
    else:
        mu = layer.running_mean
        if layer.literal_form:
            denom = np.sqrt(layer.running_var) + layer.zeta
        else:
            denom = np.sqrt(layer.running_var + layer.zeta)
        scale = 1.0 / denom
        centered = x - (mu[expand] if x.ndim == 3 else mu[None, :])
        out = alpha * centered * (scale[expand] if x.ndim == 3 else scale[None, :]) + beta
        cache = ("inference", centered, scale)

    if want_cache:
        return out, cache
    return out


def batchnorm_backward(gout: np.ndarray, layer: BatchNormLayer, cache):
    """Gradients through training-mode batch normalization.

    Returns (g_input, g_alpha, g_beta). Both normalization modes are exact;
    the literal form uses

        dL/dx_k = alpha * [ (g_k - mean(g)) / D - c_k * sum(g*c) / (delta * D^2) ]

    with c the centered input, delta the root summed-squared deviation and
    D = delta + zeta.
    """
    if cache is None:
        raise GradientStateError("batchnorm_backward called without a cached forward")
    kind = cache[0]
    if gout.ndim == 3:
        reduce_axes = (0, 2)
        ex = (None, slice(None), None)

        def bc(v):
            return v[ex]
    else:
        reduce_axes = (0,)

        def bc(v):
            return v[None, :]

    alpha = bc(layer.alpha)
    g_beta = gout.sum(axis=reduce_axes)
    if kind == "standard":
        _, xhat, inv, n = cache
        g_alpha = np.sum(gout * xhat, axis=reduce_axes)
        gh = gout * alpha
        mean_gh = gh.mean(axis=reduce_axes)
        mean_gh_xhat = np.mean(gh * xhat, axis=reduce_axes)
        g_input = bc(inv) * (gh - bc(mean_gh) - xhat * bc(mean_gh_xhat))
    elif kind == "literal":
        _, centered, delta, denom, n = cache
        g_alpha = np.sum(gout * centered, axis=reduce_axes) / denom
        mean_g = gout.mean(axis=reduce_axes)
        s_gc = np.sum(gout * centered, axis=reduce_axes)
        delta_safe = np.maximum(delta, np.finfo(gout.dtype).tiny)
        g_input = alpha * (
            (gout - bc(mean_g)) / bc(denom)
            - centered * bc(s_gc / (delta_safe * denom * denom))
        )
    else:
        raise GradientStateError("batchnorm_backward needs a training-mode cache")
    return g_input, g_alpha, g_beta


def batchnorm_inference_backward(gout: np.ndarray, layer: BatchNormLayer, cache):
    """Gradients through inference-mode batch normalization, where the
    running statistics are constants: out = alpha * (x - rm) * scale + beta.

    Returns (g_input, g_alpha, g_beta)."""
    kind, centered, scale = cache
    if kind != "inference":
        raise GradientStateError("inference backward needs an inference-mode cache")
    if gout.ndim == 3:
        reduce_axes = (0, 2)
        g_input = gout * (layer.alpha * scale)[None, :, None]
        g_alpha = np.sum(gout * centered * scale[None, :, None], axis=reduce_axes)
    else:
        reduce_axes = (0,)
        g_input = gout * (layer.alpha * scale)[None, :]
        g_alpha = np.sum(gout * centered * scale[None, :], axis=reduce_axes)
    g_beta = gout.sum(axis=reduce_axes)
    return g_input, g_alpha, g_beta


def relu_forward(x: np.ndarray, want_cache: bool = False):
    out = np.maximum(x, 0.0)
    if want_cache:
        return out, (x > 0.0)
    return out


def relu_backward(gout: np.ndarray, cache) -> np.ndarray:
    return gout * cache


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the length axis: [B, C, L] -> [B, C]."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [batch, channel, length], got shape {x.shape}")
    if x.shape[2] == 0:
        raise ShapeError("global_avg_pool requires a non-empty length axis")
    return x.mean(axis=2)


def global_avg_pool_backward(gout: np.ndarray, length: int) -> np.ndarray:
    return np.repeat(gout[:, :, None], length, axis=2) / length


def dense_forward(x: np.ndarray, layer: DenseLayer, want_cache: bool = False):
    """[B, D_in] @ weight.T + bias -> [B, D_out]."""
    if x.ndim != 2:
        raise ShapeError(f"dense input must be 2-D [batch, features], got shape {x.shape}")
    if x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(
            f"dense input feature axis has size {x.shape[1]} but weight expects D_in={layer.weight.shape[1]}"
        )
    out = x @ layer.weight.T + layer.bias[None, :]
    if want_cache:
        return out, x
    return out


def dense_backward(gout: np.ndarray, layer: DenseLayer, cache):
    if cache is None:
        raise GradientStateError("dense_backward called without a cached forward")
    x = cache
    g_weight = gout.T @ x
    g_bias = gout.sum(axis=0)
    g_input = gout @ layer.weight
    return g_input, g_weight, g_bias


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam with L2 regularization folded into the gradient.

    The L2 term (``weight_decay * param``) is added to each gradient before
    the moment updates, matching optimizer-side L2 rather than decoupled
    weight decay.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update over a dict of named parameter arrays."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter group '{name}'")
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grads(model, x: np.ndarray, loss, epsilon: float = 1e-5,
                      max_entries_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> dict:
    """Central-difference gradients of ``loss.value(model.forward(x))`` with
    respect to every model parameter.

    ``model`` must expose ``parameters() -> dict[str, ndarray]`` (live views)
    and ``forward(x, training=..., update_running=...)``; ``loss`` must expose
    ``value(trace) -> float``. Forward passes run in training mode with
    running-statistic updates disabled so the model is left untouched.

    With ``max_entries_per_param`` set, only a random subset of entries per
    tensor is probed (the rest are returned as NaN and should be masked by the
    caller); this keeps wide production layers tractable.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    out = {}
    for name, p in model.parameters().items():
        g = np.full_like(p, np.nan)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        idx = np.arange(flat_p.size)
        if max_entries_per_param is not None and flat_p.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat_p.size, size=max_entries_per_param, replace=False)
        for i in idx:
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            plus = loss.value(model.forward(x, training=True, update_running=False))
            flat_p[i] = orig - epsilon
            minus = loss.value(model.forward(x, training=True, update_running=False))
            flat_p[i] = orig
            flat_g[i] = (plus - minus) / (2.0 * epsilon)
        out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict, denom_floor: float = 1e-5) -> float:
    """max over all compared entries of |a - n| / max(|a|, |n|, denom_floor).

    The floor absorbs central-difference noise (empirically up to ~2e-10
    absolute for unit-scale losses at double precision after a deep-net
    forward), which matters wherever the true gradient is at or near zero:
    a conv bias followed by batch norm is provably inert (the mean
    subtraction cancels it), and individual kernel entries can sit below
    1e-6, so both sides are noise-dominated there and a smaller floor would
    report spurious errors. Genuine defects above ~1e-9 absolute still
    register. NaN entries in ``numeric`` (unsampled positions) are skipped.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        mask = ~np.isnan(n)
        if not mask.any():
            continue
        av = a[mask]
        nv = n[mask]
        denom = np.maximum(np.maximum(np.abs(av), np.abs(nv)), denom_floor)
        worst = max(worst, float(np.max(np.abs(av - nv) / denom)))
    return worst


def _central_diff_entry(model, x, loss, param: np.ndarray, flat_index: int,
                        epsilon: float) -> float:
    flat = param.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + epsilon
    plus = loss.value(model.forward(x, training=True, update_running=False))
    flat[flat_index] = orig - epsilon
    minus = loss.value(model.forward(x, training=True, update_running=False))
    flat[flat_index] = orig
    return (plus - minus) / (2.0 * epsilon)


def finite_diff_gradcheck(model, x: np.ndarray, loss, epsilon: float = 1e-5,
                          max_entries_per_param: int | None = None,
                          rng: np.random.Generator | None = None,
                          refine_levels: int = 2, refine_threshold: float = 1e-4,
                          denom_floor: float = 1e-5) -> float:
    """Compare the model's analytic gradients against central differences and
    return the max relative error. ``loss`` additionally needs
    ``output_grads(trace) -> dict`` naming the trace fields it feeds gradient
    into (e.g. ``{"logits": ..., "o1": ...}``).

    The probe is multi-scale: entries disagreeing at the base epsilon are
    re-probed at epsilon/10 per refinement level and scored against their
    best-agreeing scale. A ReLU kink inside the base probe window shrinks
    away at smaller scales, while a genuinely wrong analytic gradient
    disagrees with the difference quotient at every scale, so refinement
    cannot mask real defects.
    """
    trace, cache = model.forward(x, training=True, update_running=False, want_cache=True)
    analytic = model.backward(cache, loss.output_grads(trace))
    numeric = finite_diff_grads(model, x, loss, epsilon=epsilon,
                                max_entries_per_param=max_entries_per_param, rng=rng)
    params = model.parameters()
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        flat_a = a.reshape(-1)
        flat_n = n.reshape(-1)
        for i in range(flat_a.size):
            if np.isnan(flat_n[i]):
                continue
            av, nv = flat_a[i], flat_n[i]
            err = abs(av - nv) / max(abs(av), abs(nv), denom_floor)
            level = 0
            eps = epsilon
            while err > refine_threshold and level < refine_levels:
                eps /= 10.0
                level += 1
                refined = _central_diff_entry(model, x, loss, params[name], i, eps)
                refined_err = abs(av - refined) / max(abs(av), abs(refined), denom_floor)
                err = min(err, refined_err)
            worst = max(worst, err)
    return worst
