"""Layer primitives with hand-written backward passes, Adam, and a gradient checker.

Arrays are plain numpy arrays. Every ``*_forward`` returns ``(out, ctx)``; the
matching ``*_backward(ctx, dout)`` returns the gradient w.r.t. the input and
accumulates parameter gradients into the ``ParamTensor.grad`` buffers.

Layouts used throughout:

* convolution / batch-norm / pooling inputs are ``(N, maps, H, T)`` where ``H``
  is a spatial axis (EEG channels before the depthwise layer, 1 after it);
* dense inputs are ``(N, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sp_fft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ParamTensor:
    """A trainable array together with its gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    adam_t: int = 0

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        for buf in (self.grad, self.adam_m, self.adam_v):
            if buf.shape != self.value.shape:
                raise DimensionError(f"{self.name}: buffer shape {buf.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> "ParamTensor":
        return ParamTensor(self.name, self.value.astype(dtype), self.grad.astype(dtype),
                           self.adam_m.astype(dtype), self.adam_v.astype(dtype), self.adam_t)

    def copy(self) -> "ParamTensor":
        return self.astype(self.value.dtype)


@dataclass
class BatchNormStats:
    """Running per-map mean/variance used in inference mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, n_maps, dtype=np.float64):
        return cls(np.zeros(n_maps, dtype=dtype), np.ones(n_maps, dtype=dtype))

    def update(self, batch_mean, batch_var, count):
        unbiased = batch_var * (count / max(count - 1, 1))
        self.mean *= self.momentum
        self.mean += (1.0 - self.momentum) * batch_mean
        self.var *= self.momentum
        self.var += (1.0 - self.momentum) * unbiased

    def copy(self):
        return BatchNormStats(self.mean.copy(), self.var.copy(), self.momentum)


@dataclass
class LayerCtx:
    """Forward intermediates for one backward call."""

    op: str
    saved: dict = field(default_factory=dict)
    consumed: bool = False

    def take(self, op):
        if self.op != op:
            raise UsageError(f"context from {self.op!r} passed to {op} backward")
        if self.consumed:
            raise UsageError(f"{op} backward called twice on the same forward context")
        self.consumed = True
        return self.saved


def _as_array(w):
    return w.value if isinstance(w, ParamTensor) else w


def _accumulate(w, g):
    if isinstance(w, ParamTensor):
        w.grad += g.reshape(w.grad.shape)


def same_padding(k):
    """Left/right zero padding that keeps the time extent for kernel width ``k``."""
    left = (k - 1) // 2
    return left, k - 1 - left


# --------------------------------------------------------------------------- conv


def conv1d_forward(x, kernels, need_input_grad=True):
    """Temporal convolution along the last axis with "same" padding and no bias.

    ``x`` is ``(N, Cin, H, T)`` (or ``(N, Cin, T)``), ``kernels`` is
    ``(Cout, Cin, K)``. The ``H`` axis is carried through untouched, so a
    ``(N, 1, C, T)`` input gets the same filters applied to every channel.
    """
    w = _as_array(kernels)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[:, :, None, :]
    if x.ndim != 4:
        raise DimensionError(f"conv1d expects a 3-d or 4-d input, got shape {x.shape}", axis=None)
    if w.ndim != 3:
        raise DimensionError(f"conv1d kernels must be (Cout, Cin, K), got {w.shape}", axis=None)
    cout, cin, k = w.shape
    if x.shape[1] != cin:
        raise DimensionError(f"conv1d input-map axis (1) has {x.shape[1]} maps, kernels expect {cin}", axis=1)
    t = x.shape[-1]
    if k > t:
        raise DimensionError(f"conv1d kernel width {k} exceeds time axis (3) extent {t}", axis=3)
    left, right = same_padding(k)
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (left, right)))
    patches = sliding_window_view(xp, k, axis=-1)  # (N, Cin, H, T, K)
    out = np.tensordot(patches, w, axes=([1, 4], [1, 2]))  # (N, H, T, Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    ctx = LayerCtx("conv1d", dict(patches=patches, kernels=kernels, squeeze=squeeze,
                                  pad=(left, right), need_input_grad=need_input_grad))
    return (out[:, :, 0, :] if squeeze else out), ctx


def conv1d_backward(ctx, dout):
    s = ctx.take("conv1d")
    kernels = s["kernels"]
    w = _as_array(kernels)
    if s["squeeze"]:
        dout = dout[:, :, None, :]
    dw = np.tensordot(dout, s["patches"], axes=([0, 2, 3], [0, 2, 3]))  # (Cout, Cin, K)
    _accumulate(kernels, dw)
    if not s["need_input_grad"]:
        return None
    k = w.shape[2]
    left, _ = s["pad"]
    t = dout.shape[-1]
    dpad = np.pad(dout, ((0, 0), (0, 0), (0, 0), (k - 1, k - 1)))
    win = sliding_window_view(dpad, k, axis=-1)  # (N, Cout, H, T+K-1, K)
    dxp = np.tensordot(win, w[:, :, ::-1], axes=([1, 4], [0, 2]))  # (N, H, T+K-1, Cin)
    dx = np.ascontiguousarray(dxp[:, :, left:left + t, :].transpose(0, 3, 1, 2))
    return dx[:, :, 0, :] if s["squeeze"] else dx


# ---------------------------------------------------------------------- depthwise


def _depthwise_weights(kernels, n_maps):
    w = _as_array(kernels)
    if w.ndim == 2:
        if w.shape[0] % n_maps:
            raise DimensionError(f"depthwise kernels {w.shape} not divisible into {n_maps} input maps", axis=0)
        w = w.reshape(n_maps, w.shape[0] // n_maps, w.shape[1])
    if w.ndim != 3 or w.shape[0] != n_maps:
        raise DimensionError(f"depthwise kernels must be (F, D, C) with F={n_maps}, got {w.shape}", axis=0)
    return w


def depthwise_spatial_forward(x, kernels):
    """Full-height spatial filter per input map with depth multiplier ``D``.

    ``x`` is ``(N, F, C, T)``; ``kernels`` is ``(F, D, C)`` or the flattened
    ``(F*D, C)``. Output map ``f*D + d`` only sees input map ``f``; the spatial
    axis collapses to 1.
    """
    n, f, c, t = x.shape
    w = _depthwise_weights(kernels, f)
    if w.shape[2] != c:
        raise DimensionError(f"depthwise kernel height {w.shape[2]} != channel axis (2) extent {c}", axis=2)
    out = np.einsum("nfct,fdc->nfdt", x, w, optimize=True).reshape(n, f * w.shape[1], 1, t)
    return out, LayerCtx("depthwise", dict(x=x, kernels=kernels))


def depthwise_spatial_backward(ctx, dout):
    s = ctx.take("depthwise")
    x, kernels = s["x"], s["kernels"]
    n, f, c, t = x.shape
    w = _depthwise_weights(kernels, f)
    g = dout.reshape(n, f, w.shape[1], t)
    _accumulate(kernels, np.einsum("nfdt,nfct->fdc", g, x, optimize=True))
    return np.einsum("nfdt,fdc->nfct", g, w, optimize=True)


# ---------------------------------------------------------------------- batchnorm


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def batchnorm_forward(x, gamma, beta, stats: BatchNormStats, train, eps=BN_EPS):
    """Per-map normalization over every axis except axis 1."""
    axes = _bn_axes(x)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    g = _as_array(gamma)
    b = _as_array(beta)
    if g.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm gamma {g.shape} does not match map axis (1) extent {x.shape[1]}", axis=1)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        stats.update(mean, var, x.size // x.shape[1])
    else:
        mean = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * g.reshape(bshape) + b.reshape(bshape)
    return out, LayerCtx("batchnorm", dict(xhat=xhat, inv_std=inv_std, gamma=gamma, beta=beta, train=train))


def batchnorm_backward(ctx, dout):
    s = ctx.take("batchnorm")
    xhat, inv_std = s["xhat"], s["inv_std"]
    axes = _bn_axes(dout)
    bshape = (1, -1) + (1,) * (dout.ndim - 2)
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    _accumulate(s["beta"], dbeta)
    _accumulate(s["gamma"], dgamma)
    g = _as_array(s["gamma"])
    dxhat = dout * g.reshape(bshape)
    if not s["train"]:
        return dxhat * inv_std.reshape(bshape)
    m = dout.size // dout.shape[1]
    # batch statistics couple every element of a map
    sum_d = dxhat.sum(axis=axes).reshape(bshape)
    sum_dx = (dxhat * xhat).sum(axis=axes).reshape(bshape)
    return inv_std.reshape(bshape) * (dxhat - sum_d / m - xhat * sum_dx / m)


# ------------------------------------------------------------- simple elementwise


def relu_forward(x):
    return np.maximum(x, 0), LayerCtx("relu", dict(mask=x > 0))


def relu_backward(ctx, dout):
    return dout * ctx.take("relu")["mask"]


def avgpool_forward(x, width):
    """Non-overlapping mean pooling along the last axis."""
    t = x.shape[-1]
    if t % width:
        raise ConfigError(f"pool width {width} does not divide time extent {t}")
    out = x.reshape(x.shape[:-1] + (t // width, width)).mean(axis=-1)
    return out, LayerCtx("avgpool", dict(width=width))


def avgpool_backward(ctx, dout):
    width = ctx.take("avgpool")["width"]
    return np.repeat(dout / width, width, axis=-1)


def dropout_mask(shape, p, rng, dtype=np.float64):
    """Inverted-dropout mask: kept units scaled by 1/(1-p)."""
    if p <= 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) * dtype(1.0 / (1.0 - p))


def dropout_forward(x, p, train, rng=None, mask=None):
    if not train or (p <= 0 and mask is None):
        return x, LayerCtx("dropout", dict(mask=None))
    if mask is None:
        mask = dropout_mask(x.shape, p, rng, x.dtype.type)
    return x * mask, LayerCtx("dropout", dict(mask=mask))


def dropout_backward(ctx, dout):
    mask = ctx.take("dropout")["mask"]
    return dout if mask is None else dout * mask


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), LayerCtx("flatten", dict(shape=x.shape))


def flatten_backward(ctx, dout):
    return dout.reshape(ctx.take("flatten")["shape"])


def dense_forward(x, weights):
    w = _as_array(weights)
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense input {x.shape} does not match weights {w.shape} on axis 1", axis=1)
    return x @ w, LayerCtx("dense", dict(x=x, weights=weights))


def dense_backward(ctx, dout):
    s = ctx.take("dense")
    _accumulate(s["weights"], s["x"].T @ dout)
    return dout @ _as_array(s["weights"]).T


# ------------------------------------------------------------------------ losses


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch axis (0) extent {n}", axis=0)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()
    dlogits = np.exp(logp)
    dlogits[idx, labels] -= 1
    dlogits /= n
    return float(max(loss, 0.0)), dlogits


# -------------------------------------------------------------------------- adam


def adam_step(param: ParamTensor, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update in place. The gradient is left untouched."""
    g = param.grad
    param.adam_t += 1
    t = param.adam_t
    param.adam_m *= beta1
    param.adam_m += (1 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1 - beta2) * (g * g)
    m_hat = param.adam_m / (1 - beta1 ** t)
    v_hat = param.adam_v / (1 - beta2 ** t)
    param.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.value.dtype)


# -------------------------------------------------------------- gradient checking


def grad_check(forward, backward, x, params=(), step=1e-5, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    ``forward(x) -> (out, ctx)`` and ``backward(ctx, dout) -> dx`` describe the
    layer (or whole network). The scalar being differentiated is
    ``sum(out * R)`` for a fixed random ``R``, which exercises every output.
    ``x`` may be ``None`` for parameter-only checks. Run at float64.
    """
    rng = np.random.default_rng(seed)
    out, ctx = forward(x)
    proj = rng.standard_normal(np.shape(out))
    for p in params:
        p.zero_grad()
    dx = backward(ctx, proj)
    analytic = [] if x is None or dx is None else [(x, np.array(dx, dtype=np.float64))]
    analytic += [(p.value, p.grad.copy()) for p in params]

    def objective():
        return float(np.sum(forward(x)[0] * proj))

    worst = 0.0
    for arr, grad in analytic:
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ------------------------------------------------ fused temporal conv + BN + depthwise


def temporal_bn_depthwise_forward(x, tconv, gamma, beta, stats, dwconv, train, eps=BN_EPS):
    """``depthwise(batchnorm(conv1d(x)))`` computed without the (N, F, C, T) tensor.

    ``x`` is ``(N, C, T)``, ``tconv`` is ``(F, 1, K)``, ``dwconv`` is ``(F*D, C)``.
    Both convolutions are linear and act on different axes, so spatial filtering
    is done first on the padded input and the temporal kernel is applied to
    ``F*D`` traces instead of ``F*C``. The batch-norm statistics of the skipped
    intermediate come from the patch mean vector and the patch Gram matrix.
    Output matches the layered composition up to rounding.
    """
    k_arr = _as_array(tconv)
    w_arr = _as_array(dwconv)
    n, c, t = x.shape
    f, cin, k = k_arr.shape
    if cin != 1:
        raise DimensionError(f"fused block expects single-input temporal kernels, got {k_arr.shape}", axis=1)
    if w_arr.shape[1] != c:
        raise DimensionError(f"depthwise kernel height {w_arr.shape[1]} != channel axis (1) extent {c}", axis=1)
    if k > t:
        raise DimensionError(f"temporal kernel width {k} exceeds time axis (2) extent {t}", axis=2)
    n_out = w_arr.shape[0]
    depth = n_out // f
    kern = k_arr[:, 0, :]  # (F, K)
    owner = np.repeat(np.arange(f), depth)  # input map feeding each output map
    left, right = same_padding(k)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))  # (N, C, T+K-1)

    nfft = sp_fft.next_fast_len(t + k - 1, real=True)
    z = np.matmul(w_arr, xp)  # (N, O, T+K-1)
    z_f = sp_fft.rfft(z, nfft, axis=-1)
    k_f = sp_fft.rfft(kern[owner][:, ::-1], nfft, axis=-1)
    u = sp_fft.irfft(z_f * k_f, nfft, axis=-1)[..., k - 1:k - 1 + t].astype(x.dtype)
    s_sum = w_arr.sum(axis=1)  # (O,)

    saved = dict(tconv=tconv, gamma=gamma, beta=beta, dwconv=dwconv, train=train,
                 xp=xp, z_f=z_f, nfft=nfft, u=u, owner=owner, shape=(n, c, t))
    count = n * c * t
    if train:
        colsum = xp.sum(axis=(0, 1))
        csum = np.concatenate([[0.0], np.cumsum(colsum, dtype=np.float64)])
        a = ((csum[t:t + k] - csum[:k]) / count).astype(x.dtype)  # mean of each patch column
        flat = xp.reshape(n * c, -1)
        gram_full = flat.T @ flat
        gram = np.einsum("ttij->ij", sliding_window_view(gram_full, (k, k))) / count
        mean = kern @ a
        e2 = np.einsum("fi,ij,fj->f", kern, gram, kern)
        var = np.maximum(e2 - mean * mean, 0)
        stats.update(mean, var, count)
        saved.update(a=a, gram=gram)
    else:
        mean = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    g = _as_array(gamma)
    b = _as_array(beta)
    scale = (g * inv_std)[owner]
    shift = (b[owner] - scale * mean[owner]) * s_sum
    out = scale[None, :, None] * u + shift[None, :, None]
    saved.update(mean=mean, inv_std=inv_std, s_sum=s_sum)
    return out.reshape(n, n_out, 1, t), LayerCtx("temporal_bn_depthwise", saved)


def temporal_bn_depthwise_backward(ctx, dout):
    """Parameter gradients of the fused block. The input gradient is not needed (raw data)."""
    s = ctx.take("temporal_bn_depthwise")
    tconv, gamma, beta, dwconv = s["tconv"], s["gamma"], s["beta"], s["dwconv"]
    kern = _as_array(tconv)[:, 0, :]
    w_arr = _as_array(dwconv)
    g_arr = _as_array(gamma)
    owner, mean, inv_std, s_sum, u = s["owner"], s["mean"], s["inv_std"], s["s_sum"], s["u"]
    n, c, t = s["shape"]
    f, k = kern.shape
    n_out = w_arr.shape[0]
    d = dout.reshape(n, n_out, t)

    scale = g_arr * inv_std  # (F,)
    g_sum = d.sum(axis=(0, 2))  # (O,)
    gu_sum = np.einsum("not,not->o", d, u)
    dbeta = np.bincount(owner, s_sum * g_sum, minlength=f)
    dscale = np.bincount(owner, gu_sum - mean[owner] * s_sum * g_sum, minlength=f)
    dgamma = inv_std * dscale
    dmean = -scale * np.bincount(owner, s_sum * g_sum, minlength=f)
    ds_sum = (_as_array(beta)[owner] - scale[owner] * mean[owner]) * g_sum
    du = scale[owner][None, :, None] * d

    nfft = s["nfft"]
    du_f = sp_fft.rfft(du, nfft, axis=-1)
    # correlation of each trace with its upstream gradient, lags 0..K-1
    dk = sp_fft.irfft((s["z_f"] * du_f.conj()).sum(axis=0), nfft, axis=-1)[:, :k]
    dk = np.stack([dk[owner == i].sum(axis=0) for i in range(f)])
    if s["train"]:
        dinv = g_arr * dscale
        dvar = -0.5 * inv_std ** 3 * dinv
        dmean = dmean - 2 * mean * dvar
        dk += dmean[:, None] * s["a"][None, :] + 2 * dvar[:, None] * (kern @ s["gram"])

    # gradient reaching the spatially filtered traces, then the spatial weights
    dz = sp_fft.irfft(du_f * sp_fft.rfft(kern[owner], nfft, axis=-1), nfft, axis=-1)[..., :t + k - 1]
    dw = np.matmul(dz.astype(du.dtype), s["xp"].transpose(0, 2, 1)).sum(axis=0) + ds_sum[:, None]

    _accumulate(tconv, dk[:, None, :].astype(du.dtype))
    _accumulate(gamma, dgamma)
    _accumulate(beta, dbeta)
    _accumulate(dwconv, dw)
    return None
