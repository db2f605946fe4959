"""Dense NCHW kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(N, C, H, W). Every forward kernel here has a matching ``*_backward``
function that takes the upstream gradient plus the saved forward inputs and
returns exact analytic gradients.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def check_tensor(x, name="input"):
    """Validate a rank-4 floating tensor with finite entries and return it."""
    if not isinstance(x, np.ndarray):
        raise ShapeError(f"{name} must be a numpy array, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name} must have rank 4 (N, C, H, W), got shape {x.shape}")
    if x.dtype.type not in FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    if not np.isfinite(x).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return x


def _pair(v):
    if np.isscalar(v):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


@dataclass
class ConvParams:
    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be (C_out, C_in/groups, kH, kW), got {self.kernel.shape}")
        if min(self.stride) < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if min(self.padding) < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")
        if self.groups < 1:
            raise ConfigError(f"groups must be positive, got {self.groups}")
        c_out = self.kernel.shape[0]
        if c_out % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide C_out={c_out}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ShapeError(f"bias must have shape ({c_out},), got {self.bias.shape}")

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1] * self.groups

    def output_size(self, h, w):
        kh, kw = self.kernel.shape[2:]
        (sh, sw), (ph, pw) = self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = self.gamma.shape
        for field in ("beta", "running_mean", "running_var"):
            if getattr(self, field).shape != c:
                raise ShapeError(f"batch norm {field} shape {getattr(self, field).shape} != {c}")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be non-negative")
        if not self.eps >= 0:
            raise ConfigError("eps must be non-negative")


# --------------------------------------------------------------------- conv


def _conv_setup(x, params):
    check_tensor(x)
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(
            f"input has {c} channels but kernel expects {params.in_channels} "
            f"(kernel {params.kernel.shape}, groups={params.groups})"
        )
    ho, wo = params.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"output spatial size {ho}x{wo} from input {h}x{w} is empty")
    ph, pw = params.padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return x, ho, wo


def _tap(xp, i, j, ho, wo, stride):
    sh, sw = stride
    return xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]


def _is_depthwise(params):
    return params.groups > 1 and params.kernel.shape[1] == 1 and params.groups == params.out_channels


def _is_pointwise(params):
    return (
        params.kernel.shape[2:] == (1, 1)
        and params.groups == 1
        and params.stride == (1, 1)
        and params.padding == (0, 0)
    )


def _windows(xp, params, ho, wo):
    kh, kw = params.kernel.shape[2:]
    sh, sw = params.stride
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw][:, :, :ho, :wo]  # (N, C, Ho, Wo, kH, kW)


def conv2d(x, params):
    """Cross-correlation with zero padding, stride and channel groups."""
    xp, ho, wo = _conv_setup(x, params)
    k = params.kernel
    if _is_pointwise(params):
        out = np.tensordot(k[:, :, 0, 0], xp, axes=([1], [1])).transpose(1, 0, 2, 3)
    elif _is_depthwise(params):
        out = np.zeros((x.shape[0], k.shape[0], ho, wo), dtype=np.result_type(x, k))
        for i in range(k.shape[2]):
            for j in range(k.shape[3]):
                out += _tap(xp, i, j, ho, wo, params.stride) * k[None, :, 0, i, j, None, None]
    elif params.groups == 1:
        win = _windows(xp, params, ho, wo)
        out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        g = params.groups
        n = x.shape[0]
        win = _windows(xp, params, ho, wo)
        win = win.reshape(n, g, -1, ho, wo, *k.shape[2:])
        kg = k.reshape(g, -1, *k.shape[1:])
        out = np.einsum("ngchwij,gocij->ngohw", win, kg).reshape(n, -1, ho, wo)
    out = np.ascontiguousarray(out)
    if params.bias is not None:
        out += params.bias[None, :, None, None]
    return out


def conv2d_backward(grad_out, x, params):
    """Return ``(dx, dkernel, dbias)``; ``dbias`` is None when there is no bias."""
    xp, ho, wo = _conv_setup(x, params)
    k = params.kernel
    kh, kw = k.shape[2:]
    ph, pw = params.padding
    db = grad_out.sum(axis=(0, 2, 3)) if params.bias is not None else None

    if _is_pointwise(params):
        dk = np.tensordot(grad_out, xp, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dx = np.tensordot(k[:, :, 0, 0], grad_out, axes=([0], [1])).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(dx), dk, db

    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    sh, sw = params.stride
    if _is_depthwise(params):
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, ho, wo, params.stride)
                dk[:, 0, i, j] = np.einsum("nchw,nchw->c", grad_out, xs)
                dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                    grad_out * k[None, :, 0, i, j, None, None]
                )
    elif params.groups == 1:
        win = _windows(xp, params, ho, wo)
        dk = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad_out, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += contrib
    else:
        g = params.groups
        n = x.shape[0]
        win = _windows(xp, params, ho, wo).reshape(n, g, -1, ho, wo, kh, kw)
        go = grad_out.reshape(n, g, -1, ho, wo)
        kg = k.reshape(g, -1, *k.shape[1:])
        dk = np.einsum("ngohw,ngchwij->gocij", go, win).reshape(k.shape)
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("ngohw,goc->ngchw", go, kg[:, :, :, i, j]).reshape(n, -1, ho, wo)
                dxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += contrib

    dx = dxp[:, :, ph : dxp.shape[2] - ph, pw : dxp.shape[3] - pw]
    return np.ascontiguousarray(dx), dk, db


def depthwise_conv2d(x, params):
    """Per-channel spatial filtering: output channel c sees only input channel c."""
    if not (params.groups == x.shape[1] == params.out_channels and params.kernel.shape[1] == 1):
        raise ConfigError(
            f"depthwise conv needs groups == C_in == C_out, got groups={params.groups}, "
            f"C_in={x.shape[1]}, C_out={params.out_channels}"
        )
    return conv2d(x, params)


def pointwise_conv2d(x, params):
    """1x1 convolution mixing channels at each pixel."""
    if params.kernel.shape[2:] != (1, 1) or params.groups != 1:
        raise ConfigError(
            f"pointwise conv needs a 1x1 kernel with groups=1, got kernel "
            f"{params.kernel.shape[2:]} groups={params.groups}"
        )
    return conv2d(x, params)


def depthwise_to_dense(kernel):
    """Expand a depthwise kernel (C, 1, kH, kW) into the block-diagonal (C, C, kH, kW) one."""
    c = kernel.shape[0]
    dense = np.zeros((c, c) + kernel.shape[2:], dtype=kernel.dtype)
    dense[np.arange(c), np.arange(c)] = kernel[:, 0]
    return dense


def conv_param_count(c_in, c_out, kh, kw, groups=1, bias=False):
    return c_out * (c_in // groups) * kh * kw + (c_out if bias else 0)


def separable_param_count(c_in, c_out, k=3):
    """Depthwise k x k plus pointwise weights, no biases."""
    return conv_param_count(c_in, c_in, k, k, groups=c_in) + conv_param_count(c_in, c_out, 1, 1)


# --------------------------------------------------------------- batch norm


def _bn_stats(x):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def batch_norm(x, params, mode="infer"):
    """Per-channel normalization.

    In ``"train"`` mode batch statistics are used and the running statistics
    in ``params`` are updated in place (single writer).
    """
    check_tensor(x)
    if x.shape[1] != params.gamma.shape[0]:
        raise ShapeError(f"batch norm expects {params.gamma.shape[0]} channels, got {x.shape[1]}")
    if np.any(params.running_var < 0):
        raise ConfigError("running_var must be non-negative")
    if mode == "train":
        mean, var = _bn_stats(x)
        m = x.size // x.shape[1]
        unbiased = var * m / max(m - 1, 1)
        mom = params.momentum
        params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
        params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased
    elif mode == "infer":
        mean, var = params.running_mean, params.running_var
    else:
        raise ConfigError(f"unknown batch norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + params.eps)
    scale = (params.gamma * inv).astype(x.dtype, copy=False)
    shift = (params.beta - mean * params.gamma * inv).astype(x.dtype, copy=False)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batch_norm_backward(grad_out, x, params, mode="infer"):
    """Return ``(dx, dgamma, dbeta)``; train-mode gradients flow through the batch statistics."""
    axes = (0, 2, 3)
    if mode == "train":
        mean, var = _bn_stats(x)
    else:
        mean, var = params.running_mean, params.running_var
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    dbeta = grad_out.sum(axis=axes)
    dgamma = (grad_out * xhat).sum(axis=axes)
    g = params.gamma[None, :, None, None]
    if mode == "train":
        m = x.size // x.shape[1]
        dxhat = grad_out * g
        dx = (inv[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=axes)[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        )
    else:
        dx = grad_out * (g * inv[None, :, None, None])
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


# -------------------------------------------------------------- activations


def sigmoid(x):
    # tanh form: one ufunc pass, no overflow for any finite x
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(grad_out, x):
    s = sigmoid(x)
    return grad_out * s * (1.0 - s)


def silu(x):
    if not np.isfinite(x).all():
        raise NumericError("silu input contains NaN or Inf")
    return x * sigmoid(x)


def silu_backward(grad_out, x):
    s = sigmoid(x)
    return grad_out * s * (1.0 + x * (1.0 - s))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


ACTIVATIONS = {
    "silu": (silu, silu_backward),
    "relu": (relu, relu_backward),
    "identity": (lambda x: x, lambda g, x: g),
}


# ------------------------------------------------------- resampling, merging


def upsample_nearest_2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest_2x_backward(grad_out):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shape {a.shape} and {b.shape}")
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out, channels_a):
    return grad_out[:, :channels_a], grad_out[:, channels_a:]
