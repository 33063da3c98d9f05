"""Array math for the supernet: convolutions, batch norm, activations,
pooling, losses, bilinear resize, and the SGD optimizer.

Every forward has a matching hand-written backward.  Ops are pure functions
of their arguments (plus an explicit optimizer state) and are deterministic:
same inputs give bitwise-identical outputs on one machine.  Arrays keep the
caller's dtype; production paths use float32, gradient checks run the same
code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Dimension mismatch, reported with the offending shapes."""


class NumericsError(ArithmeticError):
    """NaN/Inf reached an op that requires finite values."""


def assert_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(x, w, groups, stride, pad):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"square kernels only, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ShapeError(f"kernel size {k} must be odd")
    if c % groups != 0 or o % groups != 0:
        raise ShapeError(f"channels in={c} out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(
            f"weight expects {cg} input channels per group, input has {c // groups} "
            f"(input {x.shape}, weight {w.shape}, groups={groups})")
    if pad is None:
        pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"empty output for input {x.shape}, kernel {k}, "
                         f"stride {stride}, pad {pad}")
    return k, pad, ho, wo


def _im2col(x, k, stride, pad):
    """(N,C,H,W) -> (N,C,Ho,Wo,k,k) patch view (strided, zero-copy)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(gcols, x_shape, k, stride, pad):
    """Scatter-add (N,C,Ho,Wo,k,k) patch grads back to (N,C,H,W)."""
    n, c, h, wd = x_shape
    ho, wo = gcols.shape[2], gcols.shape[3]
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                gcols[:, :, :, :, i, j]
    if pad:
        return gxp[:, :, pad:pad + h, pad:pad + wd]
    return gxp


def conv2d_forward(x: np.ndarray, w: np.ndarray, groups: int = 1,
                   stride: int = 1, pad: int | None = None) -> np.ndarray:
    """2D convolution (cross-correlation), NCHW, no bias."""
    k, pad, ho, wo = _conv_geometry(x, w, groups, stride, pad)
    n, c, _, _ = x.shape
    o = w.shape[0]
    if groups == 1 and k == 1 and stride == 1:  # pointwise: one batched GEMM
        y = np.matmul(w[:, :, 0, 0], x.reshape(n, c, ho * wo))
        return y.reshape(n, o, ho, wo)
    cols = _im2col(x, k, stride, pad)
    if groups == 1:
        cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        y = cols2 @ w.reshape(o, -1).T
        return y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if groups == c and o == c:  # depthwise: stacked matvec per channel
        y = np.matmul(cols.reshape(n, c, ho * wo, k * k),
                      w.reshape(c, k * k, 1))
        return y.reshape(n, c, ho, wo)
    cg, og = c // groups, o // groups
    y = np.empty((n, o, ho, wo), dtype=x.dtype)
    for g in range(groups):
        sub = cols[:, g * cg:(g + 1) * cg].transpose(0, 2, 3, 1, 4, 5)
        sub = sub.reshape(n * ho * wo, cg * k * k)
        wg = w[g * og:(g + 1) * og].reshape(og, -1)
        y[:, g * og:(g + 1) * og] = (sub @ wg.T).reshape(n, ho, wo, og).transpose(0, 3, 1, 2)
    return y


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                    groups: int = 1, stride: int = 1,
                    pad: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of conv2d_forward w.r.t. input and weight."""
    k, pad, ho, wo = _conv_geometry(x, w, groups, stride, pad)
    n, c, _, _ = x.shape
    o = w.shape[0]
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out {grad_out.shape} != expected {(n, o, ho, wo)}")
    if groups == 1 and k == 1 and stride == 1:  # pointwise fast path
        g2 = grad_out.reshape(n, o, ho * wo)
        x2 = x.reshape(n, c, ho * wo)
        gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
        gx = np.matmul(w[:, :, 0, 0].T, g2).reshape(x.shape)
        return gx, gw.reshape(w.shape)
    cols = _im2col(x, k, stride, pad)
    if groups == 1:
        cols2 = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5))
        cols2 = cols2.reshape(n * ho * wo, c * k * k)
        g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols2).reshape(w.shape)
        gcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
        gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
    elif groups == c and o == c:
        gw = np.einsum("nchwij,nchw->cij", cols, grad_out)[:, None]
        # input grad as stride-1 depthwise conv of the zero-dilated grad
        # with the flipped kernel (transposed convolution)
        h, wd = x.shape[2], x.shape[3]
        if stride == 1:
            gd = grad_out
        else:
            gd = np.zeros((n, c, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                          dtype=grad_out.dtype)
            gd[:, :, ::stride, ::stride] = grad_out
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1])
        # extra bottom/right padding covers the stride remainder so the
        # output lands exactly on (h, wd)
        lo = k - 1 - pad
        rh = lo + (h + 2 * pad - k) % stride
        rw = lo + (wd + 2 * pad - k) % stride
        gx = conv2d_forward(np.pad(gd, ((0, 0), (0, 0), (lo, rh), (lo, rw))),
                            wf, groups, 1, 0)
        return gx, gw
    else:
        cg, og = c // groups, o // groups
        gw = np.empty_like(w)
        gcols = np.empty_like(cols)
        for g in range(groups):
            sub = cols[:, g * cg:(g + 1) * cg].transpose(0, 2, 3, 1, 4, 5)
            sub = sub.reshape(n * ho * wo, cg * k * k)
            g2 = grad_out[:, g * og:(g + 1) * og].transpose(0, 2, 3, 1)
            g2 = g2.reshape(n * ho * wo, og)
            wg = w[g * og:(g + 1) * og].reshape(og, -1)
            gw[g * og:(g + 1) * og] = (g2.T @ sub).reshape(og, cg, k, k)
            gc = (g2 @ wg).reshape(n, ho, wo, cg, k, k).transpose(0, 3, 1, 2, 4, 5)
            gcols[:, g * cg:(g + 1) * cg] = gc
    gx = _col2im(gcols, x.shape, k, stride, pad)
    return gx, gw


# ---------------------------------------------------------------------------
# batch norm

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      training: bool, momentum: float = BN_MOMENTUM,
                      eps: float = BN_EPS):
    """Per-channel batch norm over (N,H,W).

    Returns (y, cache, (new_running_mean, new_running_var)).  Running stats
    use the biased batch variance; in eval mode they pass through unchanged.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},)")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = (1 - momentum) * running_mean + momentum * mean
        new_rv = (1 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    m = x.shape[0] * x.shape[2] * x.shape[3]
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma,
             "training": training, "m": m,
             "batch_mean": mean, "batch_var": var}
    return y.astype(x.dtype, copy=False), cache, (new_rm, new_rv)


def batchnorm_backward(cache, grad_out):
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    dgamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dbeta = grad_out.sum(axis=(0, 2, 3))
    gs = gamma[None, :, None, None] * inv_std[None, :, None, None]
    if not cache["training"]:
        return grad_out * gs, dgamma, dbeta
    m = cache["m"]
    mean_g = grad_out.mean(axis=(0, 2, 3))[None, :, None, None]
    mean_gx = (grad_out * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
    gx = gs * (grad_out - mean_g - xhat * mean_gx)
    return gx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations / pooling / linear / loss

def relu6_forward(x):
    return np.clip(x, 0.0, 6.0)


def relu6_backward(x, grad_out):
    return grad_out * ((x > 0) & (x < 6))


def linear_forward(x, w, b):
    """x:(N,F), w:(O,F), b:(O,) -> (N,O)."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight {w.shape[1]}")
    return x @ w.T + b


def linear_backward(x, w, grad_out):
    gx = grad_out @ w
    gw = grad_out.T @ x
    gb = grad_out.sum(axis=0)
    return gx, gw, gb


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape, grad_out):
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None], x_shape) / (h * w)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy_forward(logits, labels):
    """Mean cross entropy over the batch; returns (loss, probs)."""
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logits vs {labels.shape[0]} labels")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsumexp - z[np.arange(n), labels]))
    probs = np.exp(z - logsumexp[:, None])
    return loss, probs


def softmax_cross_entropy_backward(probs, labels):
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return g / n


# ---------------------------------------------------------------------------
# bilinear resize (elastic resolution)

def resize_bilinear(x: np.ndarray, target: int) -> np.ndarray:
    """Resize (N,C,H,W) to (N,C,target,target), align-corners=false."""
    if target < 2:
        raise ShapeError(f"target resolution {target} must be >= 2")
    n, c, h, w = x.shape
    if h == target and w == target:
        return x
    out = x
    for axis, size in ((2, h), (3, w)):
        scale = size / target
        src = (np.arange(target) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, size - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, size - 1)
        frac = (src - lo).astype(x.dtype)
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        shape = [1, 1, 1, 1]
        shape[axis] = target
        out = a * (1 - frac.reshape(shape)) + b * frac.reshape(shape)
    return out.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimizer

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class OptimizerState:
    """SGD with Nesterov momentum and decoupled-by-name weight decay."""

    momentum: float = 0.9
    weight_decay: float = 3e-5
    base_lr: float = 0.1
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset[str] = frozenset()

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum {self.momentum} must be in [0, 1)")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState, lr: float) -> None:
    """One Nesterov step, in place:
    g' = g + wd*w;  v <- mu*v + g';  w <- w - lr*(g' + mu*v).
    Rejects the whole step if any gradient is non-finite."""
    for name, g in grads.items():
        assert_finite(g, f"gradient of {name}")
    mu = state.momentum
    for name, g in grads.items():
        w = params[name]
        wd = 0.0 if name in state.no_decay else state.weight_decay
        gp = g + wd * w if wd else g
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(w)
            state.buffers[name] = v
        v *= mu
        v += gp
        w -= lr * (gp + mu * v)
