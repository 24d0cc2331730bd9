"""Layer primitives: convolution (stride 1 and 2), ReLU, elective fusion,
additive residual, fully connected, softmax cross-entropy.

Every forward has a matching analytic backward.  Backwards are verified
against central finite differences by the gradcheck module.  All functions
are pure; batch items are processed by per-sample GEMMs so a batched
forward is bit-identical to stacking single-sample forwards.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

ELECTIVE_MODES = ("literal", "nearest")
EXFEAT_KERNELS = (1, 3, 5, 7)


@dataclass
class ConvParams:
    """Convolution filter bank: weights (out, in, kh, kw), bias (out,)."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = None  # defaults to kh // 2 (same padding for stride 1)

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got {self.weights.shape}")
        out_ch, _, kh, kw = self.weights.shape
        if kh != kw or kh % 2 == 0 or kh < 1:
            raise ShapeError(f"kernel must be square and odd, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({out_ch},)")
        if self.pad is None:
            self.pad = kh // 2


@dataclass
class FcParams:
    """Dense layer: weights (n_out, n_in), bias (n_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"fc weights must be 2-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"fc bias shape {self.bias.shape} does not match weights")


@dataclass
class GradBundle:
    """Gradients w.r.t. an op's inputs and parameters, shapes mirrored."""

    inputs: tuple
    params: tuple = ()


def _conv_geometry(x, params):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (batch, ch, h, w), got {x.shape}")
    batch, in_ch, h, w = x.shape
    out_ch, w_in_ch, kh, kw = params.weights.shape
    if in_ch != w_in_ch:
        raise ShapeError(f"input has {in_ch} channels, filters expect {w_in_ch}")
    pad, stride = params.pad, params.stride
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    return batch, in_ch, h, w, out_ch, kh, kw, pad, stride, oh, ow


def _im2col(x_padded, kh, kw, stride, oh, ow):
    batch, ch = x_padded.shape[:2]
    cols = np.empty((batch, ch, kh, kw, oh, ow), dtype=x_padded.dtype)
    for m in range(kh):
        for n in range(kw):
            cols[:, :, m, n] = x_padded[:, :, m:m + stride * oh:stride,
                                        n:n + stride * ow:stride]
    return cols.reshape(batch, ch * kh * kw, oh * ow)


def _col2im(grad_cols, shape, kh, kw, stride, pad, oh, ow):
    batch, ch, h, w = shape
    grad_padded = np.zeros((batch, ch, h + 2 * pad, w + 2 * pad),
                           dtype=grad_cols.dtype)
    g6 = grad_cols.reshape(batch, ch, kh, kw, oh, ow)
    for m in range(kh):
        for n in range(kw):
            grad_padded[:, :, m:m + stride * oh:stride,
                        n:n + stride * ow:stride] += g6[:, :, m, n]
    if pad == 0:
        return grad_padded
    return np.ascontiguousarray(grad_padded[:, :, pad:pad + h, pad:pad + w])


def conv2d(x, params):
    """Cross-correlate a filter bank over a padded input.

    out[b, o, y, x] = bias[o]
        + sum_c sum_{m,n} weights[o, c, m, n] * padded[b, c, stride*y + m, stride*x + n]

    With the default pad = k // 2, stride 1 preserves height and width and
    stride 2 produces ceil(h / 2) x ceil(w / 2): output pixel p samples a
    window centered on input pixel 2p.
    """
    (batch, in_ch, h, w, out_ch, kh, kw,
     pad, stride, oh, ow) = _conv_geometry(x, params)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(x, kh, kw, stride, oh, ow)
    w2 = params.weights.reshape(out_ch, in_ch * kh * kw)
    out = np.matmul(w2, cols)  # per-sample GEMMs, (batch, out_ch, oh*ow)
    out += params.bias.reshape(1, out_ch, 1)
    return out.reshape(batch, out_ch, oh, ow)


def conv2d_backward(x, params, grad_out):
    """Gradients of conv2d w.r.t. input, weights and bias."""
    (batch, in_ch, h, w, out_ch, kh, kw,
     pad, stride, oh, ow) = _conv_geometry(x, params)
    if grad_out.shape != (batch, out_ch, oh, ow):
        raise ShapeError(f"upstream shape {grad_out.shape} != {(batch, out_ch, oh, ow)}")
    x_padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(x_padded, kh, kw, stride, oh, ow)
    g2 = np.ascontiguousarray(grad_out.reshape(batch, out_ch, oh * ow))

    grad_bias = g2.sum(axis=(0, 2))
    grad_w = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(out_ch, in_ch, kh, kw)

    w2 = params.weights.reshape(out_ch, in_ch * kh * kw)
    grad_cols = np.matmul(w2.T, g2)
    grad_x = _col2im(grad_cols, (batch, in_ch, h, w), kh, kw, stride, pad, oh, ow)
    return GradBundle(inputs=(grad_x,), params=(grad_w, grad_bias))


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Pass gradient where x > 0; the subgradient at exactly 0 is 0."""
    return grad_out * (x > 0)


def _check_branches(branches):
    if len(branches) != len(EXFEAT_KERNELS):
        raise ValueError(f"elective fusion takes exactly 4 branches, got {len(branches)}")
    shape = branches[0].shape
    for b in branches[1:]:
        if b.shape != shape:
            raise ShapeError(f"branch shape mismatch: {b.shape} vs {shape}")
    return np.stack(branches)


def elective_fuse(branches, mode="literal"):
    """Fuse four branch responses elementwise.

    At every position: the midrange (max + min) / 2 of the four values is
    the regularized response; each branch's distance to it is taken; the
    literal mode returns midrange + smallest distance, the nearest mode
    returns the branch value closest to the midrange.  Output lies within
    [min branch, max branch] either way.
    """
    if mode not in ELECTIVE_MODES:
        raise ValueError(f"unknown elective mode {mode!r}")
    stack = _check_branches(branches)
    mid = 0.5 * (stack.max(axis=0) + stack.min(axis=0))
    dist = np.abs(mid[None] - stack)
    if mode == "literal":
        return mid + dist.min(axis=0)
    nearest = dist.argmin(axis=0)
    return np.take_along_axis(stack, nearest[None], axis=0)[0]


def elective_fuse_scalar(branches, mode="literal"):
    """Independent scalar-loop oracle for elective_fuse (test reference)."""
    stack = _check_branches(branches)
    flat = stack.reshape(4, -1)
    out = np.empty(flat.shape[1], dtype=stack.dtype)
    for i in range(flat.shape[1]):
        values = [flat[k, i] for k in range(4)]
        mid = 0.5 * (max(values) + min(values))
        dists = [abs(mid - v) for v in values]
        if mode == "literal":
            out[i] = mid + min(dists)
        else:
            out[i] = values[min(range(4), key=lambda k: dists[k])]
    return out.reshape(branches[0].shape)


def elective_backward(branches, grad_out, mode="literal"):
    """Subgradient of elective_fuse w.r.t. each branch.

    Ties in the max, min and distance argmin break to the lowest branch
    index; the absolute value's subgradient at 0 is 0.  Exact at every
    tie-free point.
    """
    if mode not in ELECTIVE_MODES:
        raise ValueError(f"unknown elective mode {mode!r}")
    stack = _check_branches(branches)
    if grad_out.shape != stack.shape[1:]:
        raise ShapeError(f"upstream shape {grad_out.shape} != {stack.shape[1:]}")
    hi_idx = stack.argmax(axis=0)[None]
    lo_idx = stack.argmin(axis=0)[None]
    mid = 0.5 * (np.take_along_axis(stack, hi_idx, 0) + np.take_along_axis(stack, lo_idx, 0))
    dist = np.abs(mid - stack)
    star_idx = dist.argmin(axis=0)[None]

    d_mid = np.zeros_like(stack)
    np.put_along_axis(d_mid, hi_idx, 0.5, axis=0)
    one_lo = np.zeros_like(stack)
    np.put_along_axis(one_lo, lo_idx, 0.5, axis=0)
    d_mid += one_lo

    one_star = np.zeros_like(stack)
    np.put_along_axis(one_star, star_idx, 1.0, axis=0)

    if mode == "nearest":
        grads = one_star * grad_out[None]
    else:
        sign = np.sign(mid - np.take_along_axis(stack, star_idx, 0))
        grads = (d_mid * (1.0 + sign) - sign * one_star) * grad_out[None]
    return GradBundle(inputs=tuple(grads[k] for k in range(4)))


def additive(a, b):
    """Residual sum of two same-shape response maps."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def additive_backward(grad_out):
    """Upstream gradient flows unchanged into both summands."""
    return GradBundle(inputs=(grad_out, grad_out))


def fc_forward(z, params, activation="identity"):
    """Dense layer out = act(weights @ z + bias) for z of shape (l,) or (batch, l)."""
    if activation not in ("identity", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    single = z.ndim == 1
    z2 = z[None] if single else z
    if z2.ndim != 2 or z2.shape[1] != params.weights.shape[1]:
        raise ShapeError(f"fc input length {z.shape} != {params.weights.shape[1]}")
    # (n_out, l) @ (batch, l, 1): one GEMV per sample keeps batching bit-exact.
    pre = np.matmul(params.weights, z2[:, :, None])[:, :, 0] + params.bias
    out = relu(pre) if activation == "relu" else pre
    return out[0] if single else out


def fc_backward(z, params, grad_out, activation="identity", out=None):
    """Gradients of fc_forward w.r.t. z, weights and bias.

    For the relu activation the saved forward output must be passed; its
    positive entries identify where gradient flows.
    """
    single = z.ndim == 1
    z2 = z[None] if single else z
    g2 = grad_out[None] if single else grad_out
    if activation == "relu":
        if out is None:
            raise ValueError("relu fc backward needs the forward output")
        o2 = out[None] if single else out
        g2 = g2 * (o2 > 0)
    grad_w = np.matmul(g2.T, z2)
    grad_b = g2.sum(axis=0)
    grad_z = np.matmul(g2, params.weights)
    return GradBundle(inputs=(grad_z[0] if single else grad_z,),
                      params=(grad_w, grad_b))


def softmax_xent(logits, label):
    """Numerically stable softmax cross-entropy for one sample.

    Returns (loss, gradient w.r.t. logits); gradient = softmax - onehot.
    """
    if logits.ndim != 1:
        raise ShapeError(f"logits must be 1-D, got {logits.shape}")
    n_classes = logits.shape[0]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = float(np.log(total) - shifted[label])
    grad = exp / total
    grad[label] -= 1.0
    return loss, grad


def softmax_xent_batch(logits, labels):
    """Mean softmax cross-entropy over a batch.

    Returns (mean loss, gradient of the mean w.r.t. the logits matrix).
    """
    if logits.ndim != 2:
        raise ShapeError(f"batch logits must be 2-D, got {logits.shape}")
    batch, n_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(batch), labels]
    loss = float(np.mean(np.log(total[:, 0]) - picked))
    grad = exp / total
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return loss, grad
