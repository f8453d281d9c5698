"""Elementary layer kernels in NHWC layout, forward and backward.

Single images (H, W, C) are accepted wherever a batch (N, H, W, C) is, and
come back without the batch axis.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    return grad_out * (pre_activation > 0)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded sliding windows, shape (N, H, W, C, kh, kw)."""
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)))
    return np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 same-padded convolution.

    ``kernel`` has shape (kh, kw, C_in, C_out), ``bias`` shape (C_out,).
    out[n, y, x, o] = bias[o] + sum_{i, j, c} in[n, y+i-ph, x+j-pw, c] * kernel[i, j, c, o]
    """
    xb, single = _as_batch(x)
    kh, kw, cin, cout = kernel.shape
    if xb.shape[-1] != cin:
        raise ShapeError(f"input has {xb.shape[-1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    win = _windows(xb, kh, kw)
    out = np.tensordot(win, kernel.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    out += bias
    return out[0] if single else out


def conv_backward(
    grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients (d_input, d_kernel, d_bias) summed over the batch."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    kh, kw, cin, cout = kernel.shape
    win = _windows(xb, kh, kw)
    # (C, kh, kw, C_out) -> kernel layout (kh, kw, C, C_out)
    d_kernel = np.tensordot(win, gb, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    d_bias = gb.sum(axis=(0, 1, 2))
    if not need_input_grad:
        return None, d_kernel, d_bias

    n, h, w, _ = xb.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    d_padded = np.zeros((n, h + kh - 1, w + kw - 1, cin), dtype=np.result_type(gb, kernel))
    for i in range(kh):
        for j in range(kw):
            d_padded[:, i:i + h, j:j + w, :] += gb @ kernel[i, j].T
    d_x = d_padded[:, ph:ph + h, pw:pw + w, :]
    return (d_x[0] if single else d_x), d_kernel, d_bias


def maxpool_forward(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling, stride 2."""
    xb, single = _as_batch(x)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
    out = xb.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))
    return out[0] if single else out


def maxpool_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Routes each window's gradient to its first maximal element."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    n, h, w, c = xb.shape
    win = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    mask = np.zeros(win.shape, dtype=gb.dtype)
    np.put_along_axis(mask, win.argmax(axis=-1)[..., None], 1, axis=-1)
    d = (mask * gb[..., None]).reshape(n, h // 2, w // 2, c, 2, 2)
    d = d.transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
    return d[0] if single else d


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    return x @ weight + bias


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(probs, labels, class_weights) -> np.ndarray:
    """Per-example loss ``w[label] * -ln p[label]`` with p floored at 1e-12.

    ``class_weights`` is indexed by output node.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.intp)
    w = np.asarray(class_weights, dtype=np.float64)
    p_true = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    return w[labels] * -np.log(np.clip(p_true, PROB_FLOOR, 1.0))


def softmax_ce_backward(probs: np.ndarray, labels: np.ndarray, class_weights) -> np.ndarray:
    """d(per-example weighted CE)/d(logits): ``w[y] * (p - onehot(y))``."""
    labels = np.asarray(labels, dtype=np.intp)
    w = np.asarray(class_weights, dtype=probs.dtype)
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1
    return grad * w[labels][:, None]
