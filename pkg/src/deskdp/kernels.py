"""Hot numeric kernels.

Each kernel exists twice: ``_<name>_numba`` (loops compiled by numba; dense
products go through numba's BLAS-backed ``np.dot``)
and ``_<name>_numpy`` (vectorised). The public name is bound to one of them
according to :data:`deskdp._accel.USE_NUMBA`. Inputs are float32 or float64
C-contiguous arrays; results keep the input dtype, so float32 inputs
accumulate in float32.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deskdp._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- matmul


@njit
def _matmul_numba(a, b):
    # numba lowers np.dot on contiguous 2-D arrays to BLAS gemm
    return np.dot(a, b)


def _matmul_numpy(a, b):
    return np.matmul(a, b)


# ---------------------------------------------------------------- conv2d


def conv_out_size(size, ksize, stride, pad):
    return (size + 2 * pad - ksize) // stride + 1


@njit
def _im2col_numba(x, kh, kw, stride, pad, ho, wo):
    nb, nc, h, w = x.shape
    cols = np.zeros((nb * ho * wo, nc * kh * kw), dtype=x.dtype)
    for n in range(nb):
        for i in range(ho):
            for j in range(wo):
                r = (n * ho + i) * wo + j
                for c in range(nc):
                    for a in range(kh):
                        ii = i * stride - pad + a
                        if ii < 0 or ii >= h:
                            continue
                        for b in range(kw):
                            jj = j * stride - pad + b
                            if jj >= 0 and jj < w:
                                cols[r, (c * kh + a) * kw + b] = x[n, c, ii, jj]
    return cols


@njit
def _col2im_numba(cols, x_shape, kh, kw, stride, pad, ho, wo):
    nb, nc, h, w = x_shape
    dx = np.zeros((nb, nc, h, w), dtype=cols.dtype)
    for n in range(nb):
        for i in range(ho):
            for j in range(wo):
                r = (n * ho + i) * wo + j
                for c in range(nc):
                    for a in range(kh):
                        ii = i * stride - pad + a
                        if ii < 0 or ii >= h:
                            continue
                        for b in range(kw):
                            jj = j * stride - pad + b
                            if jj >= 0 and jj < w:
                                dx[n, c, ii, jj] += cols[r, (c * kh + a) * kw + b]
    return dx


@njit
def _rows(dy):
    # [N, O, Ho, Wo] -> [N*Ho*Wo, O]
    nb, no, ho, wo = dy.shape
    out = np.empty((nb * ho * wo, no), dtype=dy.dtype)
    for n in range(nb):
        for o in range(no):
            for i in range(ho):
                for j in range(wo):
                    out[(n * ho + i) * wo + j, o] = dy[n, o, i, j]
    return out


@njit
def _conv2d_forward_numba(x, k, stride, pad):
    nb, nc, h, w = x.shape
    no, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = _im2col_numba(x, kh, kw, stride, pad, ho, wo)
    kt = np.ascontiguousarray(k.reshape(no, nc * kh * kw).T)
    flat = np.dot(cols, kt)
    out = np.empty((nb, no, ho, wo), dtype=x.dtype)
    for n in range(nb):
        for i in range(ho):
            for j in range(wo):
                r = (n * ho + i) * wo + j
                for o in range(no):
                    out[n, o, i, j] = flat[r, o]
    return out


@njit
def _conv2d_grad_input_numba(dy, k, x_shape, stride, pad):
    no, nc, kh, kw = k.shape
    ho = dy.shape[2]
    wo = dy.shape[3]
    cols = np.dot(_rows(dy), np.ascontiguousarray(k.reshape(no, nc * kh * kw)))
    return _col2im_numba(cols, x_shape, kh, kw, stride, pad, ho, wo)


@njit
def _conv2d_grad_weight_numba(dy, x, k_shape, stride, pad):
    no, nc, kh, kw = k_shape
    ho = dy.shape[2]
    wo = dy.shape[3]
    cols = _im2col_numba(x, kh, kw, stride, pad, ho, wo)
    dk = np.dot(np.ascontiguousarray(_rows(dy).T), cols)
    return dk.reshape(no, nc, kh, kw)


def _windows(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv2d_forward_numpy(x, k, stride, pad):
    no, _, kh, kw = k.shape
    ho = conv_out_size(x.shape[2], kh, stride, pad)
    wo = conv_out_size(x.shape[3], kw, stride, pad)
    win = _windows(x, kh, kw, stride, pad)[:, :, :ho, :wo]
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_grad_input_numpy(dy, k, x_shape, stride, pad):
    nb, nc, h, w = x_shape
    _, _, kh, kw = k.shape
    ho, wo = dy.shape[2], dy.shape[3]
    cols = np.tensordot(dy, k, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
    dxp = np.zeros((nb, nc, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += cols[..., a, b].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w])


def _conv2d_grad_weight_numpy(dy, x, k_shape, stride, pad):
    _, _, kh, kw = k_shape
    ho, wo = dy.shape[2], dy.shape[3]
    win = _windows(x, kh, kw, stride, pad)[:, :, :ho, :wo]
    return np.ascontiguousarray(np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3])))


# ---------------------------------------------------------------- boxes


@njit
def _iou_pair(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_one_to_many(box, boxes):
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = (box[2] - box[0]) * (box[3] - box[1]) + (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) - inter
    out = np.zeros(len(boxes))
    ok = overlap & (union > 0.0)
    out[ok] = inter[ok] / union[ok]
    return out


@njit
def _greedy_nms_numba(boxes, thresh):
    # boxes are pre-sorted by descending score
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if suppressed[i]:
            continue
        keep[i] = True
        for j in range(i + 1, n):
            if not suppressed[j] and _iou_pair(boxes[i], boxes[j]) > thresh:
                suppressed[j] = True
    return keep


def _greedy_nms_numpy(boxes, thresh):
    n = len(boxes)
    suppressed = np.zeros(n, dtype=bool)
    keep = np.zeros(n, dtype=bool)
    for i in range(n):
        if suppressed[i]:
            continue
        keep[i] = True
        if i + 1 < n:
            suppressed[i + 1 :] |= iou_one_to_many(boxes[i], boxes[i + 1 :]) > thresh
    return keep


SOFT_LINEAR = 0
SOFT_GAUSSIAN = 1


@njit
def _soft_nms_numba(boxes, scores, method, nt, sigma, floor):
    n = boxes.shape[0]
    s = scores.copy()
    alive = np.ones(n, dtype=np.bool_)
    order = np.empty(n, dtype=np.int64)
    count = 0
    for _ in range(n):
        best = -1
        best_score = -np.inf
        for j in range(n):
            if alive[j] and s[j] > best_score:
                best = j
                best_score = s[j]
        if best < 0:
            break
        alive[best] = False
        order[count] = best
        count += 1
        for j in range(n):
            if not alive[j]:
                continue
            ov = _iou_pair(boxes[best], boxes[j])
            if method == 0:
                if ov > nt:
                    s[j] *= 1.0 - ov
            else:
                s[j] *= math.exp(-(ov * ov) / sigma)
            if s[j] < floor:
                alive[j] = False
    return order[:count], s


def _soft_nms_numpy(boxes, scores, method, nt, sigma, floor):
    n = len(boxes)
    s = scores.copy()
    alive = np.ones(n, dtype=bool)
    order = []
    while alive.any():
        idx = np.flatnonzero(alive)
        best = idx[np.argmax(s[idx])]  # argmax returns the first (lowest index) maximum
        alive[best] = False
        order.append(best)
        rest = np.flatnonzero(alive)
        if len(rest) == 0:
            break
        ov = iou_one_to_many(boxes[best], boxes[rest])
        if method == SOFT_LINEAR:
            s[rest] = np.where(ov > nt, s[rest] * (1.0 - ov), s[rest])
        else:
            s[rest] = s[rest] * np.exp(-(ov * ov) / sigma)
        alive[rest[s[rest] < floor]] = False
    return np.asarray(order, dtype=np.int64), s


IMPLS = {
    "numba": {
        "matmul": _matmul_numba,
        "conv2d_forward": _conv2d_forward_numba,
        "conv2d_grad_input": _conv2d_grad_input_numba,
        "conv2d_grad_weight": _conv2d_grad_weight_numba,
        "greedy_nms": _greedy_nms_numba,
        "soft_nms": _soft_nms_numba,
    },
    "numpy": {
        "matmul": _matmul_numpy,
        "conv2d_forward": _conv2d_forward_numpy,
        "conv2d_grad_input": _conv2d_grad_input_numpy,
        "conv2d_grad_weight": _conv2d_grad_weight_numpy,
        "greedy_nms": _greedy_nms_numpy,
        "soft_nms": _soft_nms_numpy,
    },
}

_active = IMPLS["numba" if USE_NUMBA else "numpy"]
matmul = _active["matmul"]
conv2d_forward = _active["conv2d_forward"]
conv2d_grad_input = _active["conv2d_grad_input"]
conv2d_grad_weight = _active["conv2d_grad_weight"]
greedy_nms = _active["greedy_nms"]
soft_nms = _active["soft_nms"]
