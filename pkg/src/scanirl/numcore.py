"""Small differentiable operator core on numpy arrays.

Every op comes as a ``*_forward`` returning ``(out, cache)`` and a matching
``*_backward`` consuming the upstream gradient. Public tensors use the
N x C x H x W layout. Arithmetic follows the input dtype (float64 unless a
caller opts into float32 for speed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
KL_EPS = 1e-8

CKPT_MAGIC = b"SIRLCKPT"
CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ParamSet:
    """Named parameters with paired gradient buffers and Adam moments."""

    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict):
        for name, g in grads.items():
            self.grads[name] += g

    def copy(self) -> "ParamSet":
        out = ParamSet(t=self.t)
        for name in self.params:
            out.params[name] = self.params[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(params: ParamSet, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> ParamSet:
    """In-place Adam update with bias correction; clears gradients."""
    b1, b2 = betas
    params.t += 1
    c1 = 1.0 - b1 ** params.t
    c2 = 1.0 - b2 ** params.t
    for name, p in params.params.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr != 0.0:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()
    return params


# --------------------------------------------------------------------------
# convolution (stride 1, square kernel, symmetric zero padding)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")
    return x, False


# The heavy lifting runs channels-last (N x H x W x C): the patch matrix is
# then row-major in (n, y, x) and the matmul output needs no transpose.  The
# public N x C x H x W functions below are thin wrappers.


def im2col_nhwc(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w] = x
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (n, ho, wo, k, k, c), (s0, s1, s2, s1, s2, s3), writeable=False)
    return np.ascontiguousarray(win).reshape(n * ho * wo, k * k * c), ho, wo


def _wmat(w: np.ndarray) -> np.ndarray:
    """O x C x k x k weights as a (k*k*C) x O matrix matching im2col_nhwc."""
    o, c, k, _ = w.shape
    return w.transpose(2, 3, 1, 0).reshape(k * k * c, o)


def conv_nhwc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int):
    n, _, _, c = x.shape
    o, cw, k, _ = w.shape
    if c != cw:
        raise ShapeError(f"input has {c} channels, weights expect {cw}")
    col, ho, wo = im2col_nhwc(x, k, pad)
    out = col @ _wmat(w).astype(x.dtype, copy=False)
    if b is not None:
        out += b.astype(x.dtype, copy=False)
    return out.reshape(n, ho, wo, o), (col, x.shape, w, pad)


def conv_nhwc_weight_grad(col: np.ndarray, dout: np.ndarray, c: int, k: int) -> np.ndarray:
    o = dout.shape[-1]
    dw = col.T @ dout.reshape(-1, o)
    return dw.reshape(k, k, c, o).transpose(3, 2, 0, 1)


def conv_nhwc_input_grad(dout: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Transposed convolution: a full correlation with the flipped kernel."""
    k = w.shape[2]
    wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    out, _ = conv_nhwc_forward(dout, wt, None, k - 1 - pad)
    return out


def conv_nhwc_backward(dout: np.ndarray, cache, need_dx: bool = True):
    col, xshape, w, pad = cache
    k = w.shape[2]
    dw = conv_nhwc_weight_grad(col, dout, xshape[-1], k)
    db = dout.sum(axis=(0, 1, 2))
    dx = conv_nhwc_input_grad(dout, w, pad) if need_dx else None
    return dx, dw, db


def _to_nhwc(x4):
    return x4.transpose(0, 2, 3, 1)


def _to_nchw(x4):
    return np.ascontiguousarray(x4.transpose(0, 3, 1, 2))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int):
    """Stride-1 convolution of a C x H x W map or N x C x H x W batch."""
    x4, squeeze = _as_batch(x)
    if x4.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x4.shape[1]} channels, weights expect {w.shape[1]}")
    out, cache = conv_nhwc_forward(_to_nhwc(x4), w, b, pad)
    out = _to_nchw(out)
    return (out[0] if squeeze else out), (cache, squeeze)


def conv_weight_grad(x: np.ndarray, dout: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Gradient of <dout, conv(x, W)> with respect to W."""
    col, _, _ = im2col_nhwc(_to_nhwc(x), k, pad)
    return conv_nhwc_weight_grad(col, _to_nhwc(dout), x.shape[1], k)


def conv_input_grad(dout: np.ndarray, w: np.ndarray, pad: int, in_hw=None) -> np.ndarray:
    """Gradient of <dout, conv(x, W)> with respect to x."""
    return _to_nchw(conv_nhwc_input_grad(_to_nhwc(dout), w, pad))


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    inner, squeeze = cache
    d4 = dout[None] if squeeze else dout
    dx, dw, db = conv_nhwc_backward(_to_nhwc(d4), inner, need_dx)
    if dx is not None:
        dx = _to_nchw(dx)
        if squeeze:
            dx = dx[0]
    return dx, dw, db


# --------------------------------------------------------------------------
# dense, activations, pooling


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine map ``x @ w.T + b``; x is a vector or an N x D batch."""
    squeeze = x.ndim == 1
    x2 = x[None] if squeeze else x.reshape(x.shape[0], -1)
    if x2.shape[1] != w.shape[1]:
        raise ShapeError(f"input dim {x2.shape[1]} does not match weight dim {w.shape[1]}")
    out = x2 @ w.T + b
    return (out[0] if squeeze else out), (x2, w, squeeze)


def fc_backward(dout: np.ndarray, cache):
    x2, w, squeeze = cache
    d2 = dout[None] if squeeze else dout
    dw = d2.T @ x2
    db = d2.sum(axis=0)
    dx = d2 @ w
    return (dx[0] if squeeze else dx), dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(dout, s):
    return dout * s * (1.0 - s)


def maxpool2_nhwc_forward(x: np.ndarray):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_nhwc_select(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Pool by fixed within-block positions (used to pin a pooling pattern)."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]


def maxpool2_nhwc_backward(dout: np.ndarray, cache):
    idx, shape = cache
    n, h, w, c = shape
    h2, w2 = h // 2, w // 2
    blocks = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :2 * h2, :2 * w2] = blocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return dx


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""
    x4, squeeze = _as_batch(x)
    out, cache = maxpool2_nhwc_forward(_to_nhwc(x4))
    out = _to_nchw(out)
    return (out[0] if squeeze else out), (cache, squeeze)


def maxpool2_backward(dout: np.ndarray, cache):
    inner, squeeze = cache
    d4 = dout[None] if squeeze else dout
    dx = _to_nchw(maxpool2_nhwc_backward(_to_nhwc(d4), inner))
    return dx[0] if squeeze else dx


# --------------------------------------------------------------------------
# spatial distributions and losses


def log_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Log-softmax over the last axis; ``mask`` False entries get -inf."""
    z = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def spatial_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over all spatial cells of a ... x H x W map."""
    shape = logits.shape
    flat = logits.reshape(*shape[:-2], -1) if logits.ndim >= 2 else logits
    return np.exp(log_softmax(flat)).reshape(shape)


def smoothed_l1(prediction, target):
    """Huber loss with unit threshold; returns (loss, dloss/dprediction)."""
    d = np.asarray(prediction, dtype=np.float64) - target
    ad = np.abs(d)
    loss = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    grad = np.where(ad < 1.0, d, np.sign(d))
    return loss, grad


def kl_to_target_distribution(predicted: np.ndarray, target: np.ndarray, eps: float = KL_EPS) -> float:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    support = t > 0
    pt = p[support]
    if np.any(pt < eps):
        import logging

        logging.getLogger(__name__).warning("target mass on ~zero predicted probability; clamping at %g", eps)
        pt = np.maximum(pt, eps)
    tt = t[support]
    return float(np.sum(tt * (np.log(tt) - np.log(pt))))


def kl_logits_grad(logits: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row KL(target || softmax(logits)) and its gradient w.r.t. the logits.

    Rows are flattened maps (N x A). The gradient is ``softmax - target``.
    """
    lp = log_softmax(logits)
    t = target
    with np.errstate(divide="ignore", invalid="ignore"):
        tlogt = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    loss = tlogt.sum(axis=-1) - (t * lp).sum(axis=-1)
    return loss, np.exp(lp) - t


# --------------------------------------------------------------------------
# checkpoints


def save_params(path, tensors: dict, meta: dict | None = None) -> None:
    """Write tensors as magic, version, JSON metadata, then per-tensor records."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode()
            arr = np.asarray(arr)
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_params(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, mlen = struct.unpack_from("<HI", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 14
    meta = json.loads(data[off:off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = arr.astype(np.float64)
    return tensors, meta
