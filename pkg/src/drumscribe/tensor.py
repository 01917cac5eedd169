"""Minimal dense-array reverse-mode autodiff core.

Tensors wrap float32 or float64 numpy buffers and every op preserves the
buffer dtype, so a network built from float32 parameters computes float32
activations throughout while reductions (sums, means, softmax and layernorm
statistics) and matmul contractions accumulate in float64 before the result
is stored back at the buffer dtype. Each differentiable op records a
backward closure on its output node, and `backward()` walks the implicit
tape in reverse topological order. Only the broadcasting cases the
denoiser actually uses are supported (numpy trailing-dimension rules).
"""

from __future__ import annotations

import math
import struct
import zlib
from contextlib import contextmanager
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _matmul_acc64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation in the inner loop.

    float32 operands are promoted for the contraction and the result is
    stored back as float32, so long contractions (e.g. attention mixing over
    hundreds of frames) do not lose low-order bits to the storage dtype.
    """
    if a.dtype == np.float64 and b.dtype == np.float64:
        return a @ b
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return out.astype(np.result_type(a, b), copy=False)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (inference / sampler loops)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    dtype = grad.dtype
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape).astype(dtype, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] = lambda: None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray, owned: bool = False):
        """Add a gradient contribution.

        owned=True promises `grad` is a freshly allocated buffer no other node
        references, so it can be adopted directly; otherwise it may be shared
        with (or be a view of) a consumer's grad and must be copied, because
        later accumulations mutate `self.grad` in place.
        """
        if self.grad is None:
            if owned and isinstance(grad, np.ndarray) and grad.dtype == self.data.dtype:
                self.grad = grad if grad.base is None else np.ascontiguousarray(grad)
            else:
                self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: tuple["Tensor", ...]) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = parents
        return out

    def backward(self):
        """Backpropagate from a scalar loss; visits each node exactly once."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward()
            # release the tape as we go
            node._backward = lambda: None
            node._prev = ()

    # -- elementwise ops -----------------------------------------------------

    @staticmethod
    def _coerce(x, dtype=None) -> "Tensor":
        """Wrap a non-Tensor operand. Python scalars take the caller's dtype
        so that mixing a float32 graph with literal constants does not
        silently promote every downstream buffer to float64."""
        if isinstance(x, Tensor):
            return x
        arr = np.asarray(x)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(dtype if dtype is not None else np.float64)
        elif dtype is not None and arr.ndim == 0:
            arr = arr.astype(dtype, copy=False)
        return Tensor(arr)

    def __add__(self, other):
        other = Tensor._coerce(other, self.data.dtype)
        out = Tensor._node(self.data + other.data, (self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    g = _unbroadcast(out.grad, self.data.shape)
                    self._accumulate(g, owned=g is not out.grad)
                if other.requires_grad:
                    g = _unbroadcast(out.grad, other.data.shape)
                    other._accumulate(g, owned=g is not out.grad)
            out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._node(-self.data, (self,))
        if out.requires_grad:
            def _backward():
                self._accumulate(-out.grad, owned=True)
            out._backward = _backward
        return out

    def __sub__(self, other):
        return self + (-Tensor._coerce(other, self.data.dtype))

    def __rsub__(self, other):
        return Tensor._coerce(other, self.data.dtype) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other, self.data.dtype)
        out = Tensor._node(self.data * other.data, (self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad * other.data, self.data.shape), owned=True)
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad * self.data, other.data.shape), owned=True)
            out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self.data.dtype)
        out = Tensor._node(self.data / other.data, (self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad / other.data, self.data.shape), owned=True)
                if other.requires_grad:
                    other._accumulate(_unbroadcast(
                        -out.grad * self.data / other.data ** 2, other.data.shape), owned=True)
            out._backward = _backward
        return out

    def sqrt(self):
        root = np.sqrt(self.data)
        out = Tensor._node(root, (self,))
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad / (2.0 * root), owned=True)
            out._backward = _backward
        return out

    def exp(self):
        value = np.exp(self.data)
        out = Tensor._node(value, (self,))
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad * value, owned=True)
            out._backward = _backward
        return out

    def tanh(self):
        value = np.tanh(self.data)
        out = Tensor._node(value, (self,))
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad * (1.0 - value ** 2), owned=True)
            out._backward = _backward
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor._node(self.data.reshape(*shape), (self,))
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad.reshape(self.data.shape))
            out._backward = _backward
        return out

    def transpose(self, axes: tuple[int, ...]):
        out = Tensor._node(self.data.transpose(axes), (self,))
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            def _backward():
                self._accumulate(out.grad.transpose(inverse))
            out._backward = _backward
        return out

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, key):
        out = Tensor._node(self.data[key], (self,))
        if out.requires_grad:
            def _backward():
                grad = np.zeros_like(self.data)
                np.add.at(grad, key, out.grad)
                self._accumulate(grad, owned=True)
            out._backward = _backward
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        # accumulate in float64 regardless of storage dtype, then store back
        total = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
        out = Tensor._node(np.asarray(total).astype(self.data.dtype, copy=False), (self,))
        if out.requires_grad:
            def _backward():
                grad = out.grad
                if axis is not None and not keepdims:
                    grad = np.expand_dims(grad, axis)
                self._accumulate(np.broadcast_to(grad, self.data.shape))
            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- matmul ----------------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = Tensor._coerce(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out = Tensor._node(_matmul_acc64(a, b), (self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    grad_a = _matmul_acc64(out.grad, np.swapaxes(b, -1, -2)) if b.ndim > 1 \
                        else np.expand_dims(out.grad, -1) * b
                    self._accumulate(_unbroadcast(grad_a, a.shape), owned=True)
                if other.requires_grad:
                    if b.ndim > 1:
                        grad_b = _matmul_acc64(np.swapaxes(a, -1, -2), out.grad)
                    else:
                        grad_b = (np.expand_dims(a, -1) * np.expand_dims(out.grad, -2)).sum(
                            axis=tuple(range(a.ndim - 1)), dtype=np.float64)
                    other._accumulate(_unbroadcast(grad_b, b.shape), owned=True)
            out._backward = _backward
        return out

    __matmul__ = matmul


# -- neural-net nonlinearities ------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    # python-float constants keep float32 inputs at float32 under numpy 2
    cdf = 0.5 * (1.0 + erf(x.data * (1.0 / math.sqrt(2.0))))
    out = Tensor._node(x.data * cdf, (x,))
    if out.requires_grad:
        pdf = np.exp(-0.5 * x.data ** 2) * (1.0 / math.sqrt(2.0 * math.pi))
        local = cdf + x.data * pdf
        def _backward():
            x._accumulate(out.grad * local, owned=True)
        out._backward = _backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    probs = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = Tensor._node(probs, (x,))
    if out.requires_grad:
        def _backward():
            g = out.grad * probs
            g -= probs * g.sum(axis=axis, keepdims=True, dtype=np.float64)
            x._accumulate(g, owned=True)
        out._backward = _backward
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    dtype = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dtype, copy=False)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True, dtype=np.float64).astype(dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + dtype.type(eps))
    normed = centered * inv_std
    out = Tensor._node(normed * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def _backward():
            if gain.requires_grad:
                gain._accumulate(_unbroadcast(out.grad * normed, gain.data.shape), owned=True)
            if bias.requires_grad:
                g = _unbroadcast(out.grad, bias.data.shape)
                bias._accumulate(g, owned=g is not out.grad)
            if x.requires_grad:
                g = out.grad * gain.data
                g_mean = g.mean(axis=-1, keepdims=True,
                                dtype=np.float64).astype(dtype, copy=False)
                gn_mean = (g * normed).mean(axis=-1, keepdims=True,
                                            dtype=np.float64).astype(dtype, copy=False)
                x._accumulate(inv_std * (g - g_mean - normed * gn_mean), owned=True)
        out._backward = _backward
    return out


def reduce_mean(x: Tensor) -> Tensor:
    return x.mean()


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad ** 2
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -- tensor blob serialization ---------------------------------------------------

_BLOB_MAGIC = b"TBLB"
_DTYPE_TAGS = {"<f8": b"f8", "<f4": b"f4"}
_TAG_DTYPES = {tag: np.dtype(code) for code, tag in _DTYPE_TAGS.items()}


class BlobError(ValueError):
    pass


def dump_tensors(arrays: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays: little-endian payloads plus a crc32 trailer."""
    body = bytearray(_BLOB_MAGIC)
    body += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        tag = _DTYPE_TAGS.get(dtype.str)
        if tag is None:
            raise BlobError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        body += tag
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.astype(dtype, copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def parse_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 12 or data[:4] != _BLOB_MAGIC:
        raise BlobError("bad tensor blob magic")
    stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored:
        raise BlobError("tensor blob checksum mismatch")
    pos = 4
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tag = data[pos : pos + 2]
        if tag not in _TAG_DTYPES:
            raise BlobError(f"unknown dtype tag {tag!r}")
        dtype = _TAG_DTYPES[tag]
        pos += 2
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(data[pos : pos + n_bytes], dtype=dtype, count=n_items)
        pos += n_bytes
        arrays[name] = arr.reshape(shape).copy()
    return arrays
