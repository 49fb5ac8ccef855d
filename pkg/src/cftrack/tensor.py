"""Dense float tensors with reverse-mode automatic differentiation.

Storage is 32-bit by default; gradient verification may temporarily promote
parameters to 64-bit (see ``gradcheck``).  The operator set is exactly what
the tracker network needs: elementwise arithmetic between same-shape tensors
(or tensor and Python scalar), reductions, convolutions, a dense layer,
global average pooling, and the two fusion-specific bilinear ops.  General
broadcasting is intentionally unsupported.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float array with optional gradient storage.

    ``data`` is always row-major.  ``grad`` is lazily allocated by the first
    backward pass and accumulates across uses until explicitly zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.array(arr, order="C")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; grads sum into ``.grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic (same shape, or tensor-scalar) ---------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "add")
            out = self.data + other.data
            return Tensor._from_op(out, (self, other), _bw_add(self, other))
        out = self.data + other
        return Tensor._from_op(out, (self,), lambda g, a=self: a._accumulate(g))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g, a=self: a._accumulate(-g))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "sub")
            out = self.data - other.data

            def bw(g, a=self, b=other):
                a._accumulate(g)
                b._accumulate(-g)

            return Tensor._from_op(out, (self, other), bw)
        return self + (-other)

    def __rsub__(self, other):
        # scalar - tensor
        out = other - self.data
        return Tensor._from_op(out, (self,), lambda g, a=self: a._accumulate(-g))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "mul")
            out = self.data * other.data

            def bw(g, a=self, b=other):
                a._accumulate(g * b.data)
                b._accumulate(g * a.data)

            return Tensor._from_op(out, (self, other), bw)
        out = self.data * other
        return Tensor._from_op(out, (self,), lambda g, a=self, s=other: a._accumulate(g * s))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "div")
            out = self.data / other.data

            def bw(g, a=self, b=other):
                a._accumulate(g / b.data)
                b._accumulate(-g * a.data / (b.data * b.data))

            return Tensor._from_op(out, (self, other), bw)
        return self * (1.0 / other)

    # -- pointwise nonlinearities --------------------------------------------

    def relu(self):
        out = np.maximum(self.data, 0)

        def bw(g, a=self):
            a._accumulate(g * (a.data > 0))

        return Tensor._from_op(out, (self,), bw)

    def sigmoid(self):
        x = self.data
        pos = x >= 0
        ex = np.exp(np.where(pos, -x, x))  # exponent always <= 0, no overflow
        out = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        # Keep the output strictly inside (0, 1) even where float32 saturates.
        fin = np.finfo(out.dtype)
        out = np.clip(out, fin.tiny, 1.0 - fin.epsneg)

        def bw(g, a=self, y=out):
            a._accumulate(g * y * (1.0 - y))

        return Tensor._from_op(out, (self,), bw)

    def exp(self):
        out = np.exp(self.data)

        def bw(g, a=self, y=out):
            a._accumulate(g * y)

        return Tensor._from_op(out, (self,), bw)

    def log(self):
        out = np.log(self.data)

        def bw(g, a=self):
            a._accumulate(g / a.data)

        return Tensor._from_op(out, (self,), bw)

    def sqrt(self):
        out = np.sqrt(self.data)

        def bw(g, a=self, y=out):
            a._accumulate(g / (2.0 * y))

        return Tensor._from_op(out, (self,), bw)

    def square(self):
        out = self.data * self.data

        def bw(g, a=self):
            a._accumulate(2.0 * g * a.data)

        return Tensor._from_op(out, (self,), bw)

    def clamp_min(self, floor: float):
        # Gradient is zero in the clamped region (subgradient at the joint: 0).
        out = np.maximum(self.data, floor)

        def bw(g, a=self, m=floor):
            a._accumulate(g * (a.data > m))

        return Tensor._from_op(out, (self,), bw)

    def smooth_l1(self):
        """Elementwise 0.5*x^2 for |x|<1, |x|-0.5 otherwise."""
        x = self.data
        absx = np.abs(x)
        inner = absx < 1.0
        out = np.where(inner, 0.5 * x * x, absx - 0.5)

        def bw(g, a=self, mask=inner):
            d = np.where(mask, a.data, np.sign(a.data))
            a._accumulate(g * d)

        return Tensor._from_op(out, (self,), bw)

    # -- reductions and indexing ----------------------------------------------

    def sum(self):
        out = np.asarray(self.data.sum(), dtype=self.data.dtype)

        def bw(g, a=self):
            a._accumulate(np.full_like(a.data, float(g)))

        return Tensor._from_op(out, (self,), bw)

    def mean(self):
        out = np.asarray(self.data.mean(), dtype=self.data.dtype)

        def bw(g, a=self):
            a._accumulate(np.full_like(a.data, float(g) / a.data.size))

        return Tensor._from_op(out, (self,), bw)

    def pick(self, index: tuple):
        """Select one element as a 0-d tensor; backward scatters to it."""
        out = np.asarray(self.data[index], dtype=self.data.dtype)

        def bw(g, a=self, idx=index):
            buf = np.zeros_like(a.data)
            buf[idx] = float(g)
            a._accumulate(buf)

        return Tensor._from_op(out, (self,), bw)

    def window(self, i0: int, j0: int, h: int, w: int):
        """Spatial window [i0:i0+h, j0:j0+w] of a CHW tensor."""
        if self.data.ndim != 3:
            raise ShapeError(f"window expects CHW input, got shape {self.shape}")
        C, H, W = self.data.shape
        if i0 < 0 or j0 < 0 or i0 + h > H or j0 + w > W:
            raise ShapeError(f"window ({i0},{j0},{h},{w}) out of bounds for {self.shape}")
        out = self.data[:, i0 : i0 + h, j0 : j0 + w].copy()

        def bw(g, a=self, i=i0, j=j0, hh=h, ww=w):
            buf = np.zeros_like(a.data)
            buf[:, i : i + hh, j : j + ww] = g
            a._accumulate(buf)

        return Tensor._from_op(out, (self,), bw)

    def reshape(self, *shape):
        out = self.data.reshape(*shape)

        def bw(g, a=self):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._from_op(out, (self,), bw)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _bw_add(a: Tensor, b: Tensor):
    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return bw


# -- structural operators -----------------------------------------------------


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a CHW input with an (Cout,Cin,k,k) kernel."""
    cin, H, W = x.data.shape
    cout, cink, kh, kw = kernel.data.shape
    if cin != cink:
        raise ShapeError(
            f"conv2d: input has {cin} channels (shape {x.data.shape}) but kernel "
            f"expects {cink} (shape {kernel.data.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0 or H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: invalid geometry input {x.data.shape} kernel {kh}x{kw} "
            f"stride {stride} padding {padding}"
        )
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _pointwise_conv(x, kernel, bias)
    xp = _pad_hw(x.data, padding)
    ho = _conv_out_size(H, kh, stride, padding)
    wo = _conv_out_size(W, kw, stride, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (Cin, Ho, Wo, kh, kw). Contract over (Cin, kh, kw).
    out = np.tensordot(kernel.data, win, axes=([1, 2, 3], [0, 3, 4]))
    out = out + bias.data[:, None, None]

    def bw(g, x=x, kernel=kernel, bias=bias, win=win, stride=stride, padding=padding,
           H=H, W=W, kh=kh, kw=kw, ho=ho, wo=wo):
        kernel._accumulate(np.tensordot(g, win, axes=([1, 2], [1, 2])))
        bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            # (Cin, kh, kw, Ho, Wo), then scatter-add per kernel offset.
            gw = np.tensordot(kernel.data, g, axes=([0], [0]))
            gxp = np.zeros(
                (x.data.shape[0], H + 2 * padding, W + 2 * padding),
                dtype=np.result_type(g.dtype, kernel.data.dtype),
            )
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u : u + stride * ho : stride, v : v + stride * wo : stride] += gw[:, u, v]
            if padding:
                gxp = gxp[:, padding : padding + H, padding : padding + W]
            x._accumulate(gxp)

    return Tensor._from_op(out, (x, kernel, bias), bw)


def _pointwise_conv(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution as a channel-mixing matmul."""
    cin, H, W = x.data.shape
    cout = kernel.data.shape[0]
    k2 = kernel.data.reshape(cout, cin)
    flat = x.data.reshape(cin, H * W)
    out = (k2 @ flat).reshape(cout, H, W) + bias.data[:, None, None]

    def bw(g, x=x, kernel=kernel, bias=bias, k2=k2, flat=flat, H=H, W=W,
           cin=cin, cout=cout):
        g2 = g.reshape(cout, H * W)
        kernel._accumulate((g2 @ flat.T).reshape(kernel.data.shape))
        bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            x._accumulate((k2.T @ g2).reshape(cin, H, W))

    return Tensor._from_op(out, (x, kernel, bias), bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution: kernel (C,1,k,k) applies one filter per channel."""
    cin, H, W = x.data.shape
    ck, one, kh, kw = kernel.data.shape
    if ck != cin or one != 1:
        raise ShapeError(
            f"depthwise_conv2d: kernel shape {kernel.data.shape} does not match "
            f"input channels {cin} (shape {x.data.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0 or H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"depthwise_conv2d: invalid geometry input {x.data.shape} kernel {kh}x{kw} "
            f"stride {stride} padding {padding}"
        )
    xp = _pad_hw(x.data, padding)
    ho = _conv_out_size(H, kh, stride, padding)
    wo = _conv_out_size(W, kw, stride, padding)
    k2d = kernel.data[:, 0]
    # One shifted slice per kernel tap; beats windowed-view contractions for
    # the small kernels this network uses, at every map size measured.
    out = np.empty((cin, ho, wo), dtype=np.result_type(xp.dtype, k2d.dtype))
    out[:] = bias.data[:, None, None]
    for u in range(kh):
        for v in range(kw):
            out += k2d[:, u, v][:, None, None] * xp[:, u : u + stride * ho : stride,
                                                    v : v + stride * wo : stride]

    def bw(g, x=x, kernel=kernel, bias=bias, xp=xp, k2d=k2d, stride=stride,
           padding=padding, H=H, W=W, kh=kh, kw=kw, ho=ho, wo=wo, cin=cin):
        gk = np.empty((cin, 1, kh, kw), dtype=np.result_type(g.dtype, xp.dtype))
        for u in range(kh):
            for v in range(kw):
                tap = xp[:, u : u + stride * ho : stride, v : v + stride * wo : stride]
                gk[:, 0, u, v] = (g * tap).sum(axis=(1, 2))
        kernel._accumulate(gk)
        bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxp = np.zeros(
                (cin, H + 2 * padding, W + 2 * padding),
                dtype=np.result_type(g.dtype, k2d.dtype),
            )
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                        g * k2d[:, u, v][:, None, None]
                    )
            if padding:
                gxp = gxp[:, padding : padding + H, padding : padding + W]
            x._accumulate(gxp)

    return Tensor._from_op(out, (x, kernel, bias), bw)


def depthwise_separable_conv(
    x: Tensor,
    depthwise_kernel: Tensor,
    depthwise_bias: Tensor,
    pointwise_kernel: Tensor,
    pointwise_bias: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Depthwise stage (spatial, strided) followed by a 1x1 channel mix."""
    mid = depthwise_conv2d(x, depthwise_kernel, depthwise_bias, stride, padding)
    return conv2d(mid, pointwise_kernel, pointwise_bias, stride=1, padding=0)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a 1-D input."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"fully_connected: weight {weight.data.shape} incompatible with input {x.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(
            f"fully_connected: bias {bias.data.shape} incompatible with weight {weight.data.shape}"
        )
    out = weight.data @ x.data + bias.data

    def bw(g, x=x, weight=weight, bias=bias):
        weight._accumulate(np.outer(g, x.data))
        bias._accumulate(g)
        if x.requires_grad:
            x._accumulate(weight.data.T @ g)

    return Tensor._from_op(out, (x, weight, bias), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions of a CHW tensor."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool expects CHW input, got {x.data.shape}")
    C, H, W = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def bw(g, x=x, H=H, W=W):
        x._accumulate(np.repeat(g / (H * W), H * W).reshape(x.data.shape))

    return Tensor._from_op(out, (x,), bw)


def pixelwise_correlation(f_z: Tensor, f_x: Tensor) -> Tensor:
    """Each template position acts as a 1x1 filter over the search map.

    out[k, i, j] = sum_c f_z[c, k // Wz, k % Wz] * f_x[c, i, j]
    """
    if f_z.data.ndim != 3 or f_x.data.ndim != 3 or f_z.data.shape[0] != f_x.data.shape[0]:
        raise ShapeError(
            f"pixelwise_correlation: channel mismatch {f_z.data.shape} vs {f_x.data.shape}"
        )
    c, hz, wz = f_z.data.shape
    _, hx, wx = f_x.data.shape
    out4 = np.tensordot(f_z.data, f_x.data, axes=([0], [0]))  # (hz, wz, hx, wx)
    out = np.ascontiguousarray(out4.reshape(hz * wz, hx, wx))

    def bw(g, f_z=f_z, f_x=f_x, hz=hz, wz=wz, hx=hx, wx=wx):
        g4 = g.reshape(hz, wz, hx, wx)
        if f_z.requires_grad:
            gz = np.tensordot(g4, f_x.data, axes=([2, 3], [1, 2]))  # (hz, wz, C)
            f_z._accumulate(np.moveaxis(gz, 2, 0))
        if f_x.requires_grad:
            gx = np.tensordot(f_z.data, g4, axes=([1, 2], [0, 1]))  # (C, hx, wx)
            f_x._accumulate(gx)

    return Tensor._from_op(out, (f_z, f_x), bw)


def scale_channels(x: Tensor, gates: Tensor) -> Tensor:
    """Multiply each channel of a CHW tensor by a per-channel gate."""
    if x.data.ndim != 3 or gates.data.ndim != 1 or gates.data.shape[0] != x.data.shape[0]:
        raise ShapeError(
            f"scale_channels: gates {gates.data.shape} incompatible with input {x.data.shape}"
        )
    out = x.data * gates.data[:, None, None]

    def bw(g, x=x, gates=gates):
        if x.requires_grad:
            x._accumulate(g * gates.data[:, None, None])
        gates._accumulate((g * x.data).sum(axis=(1, 2)))

    return Tensor._from_op(out, (x, gates), bw)


# -- initialization -----------------------------------------------------------


def uniform_param(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    """Uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)], float32, trainable."""
    bound = math.sqrt(1.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)
    return Tensor(data, requires_grad=True)


def zeros_param(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=True)
