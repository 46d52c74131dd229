"""Layer primitives with explicit forward/backward passes.

Every layer works on NCHW arrays (or N x F for dense inputs), caches what its
backward pass needs during ``forward(x, train=True)`` and accumulates
parameter gradients into ``Parameter.grad`` on ``backward``.
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Shape = tuple[int, ...]


class ShapeError(ValueError):
    """Raised when an input does not fit a layer. ``layer`` is the dotted path."""

    def __init__(self, layer: str, expected, got):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"layer '{layer}': expected input {expected}, got {got}")

    def under(self, prefix: str) -> "ShapeError":
        path = f"{prefix}.{self.layer}" if self.layer else prefix
        return ShapeError(path, self.expected, self.got)


class Parameter:
    """A trainable array and its gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


def kaiming_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    dt = np.dtype(dtype)
    u = rng.random(shape, dtype=dt if dt in (np.float32, np.float64) else np.float64)
    u *= 2 * bound
    u -= bound
    return u.astype(dt, copy=False)


class Module:
    """Base layer. Subclasses fill ``params``/``buffers`` and override the passes."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def children(self) -> Sequence[tuple[str, "Module"]]:
        return ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if not rest:
            self.buffers[head][...] = value
            return
        dict(self.children())[head].set_buffer(rest, value)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self.modules():
            for k in m.buffers:
                m.buffers[k] = m.buffers[k].astype(dtype)
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def __call__(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train)

    def __repr__(self):
        return f"{type(self).__name__}()"


def _check_channels(layer: Module, x: np.ndarray, channels: int, ndim: int = 4) -> None:
    if x.ndim != ndim or x.shape[1] != channels:
        exp = f"(N, {channels}, H, W)" if ndim == 4 else f"(N, {channels})"
        raise ShapeError("", exp, tuple(x.shape))


_DW_CHUNK = 1 << 16  # elements per batch chunk in the depthwise path


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0,
                 groups: int = 1, bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels ({in_ch}, {out_ch}) not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.pad, self.groups = stride, pad, groups
        fan_in = in_ch // groups * kernel * kernel
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in, dtype))
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_ch, dtype=dtype))
        self._cache = None

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_ch and self.groups > 1 and self.out_ch == self.in_ch

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ShapeError("", f"({self.in_ch}, H, W)", shape)
        out = (self.out_ch, _conv_out(h, self.kernel, self.stride, self.pad),
               _conv_out(w, self.kernel, self.stride, self.pad))
        if min(out[1:]) < 1:
            raise ShapeError("", f"spatial >= {self.kernel - 2 * self.pad}", shape)
        return out

    def _padded(self, x):
        p = self.pad
        if p == 0:
            return x
        n, c, h, w = x.shape
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:-p, p:-p] = x
        return xp

    def _cols(self, xp, ho, wo):
        # (N, g, Cg*k*k, Ho*Wo) patch tensor
        k, s, g = self.kernel, self.stride, self.groups
        n, c = xp.shape[:2]
        if k == 1:
            v = xp[:, :, : s * (ho - 1) + 1: s, : s * (wo - 1) + 1: s] if s > 1 else xp
            return v.reshape(n, g, c // g, ho * wo)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, g, c // g * k * k, ho * wo)

    def forward(self, x, train=False, scale=None, shift=None):
        """``scale``/``shift`` fold a following eval-mode batch norm into this conv."""
        _check_channels(self, x, self.in_ch)
        n, _, h, w = x.shape
        k, s = self.kernel, self.stride
        ho, wo = _conv_out(h, k, s, self.pad), _conv_out(w, k, s, self.pad)
        if ho < 1 or wo < 1:
            raise ShapeError("", f"spatial >= {k - 2 * self.pad}", tuple(x.shape))
        xp = self._padded(x)
        wgt = self.params["weight"].data
        bias = self.params["bias"].data if "bias" in self.params else None
        if scale is not None:
            wgt = wgt * scale[:, None, None, None].astype(wgt.dtype)
            bias = (shift if bias is None else bias * scale + shift).astype(wgt.dtype)
        if self.depthwise:
            y, cache = self._dw_forward(xp, wgt, ho, wo)
        elif not train and self.groups == 1 and ho * wo <= 64:
            # small maps: one GEMM over the whole batch beats per-sample products
            cols = self._cols(xp, ho, wo).transpose(1, 2, 0, 3).reshape(-1, n * ho * wo)
            y = (wgt.reshape(self.out_ch, -1) @ cols).reshape(self.out_ch, n, ho, wo)
            y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
            cache = None
        else:
            g = self.groups
            cols = self._cols(xp, ho, wo)
            wmat = wgt.reshape(g, self.out_ch // g, -1)
            y = np.matmul(wmat, cols).reshape(n, self.out_ch, ho, wo)
            cache = cols
        if bias is not None:
            y += bias[None, :, None, None]
        self._cache = (cache, xp.shape, ho, wo) if train else None
        return y

    # Depthwise path: one broadcast multiply-add per kernel tap over strided views of the
    # padded input, in batch chunks that stay in cache. The backward pass works on a
    # stride-1 grid of the flattened padded image, where each tap is a contiguous slice
    # (the last k-1 columns of each row are junk and stay zero).

    def _dw_chunks(self, n, per_sample):
        step = max(1, _DW_CHUNK // max(per_sample, 1))
        return [slice(a, min(a + step, n)) for a in range(0, n, step)]

    def _dw_forward(self, xp, wgt, ho, wo):
        n, c = xp.shape[:2]
        k, s = self.kernel, self.stride
        y = np.empty((n, c, ho, wo), dtype=np.result_type(xp, wgt))
        taps = [(i, j, wgt[:, 0, i, j][:, None, None]) for i in range(k) for j in range(k)]
        for b in self._dw_chunks(n, c * ho * wo):
            out = y[b]
            tmp = np.empty_like(out)
            for t, (i, j, wt) in enumerate(taps):
                v = xp[b, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s]
                if t == 0:
                    np.multiply(v, wt, out=out)
                else:
                    np.multiply(v, wt, out=tmp)
                    out += tmp
        return y, xp

    def _dw_backward(self, grad, xp, xpshape):
        n, c, hp, wp = xpshape
        k, s = self.kernel, self.stride
        ho, wo = grad.shape[2:]
        ho1 = hp - k + 1
        span = (ho1 - 1) * wp + (wp - k + 1)
        gbuf = np.zeros((n, c, ho1 * wp), dtype=grad.dtype)
        gbuf.reshape(n, c, ho1, wp)[:, :, : s * (ho - 1) + 1: s, : s * (wo - 1) + 1: s] = grad
        flat = xp.reshape(n, c, hp * wp)
        dflat = np.zeros((n, c, hp * wp), dtype=np.result_type(xp, grad))
        wparam = self.params["weight"]
        dw = np.zeros((c, k * k), dtype=np.float64)
        taps = [(i * wp + j, wparam.data[:, 0, i, j][None, :, None]) for i in range(k) for j in range(k)]
        for b in self._dw_chunks(n, c * hp * wp):
            g = gbuf[b, :, :span]
            tmp = np.empty_like(g)
            for t, (off, wt) in enumerate(taps):
                dw[:, t] += np.einsum("ncl,ncl->c", g, flat[b, :, off:off + span])
                np.multiply(g, wt, out=tmp)
                dflat[b, :, off:off + span] += tmp
        wparam.grad += dw.reshape(wparam.grad.shape).astype(wparam.grad.dtype)
        return dflat.reshape(xpshape)

    def backward(self, grad):
        cache, xpshape, ho, wo = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        n = grad.shape[0]
        wp = self.params["weight"]
        if "bias" in self.params:
            self.params["bias"].grad += grad.sum(axis=(0, 2, 3))
        if self.depthwise:
            dxp = self._dw_backward(grad, cache, xpshape)
        else:
            cols = cache
            g = self.groups
            og, cg = self.out_ch // g, self.in_ch // g
            gm = grad.reshape(n, g, og, ho * wo)
            # sum over batch and positions: (g, og, cg*k*k)
            wp.grad += np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wp.grad.shape)
            wmat = wp.data.reshape(g, og, -1)
            dcols = np.matmul(wmat.transpose(0, 2, 1), gm)  # (n, g, cg*k*k, ho*wo)
            if k == 1 and s == 1:
                dxp = dcols.reshape(xpshape)
            else:
                dxp = np.zeros(xpshape, dtype=dcols.dtype)
                dc = dcols.reshape(n, g * cg, k, k, ho, wo)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s] += dc[:, :, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        self._cache = None
        return np.ascontiguousarray(dxp)

    def __repr__(self):
        return (f"Conv2d({self.in_ch}, {self.out_ch}, k={self.kernel}, s={self.stride}, "
                f"p={self.pad}, g={self.groups}, bias={'bias' in self.params})")


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_features, dtype=dtype))
        self._x = None

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError("", f"({self.in_features},)", shape)
        return (self.out_features,)

    def forward(self, x, train=False):
        _check_channels(self, x, self.in_features, ndim=2)
        y = x @ self.params["weight"].data.T
        if "bias" in self.params:
            y = y + self.params["bias"].data
        self._x = x if train else None
        return y

    def backward(self, grad):
        x = self._x
        self.params["weight"].grad += grad.T @ x
        if "bias" in self.params:
            self.params["bias"].grad += grad.sum(axis=0)
        self._x = None
        return grad @ self.params["weight"].data

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features})"


class BatchNorm2d(Module):
    """Batch statistics in training mode (running stats updated), running statistics in eval mode.

    Backward is only defined after a training-mode forward.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["weight"] = Parameter(np.ones(channels, dtype=dtype))
        self.params["bias"] = Parameter(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError("", f"({self.channels}, H, W)", shape)
        return shape

    def forward(self, x, train=False):
        _check_channels(self, x, self.channels)
        gamma = self.params["weight"].data
        beta = self.params["bias"].data
        if not train:
            scale, shift = self.eval_affine()
            self._cache = None
            return x * scale[None, :, None, None] + shift[None, :, None, None]
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xc, xc) / m
        unbiased = var * (m / max(m - 1, 1))
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm *= 1 - self.momentum
        rm += self.momentum * mean.astype(rm.dtype)
        rv *= 1 - self.momentum
        rv += self.momentum * unbiased.astype(rv.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc
        xhat *= inv_std[None, :, None, None]
        self._cache = (xhat, inv_std)
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def eval_affine(self) -> tuple[np.ndarray, np.ndarray]:
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        scale = self.params["weight"].data * inv_std
        return scale, self.params["bias"].data - self.buffers["running_mean"] * scale

    def backward(self, grad):
        xhat, inv_std = self._cache
        self._cache = None
        w = self.params["weight"]
        gsum = grad.sum(axis=(0, 2, 3))
        gx = np.einsum("nchw,nchw->c", grad, xhat)
        w.grad += gx
        self.params["bias"].grad += gsum
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        # dx = w * inv_std / m * (m * grad - sum(grad) - xhat * sum(grad * xhat))
        dx = xhat * (-gx / m)[None, :, None, None]
        dx += grad
        dx -= (gsum / m)[None, :, None, None]
        dx *= (w.data * inv_std)[None, :, None, None]
        return dx

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


class ReLU(Module):
    def forward(self, x, train=False):
        self._mask = (x > 0) if train else None
        return np.maximum(x, 0)

    def backward(self, grad):
        out = grad * self._mask
        self._mask = None
        return out


class ReLU6(Module):
    def forward(self, x, train=False):
        self._mask = ((x > 0) & (x < 6)) if train else None
        return np.clip(x, 0, 6)

    def backward(self, grad):
        out = grad * self._mask
        self._mask = None
        return out


class MaxPool(Module):
    def __init__(self, kernel: int, stride: int | None = None):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel

    def output_shape(self, shape):
        c, h, w = shape
        out = (c, _conv_out(h, self.kernel, self.stride, 0), _conv_out(w, self.kernel, self.stride, 0))
        if min(out[1:]) < 1:
            raise ShapeError("", f"spatial >= {self.kernel}", shape)
        return out

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError("", "(N, C, H, W)", tuple(x.shape))
        k, s = self.kernel, self.stride
        n, c, h, w = x.shape
        ho, wo = _conv_out(h, k, s, 0), _conv_out(w, k, s, 0)
        if ho < 1 or wo < 1:
            raise ShapeError("", f"spatial >= {k}", tuple(x.shape))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, x.dtype, idx, ho, wo) if train else None
        return y

    def backward(self, grad):
        xshape, dtype, idx, ho, wo = self._cache
        k, s = self.kernel, self.stride
        dx = np.zeros(xshape, dtype=np.result_type(dtype, grad))
        for i in range(k):
            for j in range(k):
                dx[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s] += \
                    grad * (idx == i * k + j)
        self._cache = None
        return dx

    def __repr__(self):
        return f"MaxPool({self.kernel}, {self.stride})"


class GlobalAvgPool(Module):
    """(N, C, H, W) -> (N, C, 1, 1)."""

    def output_shape(self, shape):
        return (shape[0], 1, 1)

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError("", "(N, C, H, W)", tuple(x.shape))
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad / (h * w), self._shape).copy()


def _pool_matrix(size_in: int, size_out: int) -> np.ndarray:
    # Adaptive-pooling bins: [floor(i*in/out), ceil((i+1)*in/out))
    m = np.zeros((size_out, size_in))
    for i in range(size_out):
        lo = (i * size_in) // size_out
        hi = -((-(i + 1) * size_in) // size_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


class AdaptiveAvgPool(Module):
    """Average-pool (or replicate) to a fixed H x W. Separable, so it is two matmuls."""

    def __init__(self, out_h: int, out_w: int):
        super().__init__()
        self.out_h, self.out_w = out_h, out_w
        self._mats: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def output_shape(self, shape):
        return (shape[0], self.out_h, self.out_w)

    def _get(self, h, w, dtype):
        key = (h, w)
        if key not in self._mats:
            self._mats[key] = (_pool_matrix(h, self.out_h), _pool_matrix(w, self.out_w))
        ph, pw = self._mats[key]
        return ph.astype(dtype), pw.astype(dtype)

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError("", "(N, C, H, W)", tuple(x.shape))
        h, w = x.shape[2:]
        self._hw = (h, w)
        if (h, w) == (self.out_h, self.out_w):
            return x
        ph, pw = self._get(h, w, x.dtype)
        return np.ascontiguousarray(np.matmul(np.matmul(ph, x), pw.T))

    def backward(self, grad):
        h, w = self._hw
        if (h, w) == (self.out_h, self.out_w):
            return grad
        ph, pw = self._get(h, w, grad.dtype)
        return np.ascontiguousarray(np.matmul(np.matmul(ph.T, grad), pw))

    def __repr__(self):
        return f"AdaptiveAvgPool({self.out_h}, {self.out_w})"


class Flatten(Module):
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential(Module):
    """Ordered named layers. Errors from a child are re-raised with its path."""

    def __init__(self, layers: Sequence[tuple[str, Module]] | Sequence[Module] = ()):
        super().__init__()
        named = []
        for i, item in enumerate(layers):
            named.append(item if isinstance(item, tuple) else (str(i), item))
        names = [n for n, _ in named]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.layers: list[tuple[str, Module]] = named

    def children(self):
        return self.layers

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, key):
        if isinstance(key, str):
            return dict(self.layers)[key]
        return self.layers[key][1]

    def output_shape(self, shape):
        for name, layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                raise e.under(name) from None
        return shape

    def forward(self, x, train=False):
        return self._run(x, train)

    def _run(self, x, train, capture=None):
        # Eval mode folds conv -> batchnorm pairs unless the boundary between them is captured.
        i, layers = 0, self.layers
        while i < len(layers):
            name, layer = layers[i]
            try:
                if (not train and isinstance(layer, Conv2d) and i + 1 < len(layers)
                        and isinstance(layers[i + 1][1], BatchNorm2d)
                        and (capture is None or i + 1 not in capture)):
                    x = layer.forward(x, False, *layers[i + 1][1].eval_affine())
                    i += 1
                else:
                    x = layer.forward(x, train)
            except ShapeError as e:
                raise e.under(name) from None
            i += 1
            if capture is not None and i in capture:
                capture[i] = x
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __repr__(self):
        inner = "\n".join(f"  ({n}): {m!r}".replace("\n", "\n  ") for n, m in self.layers)
        return f"{type(self).__name__}(\n{inner}\n)"


class ResidualBlock(Module):
    """``act(body(x) + shortcut(x))``; the shortcut is identity unless a projection is given."""

    def __init__(self, body: Sequence[tuple[str, Module]], projection: Sequence[tuple[str, Module]] | None = None,
                 post_relu: bool = True):
        super().__init__()
        self.body = Sequential(body)
        self.shortcut = Sequential(projection) if projection else None
        self.act = ReLU() if post_relu else None

    def children(self):
        out = [("body", self.body)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        return out

    def output_shape(self, shape):
        out = self.body.output_shape(shape)
        skip = self.shortcut.output_shape(shape) if self.shortcut else shape
        if out != skip:
            raise ShapeError("body", f"output {skip}", out)
        return out

    def forward(self, x, train=False):
        y = self.body.forward(x, train)
        y = y + (self.shortcut.forward(x, train) if self.shortcut is not None else x)
        if self.act is not None:
            y = self.act.forward(y, train)
        return y

    def backward(self, grad):
        if self.act is not None:
            grad = self.act.backward(grad)
        dx = self.body.backward(grad)
        dx = dx + (self.shortcut.backward(grad) if self.shortcut is not None else grad)
        return dx

    def __repr__(self):
        return f"ResidualBlock(projection={self.shortcut is not None})"


class InvertedResidual(Module):
    """MobileNetV2 block: 1x1 expand, 3x3 depthwise, 1x1 linear projection."""

    def __init__(self, in_ch: int, out_ch: int, expand: int, stride: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.expand, self.stride = in_ch, out_ch, expand, stride
        hidden = in_ch * expand
        layers: list[tuple[str, Module]] = []
        if expand != 1:
            layers += [("expand", Conv2d(in_ch, hidden, 1, bias=False, rng=rng, dtype=dtype)),
                       ("expand_bn", BatchNorm2d(hidden, dtype=dtype)),
                       ("expand_act", ReLU6())]
        layers += [("dw", Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False, rng=rng, dtype=dtype)),
                   ("dw_bn", BatchNorm2d(hidden, dtype=dtype)),
                   ("dw_act", ReLU6()),
                   ("project", Conv2d(hidden, out_ch, 1, bias=False, rng=rng, dtype=dtype)),
                   ("project_bn", BatchNorm2d(out_ch, dtype=dtype))]
        self.body = Sequential(layers)
        self.use_residual = stride == 1 and in_ch == out_ch

    def children(self):
        return [("body", self.body)]

    def output_shape(self, shape):
        return self.body.output_shape(shape)

    def forward(self, x, train=False):
        y = self.body.forward(x, train)
        return y + x if self.use_residual else y

    def backward(self, grad):
        dx = self.body.backward(grad)
        return dx + grad if self.use_residual else dx

    def __repr__(self):
        return f"InvertedResidual({self.in_ch}, {self.out_ch}, expand={self.expand}, stride={self.stride})"
