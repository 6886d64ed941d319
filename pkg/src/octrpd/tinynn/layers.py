"""Layers with explicit forward/backward passes.

Tensors are channels-first numpy arrays: ``(N, C, *spatial)`` with one or two
(2-D) or three (3-D) spatial axes. Every layer caches what its backward pass
needs during ``forward`` and overwrites ``grads`` on ``backward``.
"""

from __future__ import annotations

import itertools

import numpy as np


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def children(self):
        return ()

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({cfg})"


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _offsets(kernel):
    return list(itertools.product(*[range(k) for k in kernel]))


def _im2col(x, kernel):
    """Columns (C, *K, N, *S) of the zero-padded input for a 'same' odd kernel."""
    n, c = x.shape[:2]
    sp = x.shape[2:]
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
    xp = np.pad(x, pad) if any(k > 1 for k in kernel) else x
    xt = xp.swapaxes(0, 1)
    cols = np.empty((c,) + tuple(kernel) + (n,) + tuple(sp))
    for off in _offsets(kernel):
        sl = tuple(slice(o, o + s) for o, s in zip(off, sp))
        cols[(slice(None),) + off] = xt[(slice(None), slice(None)) + sl]
    return cols


def _col2im(dcols, xshape, kernel):
    n, c = xshape[:2]
    sp = xshape[2:]
    padded = tuple(s + 2 * (k // 2) for s, k in zip(sp, kernel))
    dxp = np.zeros((c, n) + padded)
    for off in _offsets(kernel):
        sl = tuple(slice(o, o + s) for o, s in zip(off, sp))
        dxp[(slice(None), slice(None)) + sl] += dcols[(slice(None),) + off]
    inner = tuple(slice(k // 2, k // 2 + s) for s, k in zip(sp, kernel))
    return dxp[(slice(None), slice(None)) + inner].swapaxes(0, 1)


class Conv(Layer):
    """Stride-1 'same' convolution (cross-correlation) in 2 or 3 dims, via im2col."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, ndim=2, bias=True, rng=None, input_grad=True):
        super().__init__()
        if isinstance(kernel, int):
            kernel = (kernel,) * ndim
        kernel = tuple(int(k) for k in kernel)
        if len(kernel) != ndim or any(k % 2 == 0 for k in kernel):
            raise ValueError(f"kernel must be {ndim} odd extents, got {kernel}")
        self.in_ch, self.out_ch, self.kernel, self.ndim = in_ch, out_ch, kernel, ndim
        self.bias = bias
        self.input_grad = input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * int(np.prod(kernel))
        self.params["w"] = he_normal(rng, (out_ch, in_ch) + kernel, fan_in)
        if bias:
            self.params["b"] = np.zeros(out_ch)
        self.kind = f"conv{ndim}d"

    def config(self):
        return {"in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": list(self.kernel),
                "ndim": self.ndim, "bias": self.bias}

    def forward(self, x, training=False):
        if x.ndim != self.ndim + 2 or x.shape[1] != self.in_ch:
            raise ValueError(f"{self!r}: expected (N, {self.in_ch}, {self.ndim} spatial), got {x.shape}")
        cols = _im2col(x, self.kernel)
        rows = cols.reshape(-1, cols[0].size // int(np.prod(self.kernel)))
        out = self.params["w"].reshape(self.out_ch, -1) @ rows  # (O, N*S)
        if self.bias:
            out += self.params["b"][:, None]
        self._cache = (rows, x.shape)
        return out.reshape((self.out_ch,) + (x.shape[0],) + x.shape[2:]).swapaxes(0, 1)

    def backward(self, dout):
        rows, xshape = self._cache
        self._cache = None
        d2 = dout.swapaxes(0, 1).reshape(self.out_ch, -1)
        self.grads["w"] = (d2 @ rows.T).reshape(self.params["w"].shape)
        if self.bias:
            self.grads["b"] = d2.sum(axis=1)
        if not self.input_grad:
            return None
        dcols = self.params["w"].reshape(self.out_ch, -1).T @ d2
        dcols = dcols.reshape((self.in_ch,) + self.kernel + (xshape[0],) + tuple(xshape[2:]))
        return _col2im(dcols, xshape, self.kernel)


class BatchNorm(Layer):
    """Per-channel batch normalization over batch and spatial axes."""

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-7, momentum=0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def config(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, training=False):
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            count = x.size // x.shape[1]
            unbiased = var * count / max(count - 1, 1)
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        self._cache = (xhat, inv, axes, training)
        self.last_normalized = xhat
        return xhat * self.params["gamma"].reshape(bs) + self.params["beta"].reshape(bs)

    def backward(self, dout):
        xhat, inv, axes, training = self._cache
        bs = self._bshape(dout)
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * self.params["gamma"].reshape(bs)
        if not training:
            return dxhat * inv.reshape(bs)
        m = dout.size // dout.shape[1]
        return (inv.reshape(bs) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(bs)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(bs)
        )


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class MaxPool(Layer):
    """Non-overlapping max pooling; spatial extents must divide by the pool size."""

    kind = "maxpool"

    def __init__(self, size):
        super().__init__()
        self.size = tuple(int(s) for s in size)

    def config(self):
        return {"size": list(self.size)}

    def forward(self, x, training=False):
        nd = len(self.size)
        n, c = x.shape[:2]
        sp = x.shape[2:]
        if len(sp) != nd or any(s % p for s, p in zip(sp, self.size)):
            raise ValueError(f"{self!r}: spatial shape {sp} not divisible by pool size")
        shape = [n, c]
        for s, p in zip(sp, self.size):
            shape += [s // p, p]
        xr = x.reshape(shape)
        # bring the window axes to the end and flatten them
        perm = [0, 1] + [2 + 2 * i for i in range(nd)] + [3 + 2 * i for i in range(nd)]
        xw = xr.transpose(perm).reshape(shape[0:2] + [shape[2 + 2 * i] for i in range(nd)] + [-1])
        idx = xw.argmax(axis=-1)
        self._cache = (x.shape, shape, perm, idx, xw.shape)
        return np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        xshape, shape, perm, idx, wshape = self._cache
        dw = np.zeros(wshape)
        np.put_along_axis(dw, idx[..., None], dout[..., None], axis=-1)
        nd = len(self.size)
        dw = dw.reshape([wshape[0], wshape[1]] + list(wshape[2:2 + nd]) + list(self.size))
        inv = np.argsort(perm)
        return dw.transpose(inv).reshape(xshape)


class Upsample(Layer):
    """Nearest-neighbour upsampling by an integer factor per spatial axis."""

    kind = "upsample"

    def __init__(self, size):
        super().__init__()
        self.size = tuple(int(s) for s in size)

    def config(self):
        return {"size": list(self.size)}

    def forward(self, x, training=False):
        out = x
        for ax, f in enumerate(self.size):
            out = np.repeat(out, f, axis=2 + ax)
        return out

    def backward(self, dout):
        n, c = dout.shape[:2]
        shape = [n, c]
        for s, f in zip(dout.shape[2:], self.size):
            shape += [s // f, f]
        return dout.reshape(shape).sum(axis=tuple(3 + 2 * i for i in range(len(self.size))))


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.mean(axis=tuple(range(2, x.ndim)))

    def backward(self, dout):
        shape = self._shape
        count = int(np.prod(shape[2:]))
        return np.broadcast_to(dout.reshape(dout.shape + (1,) * (len(shape) - 2)) / count, shape).copy()


class GlobalMaxPool(Layer):
    """Max over all spatial positions; the gradient goes to the first maximum."""

    kind = "global_max_pool"

    def forward(self, x, training=False):
        flat = x.reshape(x.shape[:2] + (-1,))
        idx = flat.argmax(axis=-1)
        self._cache = (x.shape, flat.shape, idx)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, fshape, idx = self._cache
        dx = np.zeros(fshape)
        np.put_along_axis(dx, idx[..., None], dout[..., None], axis=-1)
        return dx.reshape(shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        self.in_features, self.out_features, self.bias = in_features, out_features, bias
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = he_normal(rng, (in_features, out_features), in_features)
        if bias:
            self.params["b"] = np.zeros(out_features)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features, "bias": self.bias}

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"{self!r}: expected (N, {self.in_features}), got {x.shape}")
        self._x = x
        out = x @ self.params["w"]
        if self.bias:
            out = out + self.params["b"]
        return out

    def backward(self, dout):
        self.grads["w"] = self._x.T @ dout
        if self.bias:
            self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"].T


class Softmax(Layer):
    """Softmax over the channel axis (axis 1), for vectors or per-pixel maps."""

    kind = "softmax"

    def forward(self, x, training=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        self._p = p
        return p

    def backward(self, dout):
        p = self._p
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return tuple((str(i), layer) for i, layer in enumerate(self.layers))

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout


def conv_block(in_ch, out_ch, ndim, rng, n_convs=1, kernel=3, input_grad=True):
    """``n_convs`` x (conv -> batchnorm -> relu)."""
    layers = []
    for i in range(n_convs):
        layers += [
            Conv(in_ch if i == 0 else out_ch, out_ch, kernel, ndim, rng=rng,
                 input_grad=input_grad or i > 0),
            BatchNorm(out_ch),
            ReLU(),
        ]
    return Sequential(layers)


class UNetCore(Layer):
    """Encoder/decoder with optional skip connections.

    ``depth`` pooling stages; ``depth == 0`` degenerates to a single conv
    block followed by the head.
    """

    kind = "unet"

    def __init__(self, in_ch, n_categories, depth, base_width, rng, n_convs=2, skip=True):
        super().__init__()
        self.depth, self.skip = depth, skip
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.enc = []
        prev = in_ch
        for i in range(depth):
            self.enc.append(conv_block(prev, widths[i], 2, rng, n_convs, input_grad=i > 0))
            prev = widths[i]
        self.bottleneck = conv_block(prev, widths[depth], 2, rng, n_convs, input_grad=depth > 0)
        self.pools = [MaxPool((2, 2)) for _ in range(depth)]
        self.ups = [Upsample((2, 2)) for _ in range(depth)]
        self.dec = []
        for i in reversed(range(depth)):
            cin = widths[i + 1] + (widths[i] if skip else 0)
            self.dec.append(conv_block(cin, widths[i], 2, rng, n_convs))
        self.head = Conv(widths[0], n_categories, 1, 2, rng=rng)
        self.softmax = Softmax()

    def children(self):
        out = [(f"enc{i}", b) for i, b in enumerate(self.enc)]
        out.append(("bottleneck", self.bottleneck))
        out += [(f"dec{i}", b) for i, b in enumerate(self.dec)]
        out += [("head", self.head), ("softmax", self.softmax)]
        return tuple(out)

    def forward(self, x, training=False):
        skips = []
        for enc, pool in zip(self.enc, self.pools):
            x = enc.forward(x, training)
            skips.append(x)
            x = pool.forward(x, training)
        x = self.bottleneck.forward(x, training)
        self._split = []
        for up, dec in zip(self.ups, self.dec):
            x = up.forward(x, training)
            s = skips.pop()
            if self.skip:
                self._split.append(x.shape[1])
                x = np.concatenate([x, s], axis=1)
            x = dec.forward(x, training)
        return self.softmax.forward(self.head.forward(x, training), training)

    def backward(self, dout):
        d = self.head.backward(self.softmax.backward(dout))
        dskips = []
        for i in reversed(range(len(self.dec))):
            d = self.dec[i].backward(d)
            if self.skip:
                k = self._split[i]
                dskips.append(d[:, k:])
                d = d[:, :k]
            d = self.ups[i].backward(d)
        d = self.bottleneck.backward(d)
        for i in reversed(range(self.depth)):
            d = self.pools[i].backward(d)
            if self.skip:
                d = d + dskips[i]
            d = self.enc[i].backward(d)
        return d
