"""Layer kinds: shape inference, parameter shapes, forward and backward.

Every layer is described by an immutable :class:`LayerSpec` and implemented
as a pair of pure functions.  ``forward`` returns the output together with a
cache; ``backward`` consumes that cache and the upstream gradient and returns
the input gradient plus one gradient per parameter array.

Image tensors are laid out as ``(batch, channels, height, width)``.
"""

from dataclasses import dataclass

import numpy as np

KINDS = ("dense", "conv2d", "maxpool2d", "relu", "maxout", "flatten")


class ShapeError(ValueError):
    """Raised when tensor or layer shapes are incompatible."""


@dataclass(frozen=True)
class LayerSpec:
    """A layer kind plus its integer dimensions.

    ``dims`` per kind:

    - dense: ``(n_in, n_out)``
    - conv2d: ``(in_channels, out_channels, kernel, stride)``
    - maxpool2d: ``(size, stride)``
    - maxout: ``(pieces,)``
    - relu, flatten: ``()``
    """

    kind: str
    dims: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = {"dense": 2, "conv2d": 4, "maxpool2d": 2, "maxout": 1,
                    "relu": 0, "flatten": 0}[self.kind]
        if len(self.dims) != expected:
            raise ValueError(f"{self.kind} takes {expected} dims, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"{self.kind} dims must be positive, got {self.dims}")

    def __str__(self):
        return f"{self.kind}{self.dims if self.dims else ''}"


def dense(n_in, n_out):
    return LayerSpec("dense", (n_in, n_out))


def conv2d(in_channels, out_channels, kernel, stride=1):
    return LayerSpec("conv2d", (in_channels, out_channels, kernel, stride))


def maxpool2d(size, stride=None):
    return LayerSpec("maxpool2d", (size, size if stride is None else stride))


def relu():
    return LayerSpec("relu")


def maxout(pieces):
    return LayerSpec("maxout", (pieces,))


def flatten():
    return LayerSpec("flatten")


def param_shapes(spec):
    """Shapes of the parameter arrays owned by ``spec``, in declaration order."""
    if spec.kind == "dense":
        n_in, n_out = spec.dims
        return [(n_in, n_out), (n_out,)]
    if spec.kind == "conv2d":
        c_in, c_out, k, _ = spec.dims
        return [(c_out, c_in, k, k), (c_out,)]
    return []


def param_count(spec):
    return sum(int(np.prod(s)) for s in param_shapes(spec))


def fan_in(spec):
    if spec.kind == "dense":
        return spec.dims[0]
    if spec.kind == "conv2d":
        return spec.dims[0] * spec.dims[2] ** 2
    return 0


def output_shape(spec, in_shape):
    """Per-sample output shape of ``spec`` applied to ``in_shape``.

    Raises :class:`ShapeError` when the input shape cannot feed the layer.
    """
    in_shape = tuple(in_shape)
    kind = spec.kind
    if kind == "dense":
        if in_shape != (spec.dims[0],):
            raise ShapeError(f"dense expects input ({spec.dims[0]},), got {in_shape}")
        return (spec.dims[1],)
    if kind == "conv2d":
        c_in, c_out, k, s = spec.dims
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ShapeError(f"conv2d expects ({c_in}, H, W), got {in_shape}")
        h, w = in_shape[1:]
        if h < k or w < k:
            raise ShapeError(f"conv2d kernel {k} larger than input {h}x{w}")
        return (c_out, (h - k) // s + 1, (w - k) // s + 1)
    if kind == "maxpool2d":
        size, s = spec.dims
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h < size or w < size:
            raise ShapeError(f"maxpool2d window {size} larger than input {h}x{w}")
        return (c, (h - size) // s + 1, (w - size) // s + 1)
    if kind == "maxout":
        (p,) = spec.dims
        if len(in_shape) < 1 or in_shape[0] % p:
            raise ShapeError(f"maxout pieces {p} must divide channel count of {in_shape}")
        return (in_shape[0] // p,) + in_shape[1:]
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    return in_shape  # relu


def _offset(x, i, j, s, ho, wo):
    # strided view of the inputs that window offset (i, j) touches
    return x[..., i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def forward(spec, params, x):
    kind = spec.kind
    if kind == "dense":
        w, b = params
        return x @ w + b, x
    if kind == "conv2d":
        # im2col in channel-major layout: cols[(c, i, j), (n, y, x)]
        w, b = params
        c_in, c_out, k, s = spec.dims
        m, _, h, wd = x.shape
        ho, wo = (h - k) // s + 1, (wd - k) // s + 1
        cols = np.empty((c_in, k, k, m, ho, wo), dtype=x.dtype)
        xt = x.transpose(1, 0, 2, 3)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = _offset(xt, i, j, s, ho, wo)
        cols = cols.reshape(c_in * k * k, -1)
        y = w.reshape(c_out, -1) @ cols + b[:, None]
        y = np.ascontiguousarray(y.reshape(c_out, m, ho, wo).transpose(1, 0, 2, 3))
        return y, (cols, x.shape)
    if kind == "maxpool2d":
        size, s = spec.dims
        m, c, h, wd = x.shape
        ho, wo = (h - size) // s + 1, (wd - size) // s + 1
        if size == s:
            return _pool_tiled(x, size, ho, wo)
        y = _offset(x, 0, 0, s, ho, wo).copy()
        arg = np.zeros(y.shape, dtype=np.int8 if size * size < 128 else np.int32)
        for o in range(1, size * size):
            v = _offset(x, o // size, o % size, s, ho, wo)
            better = v > y  # strict: the first maximum wins ties
            np.copyto(y, v, where=better)
            arg[better] = o
        return y, (arg, x.shape)
    if kind == "relu":
        mask = x > 0
        return x * mask, mask
    if kind == "maxout":
        (p,) = spec.dims
        grouped = x.reshape((x.shape[0], x.shape[1] // p, p) + x.shape[2:])
        arg = grouped.argmax(axis=2)
        y = np.take_along_axis(grouped, arg[:, :, None], axis=2)[:, :, 0]
        return y, (arg, x.shape)
    # flatten
    return x.reshape(x.shape[0], -1), x.shape


def backward(spec, params, cache, gy, need_input_grad=True):
    """Return ``(grad_input, [grad_param, ...])`` for one layer.

    With ``need_input_grad=False`` parameterized layers may return ``None``
    for the input gradient.
    """
    kind = spec.kind
    if kind == "dense":
        w, _ = params
        x = cache
        gx = gy @ w.T if need_input_grad else None
        return gx, [x.T @ gy, gy.sum(axis=0)]
    if kind == "conv2d":
        w, _ = params
        c_in, c_out, k, s = spec.dims
        cols, x_shape = cache
        m, _, ho, wo = gy.shape
        g2 = gy.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        if not need_input_grad:
            return None, [gw, gb]
        gcols = (w.reshape(c_out, -1).T @ g2).reshape(c_in, k, k, m, ho, wo)
        gx = np.zeros((c_in, m) + tuple(x_shape[2:]), dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                _offset(gx, i, j, s, ho, wo)[...] += gcols[:, i, j]
        return gx.transpose(1, 0, 2, 3), [gw, gb]
    if kind == "maxpool2d":
        size, s = spec.dims
        if size == s:
            return _unpool_tiled(gy, size, cache), []
        arg, x_shape = cache
        ho, wo = arg.shape[2:]
        gx = np.zeros(x_shape, dtype=gy.dtype)
        for o in range(size * size):
            _offset(gx, o // size, o % size, s, ho, wo)[...] += gy * (arg == o)
        return gx, []
    if kind == "relu":
        return gy * cache, []
    if kind == "maxout":
        (p,) = spec.dims
        arg, x_shape = cache
        grouped = np.zeros((x_shape[0], x_shape[1] // p, p) + x_shape[2:], dtype=gy.dtype)
        np.put_along_axis(grouped, arg[:, :, None], gy[:, :, None], axis=2)
        return grouped.reshape(x_shape), []
    return gy.reshape(cache), []


def _running_max(pieces):
    # elementwise max over a list of arrays plus the index of the winner;
    # the earliest piece wins ties
    best = pieces[0].copy()
    arg = np.zeros(best.shape, dtype=np.int8)
    for o, v in enumerate(pieces[1:], start=1):
        better = v > best
        np.copyto(best, v, where=better)
        arg[better] = o
    return best, arg


def _pool_tiled(x, p, ho, wo):
    # non-overlapping windows: reduce row pairs (contiguous) then columns
    m, c = x.shape[:2]
    rows = x[:, :, :ho * p, :wo * p].reshape(m, c, ho, p, wo * p)
    r, row_arg = _running_max([rows[:, :, :, i] for i in range(p)])
    cols = r.reshape(m, c, ho, wo, p)
    y, col_arg = _running_max([cols[..., j] for j in range(p)])
    return y, (row_arg, col_arg, x.shape)


def _unpool_tiled(gy, p, cache):
    row_arg, col_arg, x_shape = cache
    m, c, ho, wo = gy.shape
    gr = np.zeros((m, c, ho, wo, p), dtype=gy.dtype)
    for j in range(p):
        gr[..., j] = gy * (col_arg == j)
    gr = gr.reshape(m, c, ho, wo * p)
    g5 = np.zeros((m, c, ho, p, wo * p), dtype=gy.dtype)
    for i in range(p):
        g5[:, :, :, i] = gr * (row_arg == i)
    gx = np.zeros(x_shape, dtype=gy.dtype)
    gx[:, :, :ho * p, :wo * p] = g5.reshape(m, c, ho * p, wo * p)
    return gx
