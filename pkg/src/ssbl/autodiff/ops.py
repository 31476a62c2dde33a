"""The closed operator set used by both networks and all losses.

Volumes are channel-major arrays ``(C, X, Y, Z)``; there is no batch axis
(batch size is always one).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

_CHUNK_BYTES = 8 << 20


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out_extent(n: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - 3) // stride + 1


def _rows_per_chunk(cin: int, plane: int, itemsize: int) -> int:
    return max(1, _CHUNK_BYTES // (cin * 27 * plane * itemsize))


def _columns(xp: np.ndarray, x0: int, x1: int, out_yz: tuple[int, int], stride: int, buf: np.ndarray) -> np.ndarray:
    """im2col for output rows ``x0:x1``; returns (Cin*27, rows*oy*oz)."""
    oy, oz = out_yz
    rows = x1 - x0
    cols = buf[:, :, :rows]
    s = stride
    q = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                cols[:, q] = xp[:, s * x0 + i: s * (x1 - 1) + i + 1: s,
                                j: j + s * (oy - 1) + 1: s,
                                k: k + s * (oz - 1) + 1: s]
                q += 1
    return cols.reshape(xp.shape[0] * 27, rows * oy * oz)


def _correlate(xp: np.ndarray, wmat: np.ndarray, stride: int, out_shape, buf: np.ndarray) -> np.ndarray:
    """Valid 3x3x3 correlation of a padded input with a (Cout, Cin*27) kernel matrix."""
    ox, oy, oz = out_shape
    step = buf.shape[2]
    out = np.empty((wmat.shape[0], ox, oy, oz), dtype=buf.dtype)
    for x0 in range(0, ox, step):
        x1 = min(ox, x0 + step)
        cols = _columns(xp, x0, x1, (oy, oz), stride, buf)
        out[:, x0:x1] = (wmat @ cols).reshape(wmat.shape[0], x1 - x0, oy, oz)
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3x3 cross-correlation with zero padding; weight (Cout, Cin, 3, 3, 3)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if weight.value.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise ValueError(f"weight must be (Cout, Cin, 3, 3, 3), got {weight.shape}")
    cout, cin = weight.shape[:2]
    if x.value.ndim != 4 or x.shape[0] != cin:
        raise ValueError(f"input {x.shape} does not have {cin} channels")
    if bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    dtype = np.result_type(x.value, weight.value)
    p = padding
    xp = np.pad(x.value.astype(dtype, copy=False), ((0, 0), (p, p), (p, p), (p, p)))
    ox, oy, oz = (_out_extent(n, stride, p) for n in x.shape[1:])
    if min(ox, oy, oz) < 1:
        raise ValueError(f"input {x.shape} too small for padding {p}, stride {stride}")
    wmat = weight.value.reshape(cout, cin * 27).astype(dtype, copy=False)
    step = _rows_per_chunk(cin, oy * oz, np.dtype(dtype).itemsize)
    buf = np.empty((cin, 27, min(step, ox), oy, oz), dtype=dtype)
    out = _correlate(xp, wmat, stride, (ox, oy, oz), buf)
    out += bias.value.astype(dtype, copy=False)[:, None, None, None]

    def backward_fn(g):
        gb = g.sum(axis=(1, 2, 3)) if bias.requires_grad else None
        need_w = weight.requires_grad
        need_x = x.requires_grad
        gw = np.zeros_like(wmat) if need_w else None
        gx = None
        if need_w:
            for x0 in range(0, ox, step):
                x1 = min(ox, x0 + step)
                gw += g[:, x0:x1].reshape(cout, -1) @ _columns(xp, x0, x1, (oy, oz), stride, buf).T
        if need_x and stride == 1:
            # transposed convolution: flipped kernel, in/out channels swapped
            wt = weight.value[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            wt = np.ascontiguousarray(wt, dtype=dtype).reshape(cin, cout * 27)
            q = 2 - p
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (q, q)))
            tstep = _rows_per_chunk(cout, x.shape[2] * x.shape[3], np.dtype(dtype).itemsize)
            tbuf = np.empty((cout, 27, min(tstep, x.shape[1])) + x.shape[2:], dtype=dtype)
            gx = _correlate(gp, wt, 1, x.shape[1:], tbuf)
        elif need_x:
            gxp = np.zeros_like(xp)
            s = stride
            for x0 in range(0, ox, step):
                x1 = min(ox, x0 + step)
                gcols = (wmat.T @ g[:, x0:x1].reshape(cout, -1)).reshape(cin, 27, x1 - x0, oy, oz)
                q = 0
                for i in range(3):
                    for j in range(3):
                        for k in range(3):
                            gxp[:, s * x0 + i: s * (x1 - 1) + i + 1: s,
                                j: j + s * (oy - 1) + 1: s,
                                k: k + s * (oz - 1) + 1: s] += gcols[:, q]
                            q += 1
            nx, ny, nz = x.shape[1:]
            gx = gxp[:, p:p + nx, p:p + ny, p:p + nz]
        return gx, (gw.reshape(weight.shape) if need_w else None), gb

    return Tensor.from_op(out, (x, weight, bias), backward_fn, "conv3d")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    pos = x.value > 0
    out = np.where(pos, x.value, x.value * x.value.dtype.type(slope))

    def backward_fn(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return Tensor.from_op(out, (x,), backward_fn, "leaky_relu")


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    c, nx, ny, nz = x.shape
    out = np.broadcast_to(x.value[:, :, None, :, None, :, None], (c, nx, 2, ny, 2, nz, 2))
    out = out.reshape(c, 2 * nx, 2 * ny, 2 * nz)

    def backward_fn(g):
        return (g.reshape(c, nx, 2, ny, 2, nz, 2).sum(axis=(2, 4, 6)),)

    return Tensor.from_op(out, (x,), backward_fn, "upsample_nearest2x")


def concat_channels(*xs: Tensor) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    extents = {x.shape[1:] for x in xs}
    if len(extents) != 1:
        raise ValueError(f"cannot concatenate spatial extents {sorted(extents)}")
    out = np.concatenate([x.value for x in xs], axis=0)
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def backward_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return Tensor.from_op(out, xs, backward_fn, "concat_channels")


def softmax_channels(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shifted = x.value - x.value.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=0, keepdims=True)

    def backward_fn(g):
        return (out * (g - (out * g).sum(axis=0, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward_fn, "softmax_channels")


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at zero is zero."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=diff.dtype)

    def backward_fn(g):
        ga = np.sign(diff) * (g / n)
        return ga, -ga

    return Tensor.from_op(out, (a, b), backward_fn, "l1_mean")


def abs_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size
    out = np.asarray(np.abs(x.value).mean(dtype=np.float64), dtype=x.dtype)

    def backward_fn(g):
        return (np.sign(x.value) * (g / n),)

    return Tensor.from_op(out, (x,), backward_fn, "abs_mean")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return Tensor.from_op(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return Tensor.from_op(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return Tensor.from_op(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    f = x.dtype.type(factor)
    return Tensor.from_op(x.value * f, (x,), lambda g: (g * f,), "scale")


def total(x) -> Tensor:
    """Sum of all elements."""
    x = _as_tensor(x)
    shape = x.shape
    out = np.asarray(x.value.sum(dtype=np.float64), dtype=x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "total")


def forward_diff(x, axis: int) -> Tensor:
    """Forward difference ``x[i+1] - x[i]`` along a spatial axis (1, 2 or 3)."""
    x = _as_tensor(x)
    n = x.shape[axis]
    hi = [slice(None)] * x.value.ndim
    lo = [slice(None)] * x.value.ndim
    hi[axis], lo[axis] = slice(1, None), slice(0, n - 1)
    hi, lo = tuple(hi), tuple(lo)
    out = x.value[hi] - x.value[lo]

    def backward_fn(g):
        gx = np.zeros_like(x.value)
        gx[hi] += g
        gx[lo] -= g
        return (gx,)

    return Tensor.from_op(out, (x,), backward_fn, "forward_diff")


def cast(x: Tensor, dtype) -> Tensor:
    x = _as_tensor(x)
    src = x.dtype
    return Tensor.from_op(x.value.astype(dtype), (x,), lambda g: (g.astype(src),), "cast")
