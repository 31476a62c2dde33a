"""Differentiable trilinear warping and deformation-field algebra.

Convention: backward warping in voxel index space,
``out(p) = I(p + phi(p))``, with sample coordinates clamped to the volume.
Fields are arrays of shape (3, X, Y, Z) holding (u_x, u_y, u_z) in voxels.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .volume import top_quantile_value


class InversionDivergedError(RuntimeError):
    def __init__(self, trace: list[float]):
        super().__init__(f"field inversion diverged; residual trace {trace}")
        self.trace = trace


def _axis_weights(coord: np.ndarray, n: int):
    """Lower index, fractional offset and in-range mask along one axis.

    Integer coordinates use the cell to their right (the last cell at the far
    face), so derivatives at the kink set are right-continuous.
    """
    inside = (coord >= 0) & (coord <= n - 1)
    c = np.clip(coord, 0, n - 1)
    if n == 1:
        zero = np.zeros(coord.shape, dtype=np.intp)
        return zero, zero, np.zeros_like(c), inside
    # NaN coordinates index a valid cell but keep NaN weights, so they propagate
    i0 = np.minimum(np.floor(np.nan_to_num(c)).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside


class _Sampler:
    """Trilinear sampling plan for one field; reusable across channels."""

    def __init__(self, field: np.ndarray):
        _, nx, ny, nz = field.shape
        self.dims = (nx, ny, nz)
        dt = field.dtype
        grid = np.meshgrid(np.arange(nx, dtype=dt), np.arange(ny, dtype=dt),
                           np.arange(nz, dtype=dt), indexing="ij")
        axes = [_axis_weights(grid[a] + field[a], n) for a, n in enumerate(self.dims)]
        (self.x0, self.x1, self.fx, self.mx), (self.y0, self.y1, self.fy, self.my), \
            (self.z0, self.z1, self.fz, self.mz) = axes

    def corners(self):
        fx, fy, fz = self.fx, self.fy, self.fz
        gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
        for xi, wx in ((self.x0, gx), (self.x1, fx)):
            for yi, wy in ((self.y0, gy), (self.y1, fy)):
                for zi, wz in ((self.z0, gz), (self.z1, fz)):
                    yield (xi, yi, zi), wx * wy * wz

    def sample(self, image: np.ndarray) -> np.ndarray:
        """image (C, X, Y, Z) -> warped (C, X, Y, Z)."""
        out = np.zeros(image.shape, dtype=np.result_type(image, self.fx))
        for idx, w in self.corners():
            out += image[(slice(None),) + idx] * w
        return out

    def flat_index(self, idx) -> np.ndarray:
        nx, ny, nz = self.dims
        xi, yi, zi = idx
        return ((xi * ny + yi) * nz + zi).ravel()

    def image_adjoint(self, g: np.ndarray) -> np.ndarray:
        """Scatter output gradients back onto the source grid."""
        size = int(np.prod(self.dims))
        out = np.zeros((g.shape[0], size), dtype=g.dtype)
        for idx, w in self.corners():
            flat = self.flat_index(idx)
            for c in range(g.shape[0]):
                out[c] += np.bincount(flat, weights=(g[c] * w).ravel(), minlength=size)
        return out.reshape(g.shape)

    def coordinate_adjoint(self, image: np.ndarray, g: np.ndarray) -> np.ndarray:
        """d(sum g * out)/d(field), zero where the coordinate was clamped."""
        fx, fy, fz = self.fx, self.fy, self.fz
        gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
        sl = (slice(None),)

        def at(xi, yi, zi):
            return image[sl + (xi, yi, zi)]

        c000, c100 = at(self.x0, self.y0, self.z0), at(self.x1, self.y0, self.z0)
        c010, c110 = at(self.x0, self.y1, self.z0), at(self.x1, self.y1, self.z0)
        c001, c101 = at(self.x0, self.y0, self.z1), at(self.x1, self.y0, self.z1)
        c011, c111 = at(self.x0, self.y1, self.z1), at(self.x1, self.y1, self.z1)
        dx = ((c100 - c000) * gy * gz + (c110 - c010) * fy * gz
              + (c101 - c001) * gy * fz + (c111 - c011) * fy * fz)
        dy = ((c010 - c000) * gx * gz + (c110 - c100) * fx * gz
              + (c011 - c001) * gx * fz + (c111 - c101) * fx * fz)
        dz = ((c001 - c000) * gx * gy + (c101 - c100) * fx * gy
              + (c011 - c010) * gx * fy + (c111 - c110) * fx * fy)
        if self.dims[0] == 1:
            dx = np.zeros_like(dx)
        if self.dims[1] == 1:
            dy = np.zeros_like(dy)
        if self.dims[2] == 1:
            dz = np.zeros_like(dz)
        return np.stack([(g * dx).sum(axis=0) * self.mx,
                         (g * dy).sum(axis=0) * self.my,
                         (g * dz).sum(axis=0) * self.mz])


def _field_array(f) -> np.ndarray:
    arr = np.asarray(getattr(f, "data", f))
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise ValueError(f"field must have shape (3, X, Y, Z), got {arr.shape}")
    return arr


def warp(image: Tensor, field: Tensor) -> Tensor:
    """Backward-warp every channel of ``image`` by ``field``; differentiable in both."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    field = field if isinstance(field, Tensor) else Tensor(field)
    if field.value.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"field must have shape (3, X, Y, Z), got {field.shape}")
    if image.value.ndim != 4 or image.shape[1:] != field.shape[1:]:
        raise ValueError(f"image {image.shape} and field {field.shape} extents differ")
    dtype = np.result_type(image.value, field.value)
    img = image.value.astype(dtype, copy=False)
    plan = _Sampler(field.value.astype(dtype, copy=False))
    out = plan.sample(img)

    def backward_fn(g):
        gi = plan.image_adjoint(g) if image.requires_grad else None
        gf = plan.coordinate_adjoint(img, g) if field.requires_grad else None
        return gi, gf

    return Tensor.from_op(out, (image, field), backward_fn, "warp")


# ---------------------------------------------------------------------------
# Field algebra on plain arrays
# ---------------------------------------------------------------------------

def sample(values: np.ndarray, field) -> np.ndarray:
    """Non-differentiable warp of an (X,Y,Z) or (C,X,Y,Z) array."""
    f = _field_array(field)
    values = np.asarray(values)
    squeeze = values.ndim == 3
    arr = values[None] if squeeze else values
    if arr.shape[1:] != f.shape[1:]:
        raise ValueError(f"values {values.shape} and field {f.shape} extents differ")
    out = _Sampler(f).sample(arr)
    return out[0] if squeeze else out


def warp_field(inner, by) -> np.ndarray:
    """Warp each component of ``inner`` by ``by``."""
    return sample(_field_array(inner), by)


def compose(first, then) -> np.ndarray:
    """``first(p) + then(p + first(p))``: warping by the result equals warping by
    ``then`` and afterwards by ``first``."""
    a, b = _field_array(first), _field_array(then)
    if a.shape != b.shape:
        raise ValueError(f"field extents differ: {a.shape} vs {b.shape}")
    return a + sample(b, a)


def field_magnitude(field) -> np.ndarray:
    f = _field_array(field).astype(np.float64)
    return np.sqrt((f * f).sum(axis=0))


def invert_field(field, iterations: int = 10, return_trace: bool = False):
    """Fixed-point inverse ``g <- -f(p + g(p))`` starting from ``g = 0``.

    Returns ``(g, residual)`` where residual is the mean magnitude of
    ``compose(f, g)``; with ``return_trace`` the per-iteration residuals follow.
    """
    f = _field_array(field)
    g = np.zeros_like(f)
    trace = [float(field_magnitude(f).mean())]
    best = trace[0]
    for _ in range(iterations):
        g = -sample(f, g)
        res = float(field_magnitude(compose(f, g)).mean())
        trace.append(res)
        if not np.isfinite(res) or res > 1.5 * best + 1e-6:
            raise InversionDivergedError(trace)
        best = min(best, res)
    if return_trace:
        return g, trace[-1], trace
    return g, trace[-1]


def euclidean_distance_map(region: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance (voxels) from every voxel to the nearest ``region`` voxel."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return np.zeros(region.shape)
    return ndimage.distance_transform_edt(~region)


def motion_distance_map(field, threshold_quantile: float = 0.9) -> np.ndarray:
    """Distance to the high-motion region, scaled by the index-space diagonal.

    The region holds the voxels whose displacement magnitude reaches the
    nearest-rank ``threshold_quantile`` (and is nonzero). An empty region
    yields an all-zero map.
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError("threshold_quantile must lie in (0, 1)")
    mag = field_magnitude(field)
    threshold = top_quantile_value(mag, 1.0 - threshold_quantile)
    region = (mag >= threshold) & (mag > 0)
    diag = float(np.sqrt(sum((n - 1) ** 2 for n in mag.shape)))
    if not region.any() or diag == 0:
        return np.zeros(mag.shape, dtype=np.float32)
    return np.clip(euclidean_distance_map(region) / diag, 0.0, 1.0).astype(np.float32)
