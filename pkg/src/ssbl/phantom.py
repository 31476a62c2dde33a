"""Synthetic 4D left-ventricle phantom with analytic motion.

Every phase is the end-diastolic template pushed through a closed-form map
``M_t = twist_t o radial_t`` acting on material (ED) coordinates. Images and
masks are obtained by pulling the template back through ``M_t^-1``, and the
field that warps phase A onto phase B is ``M_A(M_B^-1(p)) - p`` on B's grid,
so ``warp(frame_A, field_AB) ~ frame_B``.

Radial map, in coordinates normalised by the cavity semi-axes (rho = 1 is the
endocardium):

* cavity: ``r = s (rho + beta rho^2 (1 - rho))``; ``beta`` grows with
  contraction and drags interior material (papillary bodies) towards the
  wall, so they touch it near end-systole while the cavity volume stays
  ``s^3`` times its ED value;
* wall and beyond: ``r = rho + (cbrt(rho^3 - 1 + s^3) - rho) tau(rho)``, an
  incompressible shell that is blended back to the identity outside the
  epicardium.

The twist is a rotation about the long (z) axis whose angle depends only on z
and on the in-plane radius, both of which the rotation preserves, so it is
inverted in closed form. The radial map is inverted by bisection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume import (
    DeformationField,
    LabelMask,
    StudyManifest,
    VolumeGrid,
    load_field,
    load_manifest,
    load_mask,
    load_volume,
    save_manifest,
    save_volume,
)

BACKGROUND = 0.2
BLOOD = 0.55
MUSCLE = 0.8
TAPER_VOXELS = 5.0


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic study; lengths are in voxels."""

    dims: tuple[int, int, int] = (48, 48, 48)
    time_points: int = 10
    semi_axes: tuple[float, float, float] = (10.0, 10.0, 12.0)
    thickness: float = 4.0
    ejection_fraction: float = 0.5
    max_twist_deg: float = 8.0
    papillary_count: int = 2
    papillary_radius: float = 2.5
    papillary_gap: float = 1.5
    noise_sigma: float = 0.02
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    center: tuple[float, float, float] | None = None
    # weight of a linear ramp blended into the sin^2 contraction curve
    profile_mix: float = 0.25
    # how strongly contraction pulls cavity material towards the wall (< 1)
    papillary_pull: float = 0.9
    # width (voxels) of the linear partial-volume ramp at tissue interfaces; 0 = hard edges
    edge_width: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        self.validate()

    @property
    def cavity_center(self) -> np.ndarray:
        if self.center is not None:
            return np.array(self.center)
        return (np.array(self.dims, dtype=float) - 1.0) / 2.0

    @property
    def end_systole(self) -> int:
        return self.time_points // 2

    def contraction_amplitude(self) -> float:
        """``a`` such that the cavity volume at end-systole is (1 - EF) of ED."""
        return 1.0 - (1.0 - self.ejection_fraction) ** (1.0 / 3.0)

    def max_displacement(self, axis: int | None = None) -> float:
        """Upper bound on any voxel's displacement over the cycle, optionally
        along one axis (the twist never moves material along z)."""
        radial = self.contraction_amplitude() * (max(self.semi_axes) if axis is None else self.semi_axes[axis])
        twist = math.radians(self.max_twist_deg) * (max(self.semi_axes[:2]) + self.thickness + TAPER_VOXELS)
        return radial + (0.0 if axis == 2 else twist)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError(f"dims must be three extents >= 2, got {self.dims}")
        if self.time_points < 2:
            raise ValueError("time_points must be >= 2")
        if not 0.0 < self.ejection_fraction < 1.0:
            raise ValueError("ejection_fraction must lie in (0, 1)")
        if min(self.semi_axes) <= 0 or self.thickness <= 0:
            raise ValueError("semi_axes and thickness must be positive")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if self.noise_sigma < 0 or self.papillary_radius < 0 or self.papillary_count < 0:
            raise ValueError("noise and papillary parameters must be non-negative")
        if not 0.0 <= self.profile_mix <= 1.0:
            raise ValueError("profile_mix must lie in [0, 1]")
        if self.edge_width < 0:
            raise ValueError("edge_width must be non-negative")
        if not 0.0 <= self.papillary_pull < 1.0:
            raise ValueError("papillary_pull must lie in [0, 1)")
        c = self.cavity_center
        for axis in range(3):
            need = self.thickness + self.max_displacement(axis)
            room = min(c[axis], self.dims[axis] - 1 - c[axis]) - self.semi_axes[axis]
            if room < need:
                raise ValueError(
                    f"cavity leaves {room:.2f} voxels along axis {axis}; "
                    f"thickness + max displacement needs {need:.2f}")


def jittered_spec(base: PhantomSpec, seed: int) -> PhantomSpec:
    """A per-study variant of ``base``: shifted centre, perturbed axes, EF and twist."""
    rng = np.random.default_rng(seed)
    axes = np.array(base.semi_axes) + rng.uniform(-1.5, 1.5, 3)
    center = base.cavity_center + rng.uniform(-1.5, 1.5, 3)
    return replace(
        base,
        semi_axes=tuple(axes),
        center=tuple(center),
        ejection_fraction=float(np.clip(base.ejection_fraction + rng.uniform(-0.04, 0.04), 0.05, 0.95)),
        max_twist_deg=float(base.max_twist_deg * rng.uniform(0.75, 1.25)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Time course
# ---------------------------------------------------------------------------

def contraction_profile(spec: PhantomSpec, t: float) -> float:
    """0 at end-diastole (t = 0), 1 at end-systole (t = T/2), periodic in T."""
    phase = (t % spec.time_points) / spec.time_points
    wave = math.sin(math.pi * phase) ** 2
    ramp = 1.0 - abs(1.0 - 2.0 * phase)
    return (1.0 - spec.profile_mix) * wave + spec.profile_mix * ramp


def scale_at(spec: PhantomSpec, t: float) -> float:
    return 1.0 - spec.contraction_amplitude() * contraction_profile(spec, t)


def twist_at(spec: PhantomSpec, t: float) -> float:
    """Twist angle in radians."""
    return math.radians(spec.max_twist_deg) * contraction_profile(spec, t)


# ---------------------------------------------------------------------------
# The analytic map
# ---------------------------------------------------------------------------

class _Geometry:
    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        self.c = spec.cavity_center.reshape(3, 1)
        self.axes = np.array(spec.semi_axes).reshape(3, 1)
        mean_axis = float(np.mean(spec.semi_axes))
        self.rho_epi = 1.0 + spec.thickness / mean_axis
        self.rho_taper = TAPER_VOXELS / mean_axis
        self.r_out = max(spec.semi_axes[:2]) + spec.thickness
        self.z_half = spec.semi_axes[2] + spec.thickness

    # radial part -----------------------------------------------------------
    def _tau(self, rho):
        return 1.0 - _smoothstep((rho - self.rho_epi) / self.rho_taper)

    def radial_profile(self, rho: np.ndarray, s: float, beta: float) -> np.ndarray:
        cav = s * (rho + beta * rho * rho * (1.0 - rho))
        shell = np.cbrt(np.maximum(rho, 1.0) ** 3 - 1.0 + s ** 3)
        out = rho + (shell - rho) * self._tau(rho)
        return np.where(rho < 1.0, cav, out)

    def _invert_profile(self, r: np.ndarray, s: float, beta: float) -> np.ndarray:
        lo = np.zeros_like(r)
        hi = np.maximum(r / s, r + 1.0) + 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self.radial_profile(mid, s, beta) < r
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def _radial(self, pts: np.ndarray, t: float, inverse: bool) -> np.ndarray:
        s = scale_at(self.spec, t)
        if s == 1.0:
            return pts
        beta = self.spec.papillary_pull * contraction_profile(self.spec, t)
        u = (pts - self.c) / self.axes
        rho = np.sqrt((u * u).sum(axis=0))
        if inverse:
            new = self._invert_profile(rho, s, beta)
        else:
            new = self.radial_profile(rho, s, beta)
        ratio = np.divide(new, rho, out=np.full_like(rho, s), where=rho > 0)
        return self.c + self.axes * u * ratio

    # twist part ------------------------------------------------------------
    def _twist_angle(self, pts: np.ndarray, theta: float) -> np.ndarray:
        d = pts - self.c
        dz = d[2]
        zeta = dz / self.z_half * (1.0 - _smoothstep((np.abs(dz) - self.z_half) / TAPER_VOXELS))
        r_xy = np.hypot(d[0] * self.spec.spacing[0], d[1] * self.spec.spacing[1])
        falloff = 1.0 - _smoothstep((r_xy - self.r_out) / TAPER_VOXELS)
        return theta * zeta * falloff

    def _twist(self, pts: np.ndarray, t: float, inverse: bool) -> np.ndarray:
        theta = twist_at(self.spec, t)
        if theta == 0.0:
            return pts
        ang = self._twist_angle(pts, theta)
        if inverse:
            ang = -ang
        cos, sin = np.cos(ang), np.sin(ang)
        sx, sy = self.spec.spacing[:2]
        dx = (pts[0] - self.c[0]) * sx
        dy = (pts[1] - self.c[1]) * sy
        out = pts.copy()
        out[0] = self.c[0] + (cos * dx - sin * dy) / sx
        out[1] = self.c[1] + (sin * dx + cos * dy) / sy
        return out

    def forward(self, material: np.ndarray, t: float) -> np.ndarray:
        return self._twist(self._radial(material, t, inverse=False), t, inverse=False)

    def inverse(self, position: np.ndarray, t: float) -> np.ndarray:
        return self._radial(self._twist(position, t, inverse=True), t, inverse=True)

    def rho(self, material: np.ndarray) -> np.ndarray:
        u = (material - self.c) / self.axes
        return np.sqrt((u * u).sum(axis=0))


def _grid_points(dims) -> np.ndarray:
    idx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    return np.stack([g.ravel() for g in idx])


def material_coordinates(spec: PhantomSpec, t: float) -> np.ndarray:
    """ED-frame position of the material found at every voxel of phase ``t``; (3, X, Y, Z)."""
    if contraction_profile(spec, t) == 0.0:
        return _grid_points(spec.dims).reshape((3,) + spec.dims)
    geo = _Geometry(spec)
    return geo.inverse(_grid_points(spec.dims), t).reshape((3,) + spec.dims)


def phase_positions(spec: PhantomSpec, t: float, material: np.ndarray) -> np.ndarray:
    """Where material points (3, ...) sit at phase ``t``."""
    geo = _Geometry(spec)
    shape = material.shape
    return geo.forward(material.reshape(3, -1), t).reshape(shape)


def analytic_field(spec: PhantomSpec, t_from: float, t_to: float) -> DeformationField:
    """Field on the grid of ``t_to`` that pulls phase ``t_from`` onto it."""
    if t_from == t_to:
        return DeformationField(np.zeros((3,) + spec.dims, dtype=np.float32), spec.spacing)
    geo = _Geometry(spec)
    p = _grid_points(spec.dims)
    disp = geo.forward(geo.inverse(p, t_to), t_from) - p
    return DeformationField(disp.reshape((3,) + spec.dims).astype(np.float32), spec.spacing)


def jacobian_determinant(field_data: np.ndarray) -> np.ndarray:
    """det(I + grad u) by central differences (one-sided at the faces)."""
    grads = [np.gradient(field_data[i].astype(np.float64), axis=(0, 1, 2)) for i in range(3)]
    jac = np.empty(field_data.shape[1:] + (3, 3))
    for i in range(3):
        for j in range(3):
            jac[..., i, j] = grads[i][j] + (1.0 if i == j else 0.0)
    return np.linalg.det(jac)


# ---------------------------------------------------------------------------
# Template and rendering
# ---------------------------------------------------------------------------

def papillary_centers(spec: PhantomSpec) -> np.ndarray:
    """ED positions of the papillary bodies, (count, 3), inside the cavity near the wall."""
    rng = np.random.default_rng([spec.seed, 1])
    c = spec.cavity_center
    base = rng.uniform(0.0, 2.0 * math.pi)
    centers = []
    for k in range(spec.papillary_count):
        ang = base + 2.0 * math.pi * k / max(spec.papillary_count, 1) + rng.uniform(-0.4, 0.4)
        z_off = rng.uniform(-0.3, 0.1) * spec.semi_axes[2]
        direction = np.array([math.cos(ang) * spec.semi_axes[0], math.sin(ang) * spec.semi_axes[1], z_off])
        # distance along the ray at which rho = 1
        u = direction / np.array(spec.semi_axes)
        wall = 1.0 / float(np.linalg.norm(u))
        unit = direction / np.linalg.norm(direction)
        depth = spec.papillary_radius + spec.papillary_gap
        centers.append(c + unit * max(wall * np.linalg.norm(direction) - depth, 0.0))
    return np.array(centers).reshape(-1, 3)


def _noise_template(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 2])
    return (spec.noise_sigma * rng.standard_normal(spec.dims)).astype(np.float64)


def _sample_clamped(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear lookup of a 3D array at (3, N) index coordinates, clamped to the grid."""
    dims = values.shape
    idx0, frac = [], []
    for a in range(3):
        c = np.clip(pts[a], 0, dims[a] - 1)
        i0 = np.minimum(np.floor(c).astype(np.intp), max(dims[a] - 2, 0))
        idx0.append(i0)
        frac.append(c - i0)
    out = np.zeros(pts.shape[1])
    for dx in (0, 1):
        wx = frac[0] if dx else 1 - frac[0]
        for dy in (0, 1):
            wy = frac[1] if dy else 1 - frac[1]
            for dz in (0, 1):
                wz = frac[2] if dz else 1 - frac[2]
                xi = np.minimum(idx0[0] + dx, dims[0] - 1)
                yi = np.minimum(idx0[1] + dy, dims[1] - 1)
                zi = np.minimum(idx0[2] + dz, dims[2] - 1)
                out += values[xi, yi, zi] * wx * wy * wz
    return out


def _inside_fraction(signed_distance: np.ndarray, width: float) -> np.ndarray:
    """Partial-volume occupancy from a signed distance (negative inside)."""
    if width == 0:
        return (signed_distance < 0).astype(np.float64)
    return np.clip(0.5 - signed_distance / width, 0.0, 1.0)


def _labels_and_intensity(spec: PhantomSpec, material: np.ndarray, noise: np.ndarray):
    geo = _Geometry(spec)
    pts = material.reshape(3, -1)
    u = (pts - geo.c) / geo.axes
    rho = np.sqrt((u * u).sum(axis=0))
    # first-order distance to the level sets of rho, in voxels
    grad = np.sqrt(((u / np.maximum(rho, 1e-9)) ** 2 / geo.axes ** 2).sum(axis=0))
    grad = np.maximum(grad, 1e-9)
    cavity = _inside_fraction((rho - 1.0) / grad, spec.edge_width)
    tissue = _inside_fraction((rho - geo.rho_epi) / grad, spec.edge_width)
    papillary = np.zeros_like(rho)
    for centre in papillary_centers(spec):
        dist = np.sqrt(((pts - centre.reshape(3, 1)) ** 2).sum(axis=0)) - spec.papillary_radius
        papillary = np.maximum(papillary, _inside_fraction(dist, spec.edge_width))
    papillary = np.minimum(papillary, cavity)
    intensity = (BACKGROUND * (1.0 - tissue) + MUSCLE * (tissue - cavity)
                 + BLOOD * (cavity - papillary) + MUSCLE * papillary)
    if spec.noise_sigma > 0:
        intensity = intensity + _sample_clamped(noise, pts)
    return (rho < 1.0).reshape(spec.dims), intensity.reshape(spec.dims)


@dataclass
class PhantomSequence:
    spec: PhantomSpec
    volumes: list[VolumeGrid]
    masks: list[LabelMask]
    fields: dict[tuple[int, int], DeformationField] = field(default_factory=dict)

    @property
    def time_points(self) -> int:
        return len(self.volumes)

    def cavity_volumes(self) -> np.ndarray:
        """Cavity volume per phase in mm^3 (voxel count times voxel volume)."""
        voxel = float(np.prod(self.spec.spacing))
        return np.array([float(m.data.sum()) * voxel for m in self.masks])


def render_phase(spec: PhantomSpec, t: float, noise: np.ndarray | None = None,
                 material: np.ndarray | None = None) -> tuple[VolumeGrid, LabelMask]:
    if noise is None:
        noise = _noise_template(spec)
    if material is None:
        material = material_coordinates(spec, t)
    cavity, intensity = _labels_and_intensity(spec, material, noise)
    return (VolumeGrid(intensity.astype(np.float32), spec.spacing),
            LabelMask(cavity.astype(np.uint8), 2, spec.spacing))


def generate(spec: PhantomSpec) -> PhantomSequence:
    """All phases, cavity masks, and the analytic fields for every adjacent pair
    in both directions (including the cyclic pair T-1 <-> 0)."""
    spec.validate()
    geo = _Geometry(spec)
    grid = _grid_points(spec.dims)
    noise = _noise_template(spec)
    material = [geo.inverse(grid, t) for t in range(spec.time_points)]
    volumes, masks = [], []
    for t in range(spec.time_points):
        v, m = render_phase(spec, t, noise, material[t].reshape((3,) + spec.dims))
        volumes.append(v)
        masks.append(m)
    fields = {}
    for a in range(spec.time_points):
        for b in ((a + 1) % spec.time_points, (a - 1) % spec.time_points):
            if b != a:
                disp = geo.forward(material[b], a) - grid
                fields[(a, b)] = DeformationField(
                    disp.reshape((3,) + spec.dims).astype(np.float32), spec.spacing)
    return PhantomSequence(spec, volumes, masks, fields)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _field_key(a: int, b: int) -> str:
    return f"{a}->{b}"


def export_study(seq: PhantomSequence, directory, study_id: str | None = None) -> StudyManifest:
    """Write volumes, masks, fields and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vols, masks, fields = [], [], {}
    for t, (v, m) in enumerate(zip(seq.volumes, seq.masks)):
        save_volume(v, directory / f"t{t}.vol")
        save_volume(m, directory / f"t{t}.mask")
        vols.append(f"t{t}.vol")
        masks.append(f"t{t}.mask")
    for (a, b), f in sorted(seq.fields.items()):
        name = f"t{a}to{b}.field"
        save_volume(f, directory / name)
        fields[_field_key(a, b)] = name
    manifest = StudyManifest(
        study_id=study_id or f"phantom-{seq.spec.seed}",
        volumes=vols,
        spacing=seq.spec.spacing,
        masks=masks,
        fields=fields,
        root=directory,
    )
    spec_doc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in seq.spec.__dict__.items()}
    save_manifest(manifest, directory / "manifest.json")
    (directory / "phantom_spec.json").write_text(_dumps(spec_doc))
    return manifest


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_study(path) -> tuple[StudyManifest, list[VolumeGrid], list[LabelMask] | None]:
    manifest = load_manifest(path)
    vols = [load_volume(manifest.path(r)) for r in manifest.volumes]
    masks = [load_mask(manifest.path(r)) for r in manifest.masks] if manifest.masks else None
    return manifest, vols, masks


def load_study_field(manifest: StudyManifest, a: int, b: int) -> DeformationField:
    key = _field_key(a, b)
    if key not in manifest.fields:
        raise KeyError(f"study {manifest.study_id} has no field {key}")
    return load_field(manifest.path(manifest.fields[key]))


def build_corpus(base: PhantomSpec, seeds, directory) -> list[StudyManifest]:
    """Generate and export one jittered study per seed under ``directory/study-<seed>``."""
    directory = Path(directory)
    return [export_study(generate(jittered_spec(base, s)), directory / f"study-{s}", f"study-{s}")
            for s in seeds]
