"""Equirectangular camera model, voxel grids, and sampling.

COORDINATE CONVENTIONS
======================
World frame (right-handed):
  - x, y horizontal, z up, meters.
  - Azimuth theta = atan2(y, x), measured about +z.

Equirectangular image:
  - u (column) from azimuth: u = ((theta / 2pi) + 0.5) * W  mod W,
    with theta taken in the camera frame after removing yaw, so the
    image center column looks along the yaw direction.
  - v (row) from elevation: v = (0.5 - phi / pi) * H with
    phi = atan2(z', hypot(x', y')); v = 0 is the zenith row.
  - u wraps modulo W; v spans [0, H].

Continuous cell coordinates:
  - Cell i has its center at coordinate i, so a grid of N cells covers
    [-0.5, N - 0.5].  All samplers share this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# Feature tensors are plain numpy arrays (row-major, finite); the alias
# documents intent at API boundaries.
FeatureField = np.ndarray


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ErpCamera:
    """Panoramic camera: image size, world position, yaw of the center ray."""

    image_width: int
    image_height: int
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def __post_init__(self):
        if self.image_width < 2 or self.image_height < 2:
            raise GeometryError("image must be at least 2x2")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        if self.position.shape != (3,):
            raise GeometryError("position must be a 3-vector")

    def scaled(self, width: int, height: int) -> "ErpCamera":
        """Same pose, different image resolution (for feature-map sampling)."""
        return ErpCamera(width, height, self.position.copy(), self.yaw)


@dataclass(frozen=True, eq=False)
class CubicGridSpec:
    """Axis-aligned metric voxel grid; ``origin`` is the minimum corner and
    ``dims`` counts cells along x, y, z."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.voxel_size <= 0:
            raise GeometryError("voxel_size must be positive")
        if any(d < 1 for d in self.dims):
            raise GeometryError("all dims must be >= 1")

    @classmethod
    def default(cls) -> "CubicGridSpec":
        return cls(origin=(-12.8, -12.8, -1.2), voxel_size=0.4, dims=(64, 64, 8))

    @property
    def extent_max(self) -> np.ndarray:
        return self.origin + self.voxel_size * np.asarray(self.dims)

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= self.origin) and np.all(p <= self.extent_max))


@dataclass(frozen=True, eq=False)
class CylindricalGridSpec:
    """Camera-centric cylinder: ``radial_bins`` rings up to ``r_max``,
    ``azimuth_bins`` equal sectors over [0, 2pi), ``vertical_bins`` slabs
    over ``z_range``.  The axis sits at x = y = 0."""

    radial_bins: int = 32
    azimuth_bins: int = 90
    vertical_bins: int = 8
    r_max: float = 12.8
    z_range: tuple[float, float] = (-1.2, 2.0)

    def __post_init__(self):
        if min(self.radial_bins, self.azimuth_bins, self.vertical_bins) < 1:
            raise GeometryError("cylindrical bins must be >= 1")
        if self.r_max <= 0:
            raise GeometryError("r_max must be positive")
        if self.z_range[1] <= self.z_range[0]:
            raise GeometryError("z_range must be increasing")


# ---------------------------------------------------------------------------
# projections


def world_to_erp(point, cam: ErpCamera):
    """Project world point(s) to continuous ERP pixel coordinates (u, v).

    Accepts a single 3-vector or an (..., 3) array.  Raises on a point that
    coincides with the camera center.
    """
    p = np.asarray(point, dtype=np.float64) - cam.position
    scalar = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(np.all(p == 0.0, axis=-1)):
        raise GeometryError("point coincides with the camera center")
    cy, sy = np.cos(cam.yaw), np.sin(cam.yaw)
    x = cy * p[..., 0] + sy * p[..., 1]
    y = -sy * p[..., 0] + cy * p[..., 1]
    z = p[..., 2]
    theta = np.arctan2(y, x)
    phi = np.arctan2(z, np.hypot(x, y))
    u = np.mod((theta / (2.0 * np.pi) + 0.5) * cam.image_width, cam.image_width)
    v = (0.5 - phi / np.pi) * cam.image_height
    if scalar:
        return float(u[0]), float(v[0])
    return u, v


def erp_to_ray(u, v, cam: ErpCamera):
    """Unit world-frame direction through ERP pixel coordinates (inverse of
    ``world_to_erp`` up to scale)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = (u / cam.image_width - 0.5) * 2.0 * np.pi
    phi = (0.5 - v / cam.image_height) * np.pi
    cph = np.cos(phi)
    d = np.stack([cph * np.cos(theta), cph * np.sin(theta), np.sin(phi)], axis=-1)
    cy, sy = np.cos(cam.yaw), np.sin(cam.yaw)
    out = np.empty_like(d)
    out[..., 0] = cy * d[..., 0] - sy * d[..., 1]
    out[..., 1] = sy * d[..., 0] + cy * d[..., 1]
    out[..., 2] = d[..., 2]
    return out


def voxel_centers(spec: CubicGridSpec) -> np.ndarray:
    """(H*W*D, 3) array of cell centers in row-major (i, j, k) order."""
    H, W, D = spec.dims
    i, j, k = np.meshgrid(np.arange(H), np.arange(W), np.arange(D), indexing="ij")
    idx = np.stack([i, j, k], axis=-1).reshape(-1, 3)
    return spec.origin + spec.voxel_size * (idx + 0.5)


def cart_to_cyl(point, spec: CylindricalGridSpec):
    """Continuous cylindrical cell coordinates (r_idx, p_idx, z_idx) plus an
    out-of-range flag for points beyond ``r_max``.

    Accepts one point or an (..., 3) array; returns (coords, flag) with
    coords shaped (..., 3).
    """
    p = np.asarray(point, dtype=np.float64)
    scalar = p.ndim == 1
    p = np.atleast_2d(p)
    radius = np.hypot(p[..., 0], p[..., 1])
    r_idx = radius / spec.r_max * spec.radial_bins - 0.5
    az = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2.0 * np.pi)
    p_idx = az / (2.0 * np.pi) * spec.azimuth_bins - 0.5
    z_min, z_max = spec.z_range
    z_idx = (p[..., 2] - z_min) / (z_max - z_min) * spec.vertical_bins - 0.5
    coords = np.stack([r_idx, p_idx, z_idx], axis=-1)
    flag = radius > spec.r_max
    if scalar:
        return coords[0], bool(flag[0])
    return coords, flag


# ---------------------------------------------------------------------------
# interpolated sampling


def _interp_corners(coords: np.ndarray, dims: tuple[int, ...], wrap_axes=()):
    """Shared N-linear interpolation bookkeeping.

    Returns (flat_idx, mask, frac): corner flat indices and validity masks
    of shape (N, 2**k) plus per-axis fractional offsets (N, k).  Non-wrapped
    corners falling outside the grid are masked (zero padding); wrapped
    axes index modulo their extent.
    """
    coords = np.asarray(coords, dtype=np.float64)
    k = len(dims)
    wrap = set(wrap_axes)
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    n = coords.shape[0]
    ncorner = 1 << k
    idx_parts = np.zeros((n, ncorner), dtype=np.int64)
    mask = np.ones((n, ncorner), dtype=coords.dtype)
    stride = 1
    strides = [0] * k
    for axis in range(k - 1, -1, -1):
        strides[axis] = stride
        stride *= dims[axis]
    for corner in range(ncorner):
        for axis in range(k):
            hi = (corner >> (k - 1 - axis)) & 1
            ii = lo[:, axis] + hi
            if axis in wrap:
                ii = np.mod(ii, dims[axis])
            else:
                valid = (ii >= 0) & (ii < dims[axis])
                mask[:, corner] *= valid
                ii = np.clip(ii, 0, dims[axis] - 1)
            idx_parts[:, corner] += ii * strides[axis]
    return idx_parts, mask, frac


def _sample(field, coords, dims, wrap_axes):
    # Factored lerp reduction: exact for constant fields because each step
    # is a + f*(b - a), and masked corners realize zero padding.
    idx, mask, frac = _interp_corners(coords, dims, wrap_axes)
    k = len(dims)
    C = ad.value_of(field).shape[0]
    flat = ad.reshape(field, (C, int(np.prod(dims))))
    corners = [ad.mul(ad.take(flat, idx[:, c], axis=1), mask[:, c])
               for c in range(1 << k)]
    for axis in range(k - 1, -1, -1):
        f = frac[:, axis]
        corners = [ad.add(a, ad.mul(ad.sub(b, a), f))
                   for a, b in zip(corners[0::2], corners[1::2])]
    return corners[0]


def sample_trilinear(field, coords, wrap_axes=()):
    """Trilinear sampling of a (C, S0, S1, S2) field at (N, 3) continuous
    cell coordinates; ``wrap_axes`` lists periodic spatial axes.  Returns
    (C, N).  Differentiable in ``field`` when it is a tape Variable."""
    dims = ad.value_of(field).shape[1:]
    if len(dims) != 3:
        raise GeometryError("field must be (C, S0, S1, S2)")
    return _sample(field, np.atleast_2d(coords), dims, wrap_axes)


def sample_bilinear(field, coords, wrap_axes=()):
    """Bilinear analogue for (C, H, W) fields and (N, 2) coordinates."""
    dims = ad.value_of(field).shape[1:]
    if len(dims) != 2:
        raise GeometryError("field must be (C, H, W)")
    return _sample(field, np.atleast_2d(coords), dims, wrap_axes)


# ---------------------------------------------------------------------------
# 2D -> 3D lifting


def flosp_lift(features2d, spec: CubicGridSpec, cam: ErpCamera):
    """Line-of-sight lift: every voxel receives the 2D feature bilinearly
    sampled at the ERP projection of its center.

    Horizontal sampling wraps across the seam; the vertical coordinate is
    clamped to the first/last row so zenith/nadir projections keep full
    weight (the panorama sees every voxel).  Input (C, Himg, Wimg), output
    (C, H, W, D).
    """
    C, Hf, Wf = ad.value_of(features2d).shape
    centers = voxel_centers(spec)
    u, v = world_to_erp(centers, cam)
    rows = np.clip(v - 0.5, 0.0, Hf - 1.0)
    cols = u - 0.5  # wrapped by the sampler
    out = sample_bilinear(features2d, np.stack([rows, cols], axis=-1), wrap_axes=(1,))
    return ad.reshape(out, (C,) + spec.dims)


def projection_density(spec: CubicGridSpec, cam: ErpCamera):
    """Mean ERP-pixel spacing of horizontally adjacent voxel centers,
    bucketed by ground radius from the camera.

    Returns (radii, spacing): bucket center radii in meters and the mean
    pixel distance in each bucket, ordered by increasing radius.  Buckets
    are one voxel wide.  Only rings completely inside the grid footprint
    are reported; partial corner rings mix pair orientations unevenly and
    would not be comparable.
    """
    if not spec.contains(cam.position):
        raise GeometryError("camera must lie inside the grid extent")
    H, W, D = spec.dims
    rel = voxel_centers(spec) - cam.position
    degenerate = np.all(rel == 0.0, axis=-1)
    safe = np.where(degenerate[:, None], 1.0, rel)
    u, v = world_to_erp(safe + cam.position, cam)
    u[degenerate] = np.nan
    v[degenerate] = np.nan
    centers = (rel + cam.position).reshape(H, W, D, 3)
    u = u.reshape(H, W, D)
    v = v.reshape(H, W, D)

    pair_r, pair_d = [], []
    for axis in (0, 1):
        sl_a = (slice(None, -1),) if axis == 0 else (slice(None), slice(None, -1))
        sl_b = (slice(1, None),) if axis == 0 else (slice(None), slice(1, None))
        du = np.abs(u[sl_a] - u[sl_b])
        du = np.minimum(du, cam.image_width - du)  # seam-aware column distance
        dv = v[sl_a] - v[sl_b]
        dist = np.hypot(du, dv)
        mid = 0.5 * (centers[sl_a] + centers[sl_b])
        radius = np.hypot(mid[..., 0] - cam.position[0], mid[..., 1] - cam.position[1])
        pair_r.append(radius.ravel())
        pair_d.append(dist.ravel())
    radius = np.concatenate(pair_r)
    dist = np.concatenate(pair_d)
    keep = np.isfinite(dist)
    radius, dist = radius[keep], dist[keep]
    if radius.size == 0:
        return np.empty(0), np.empty(0)
    # largest ring still fully inside the horizontal grid footprint
    face = np.minimum(cam.position[:2] - spec.origin[:2],
                      spec.extent_max[:2] - cam.position[:2])
    inscribed = float(face.min())
    ring = np.floor(radius / spec.voxel_size).astype(np.int64)
    out_r, out_d = [], []
    for r in np.unique(ring):
        if (r + 1) * spec.voxel_size > inscribed:
            break
        m = ring == r
        out_r.append((r + 0.5) * spec.voxel_size)
        out_d.append(float(dist[m].mean()))
    return np.asarray(out_r), np.asarray(out_d)
