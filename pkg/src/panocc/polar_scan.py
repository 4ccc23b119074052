"""Polar-spiral sequence modeling over cylindrical voxel grids.

The polar branch compresses a cylindrical feature volume to a bird's-eye
sequence, serializes the cells along an outward spiral from the pole, runs
a linear-time gated state-space scan over the sequence, restores the grid,
and fuses the result back into the cartesian volume by resampling at each
cubic voxel center.

Scan path rule: ring 0 is visited first starting at azimuth 0; each later
ring starts at the azimuth where the previous ring ended, so consecutive
scan cells are always grid neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import CubicGridSpec, CylindricalGridSpec, cart_to_cyl, sample_trilinear, voxel_centers


class ScanError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScanOrder:
    """Bijection between scan positions and flat (ring, azimuth) indices.

    ``forward[t]`` is the flat cell index ``r * P + p`` visited at step t;
    ``inverse`` satisfies ``inverse[forward[t]] == t``.
    """

    forward: np.ndarray
    inverse: np.ndarray
    radial_bins: int
    azimuth_bins: int


def spiral_order(radial_bins: int, azimuth_bins: int) -> ScanOrder:
    """Outward spiral over an R x P polar grid, radius non-decreasing."""
    if radial_bins < 1 or azimuth_bins < 1:
        raise ScanError("grid must have at least one ring and one sector")
    R, P = radial_bins, azimuth_bins
    forward = np.empty(R * P, dtype=np.int64)
    start = 0
    for r in range(R):
        p = (start + np.arange(P)) % P
        forward[r * P: (r + 1) * P] = r * P + p
        start = p[-1]  # next ring continues at this azimuth
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(R * P)
    return ScanOrder(forward, inverse, R, P)


def bev_compress(v_polar):
    """(C, R, P, Z) -> (C*Z, R, P) by stacking the vertical axis into
    channels; output channel c*Z + z carries v_polar[c, :, :, z]."""
    C, R, P, Z = ad.value_of(v_polar).shape
    return ad.reshape(ad.moveaxis(v_polar, 3, 1), (C * Z, R, P))


def bev_voxelize(bev, vertical_bins: int):
    """Exact inverse of ``bev_compress``."""
    CZ, R, P = ad.value_of(bev).shape
    if CZ % vertical_bins:
        raise ScanError(f"channel count {CZ} not divisible by Z={vertical_bins}")
    C = CZ // vertical_bins
    return ad.moveaxis(ad.reshape(bev, (C, vertical_bins, R, P)), 1, 3)


# ---------------------------------------------------------------------------
# gated selective scan


@dataclass(eq=False)
class ScanParams:
    """Per-channel gated state-space parameters.

    The effective decay at step t is sigmoid(gate_w * x_t + gate_b) *
    sigmoid(decay), always in (0, 1).  ``mix_in`` feeds input to state,
    ``mix_out`` reads state, ``skip`` is the direct path.
    """

    decay: np.ndarray
    mix_in: np.ndarray
    mix_out: np.ndarray
    skip: np.ndarray
    gate_w: np.ndarray
    gate_b: np.ndarray

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float32) -> "ScanParams":
        return cls(
            decay=rng.normal(1.0, 0.5, channels).astype(dtype),
            mix_in=rng.normal(0.0, 0.5, channels).astype(dtype),
            mix_out=rng.normal(0.0, 0.5, channels).astype(dtype),
            skip=np.ones(channels, dtype=dtype),
            gate_w=np.zeros(channels, dtype=dtype),
            gate_b=rng.normal(2.0, 0.2, channels).astype(dtype),
        )

    @classmethod
    def constant(cls, channels: int, decay: float, mix_in: float = 1.0,
                 mix_out: float = 1.0, skip: float = 0.0) -> "ScanParams":
        """Input-independent configuration for tests: gate saturated to 1,
        decay solved through the squash."""
        if not 0.0 <= decay < 1.0:
            raise ScanError("constant decay must be in [0, 1)")
        a = -745.0 if decay == 0.0 else float(np.log(decay / (1.0 - decay)))
        full = lambda v: np.full(channels, v, dtype=np.float64)
        return cls(decay=full(a), mix_in=full(mix_in), mix_out=full(mix_out),
                   skip=full(skip), gate_w=full(0.0), gate_b=full(745.0))

    def fields(self):
        return {"decay": self.decay, "mix_in": self.mix_in, "mix_out": self.mix_out,
                "skip": self.skip, "gate_w": self.gate_w, "gate_b": self.gate_b}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _scan_forward(x, decay, mix_in, mix_out, skip, gate_w, gate_b):
    T, C = x.shape
    squashed = _sigmoid(decay)
    gates = _sigmoid(gate_w * x + gate_b)
    abar = gates * squashed
    h = np.zeros(C, dtype=x.dtype)
    hs = np.empty_like(x)
    for t in range(T):
        h = abar[t] * h + mix_in * x[t]
        hs[t] = h
    y = mix_out * hs + skip * x
    return y, hs, abar, gates, squashed


def ssm_scan(sequence, params: ScanParams):
    """Linear-time gated scan over a (T, C) sequence.

    Per channel: h_t = abar_t * h_{t-1} + mix_in * x_t,
    y_t = mix_out * h_t + skip * x_t, h_0 = 0, with abar_t the
    input-gated decay in (0, 1).  One pass costs O(T*C).  Differentiable
    in the sequence and all parameters when given tape Variables.
    """
    xv = ad.value_of(sequence)
    if xv.ndim != 2 or xv.shape[0] < 1:
        raise ScanError("sequence must be (T, C) with T >= 1")
    if not np.all(np.isfinite(xv)):
        raise ScanError("non-finite values in scan input")
    vals = {k: ad.value_of(v) for k, v in params.fields().items()}
    y, hs, abar, gates, squashed = _scan_forward(xv, **vals)

    tracked = [(name, p) for name, p in [("x", sequence)] + list(params.fields().items())
               if isinstance(p, ad.Variable)]
    if not tracked:
        return y

    decay, mix_in, mix_out, skip = vals["decay"], vals["mix_in"], vals["mix_out"], vals["skip"]
    gate_w = vals["gate_w"]

    def backward(g):
        T = xv.shape[0]
        gx = skip * g
        g_mix_out = (g * hs).sum(axis=0)
        g_skip = (g * xv).sum(axis=0)
        gh_chain = mix_out * g  # dL/dh_t before recurrence accumulation
        gh = np.zeros_like(decay, dtype=xv.dtype)
        g_abar = np.empty_like(abar)
        g_mix_in = np.zeros_like(decay, dtype=xv.dtype)
        for t in range(T - 1, -1, -1):
            gh = gh + gh_chain[t]
            h_prev = hs[t - 1] if t > 0 else 0.0
            g_abar[t] = gh * h_prev
            g_mix_in += gh * xv[t]
            gx[t] += gh * mix_in
            gh = gh * abar[t]
        # gate path: abar = sigmoid(pre) * squashed, pre = gate_w*x + gate_b
        g_gate = g_abar * squashed
        g_pre = g_gate * gates * (1.0 - gates)
        g_squashed = (g_abar * gates).sum(axis=0)
        g_decay = g_squashed * squashed * (1.0 - squashed)
        gx += g_pre * gate_w
        g_gate_w = (g_pre * xv).sum(axis=0)
        g_gate_b = g_pre.sum(axis=0)
        by_name = {"x": gx, "decay": g_decay, "mix_in": g_mix_in,
                   "mix_out": g_mix_out, "skip": g_skip,
                   "gate_w": g_gate_w, "gate_b": g_gate_b}
        return [by_name[name] for name, _ in tracked]

    tape = tracked[0][1].tape
    return tape.record(y, [p for _, p in tracked], backward)


# ---------------------------------------------------------------------------
# dual-grid fusion


@dataclass(frozen=True)
class StageState:
    """Shape bookkeeping for one decoder stage; the polar branch only
    contributes from the second stage on."""

    layer_index: int
    channels: int
    cartesian_dims: tuple[int, int, int]
    polar_dims: tuple[int, int, int]

    def __post_init__(self):
        if self.layer_index < 1:
            raise ScanError("layer_index starts at 1")


def _cyl_coords_of_cubic_centers(cub: CubicGridSpec, cyl: CylindricalGridSpec):
    """Continuous cylindrical coordinates of every cubic voxel center, with
    non-wrapped axes clamped inside the cylinder and an inside mask.

    Points beyond ``r_max`` or outside the vertical range are flagged; for
    points inside, the radial and vertical coordinates are clamped to the
    nearest cell so the interior of the cylinder is covered without edge
    falloff.
    """
    centers = voxel_centers(cub)
    coords, beyond_r = cart_to_cyl(centers, cyl)
    z_min, z_max = cyl.z_range
    inside = (~beyond_r) & (centers[:, 2] >= z_min) & (centers[:, 2] <= z_max)
    coords[:, 0] = np.clip(coords[:, 0], 0.0, cyl.radial_bins - 1.0)
    coords[:, 2] = np.clip(coords[:, 2], 0.0, cyl.vertical_bins - 1.0)
    return coords, inside


def polar_fuse(v_cubic, v_polar, state: StageState, cyl: CylindricalGridSpec,
               cub: CubicGridSpec):
    """Add the polar volume, resampled at each cubic voxel center, onto the
    cartesian volume.  Stage 1 passes the cartesian volume through
    unchanged; outside the cylinder the polar contribution is zero."""
    vc = ad.value_of(v_cubic)
    vp = ad.value_of(v_polar)
    if vc.shape != (state.channels,) + tuple(state.cartesian_dims):
        raise ScanError(f"cartesian volume shape {vc.shape} does not match stage state")
    if vp.shape != (state.channels,) + tuple(state.polar_dims):
        raise ScanError(f"polar volume shape {vp.shape} does not match stage state")
    if (cyl.radial_bins, cyl.azimuth_bins, cyl.vertical_bins) != tuple(state.polar_dims):
        raise ScanError("cylindrical spec disagrees with stage polar dims")
    if state.layer_index == 1:
        return v_cubic
    coords, inside = _cyl_coords_of_cubic_centers(cub, cyl)
    gathered = sample_trilinear(v_polar, coords, wrap_axes=(1,))
    gathered = ad.mul(gathered, inside.astype(vc.dtype))
    return ad.add(v_cubic, ad.reshape(gathered, vc.shape))


def resample_to_cylinder(v_cubic, cub: CubicGridSpec, cyl: CylindricalGridSpec):
    """Initialize the polar branch: trilinear-sample the cartesian volume at
    every cylindrical cell center (zero outside the cubic grid)."""
    C = ad.value_of(v_cubic).shape[0]
    R, P, Z = cyl.radial_bins, cyl.azimuth_bins, cyl.vertical_bins
    r = (np.arange(R) + 0.5) / R * cyl.r_max
    az = (np.arange(P) + 0.5) / P * 2.0 * np.pi
    z_min, z_max = cyl.z_range
    z = z_min + (np.arange(Z) + 0.5) / Z * (z_max - z_min)
    rr, aa, zz = np.meshgrid(r, az, z, indexing="ij")
    pts = np.stack([rr * np.cos(aa), rr * np.sin(aa), zz], axis=-1).reshape(-1, 3)
    cell = (pts - cub.origin) / cub.voxel_size - 0.5
    out = sample_trilinear(v_cubic, cell)
    return ad.reshape(out, (C, R, P, Z))


def polar_scan_block(v_cubic, state: StageState, cyl: CylindricalGridSpec,
                     cub: CubicGridSpec, scan_params: list[ScanParams],
                     order: ScanOrder | None = None):
    """One polar-branch stage: resample to the cylinder, compress to BEV,
    serialize along the spiral, run the stacked scans, restore the grid,
    and fuse back into the cartesian volume.  Output shape equals input
    shape; stage 1 is a pass-through."""
    if state.layer_index == 1:
        return v_cubic
    R, P, Z = state.polar_dims
    if order is None:
        order = spiral_order(R, P)
    v_polar = resample_to_cylinder(v_cubic, cub, cyl)
    bev = bev_compress(v_polar)
    CZ = ad.value_of(bev).shape[0]
    seq = ad.moveaxis(ad.reshape(bev, (CZ, R * P)), 0, 1)
    seq = ad.take(seq, order.forward, axis=0)
    for params in scan_params:
        seq = ssm_scan(seq, params)
    seq = ad.take(seq, order.inverse, axis=0)
    bev = ad.reshape(ad.moveaxis(seq, 0, 1), (CZ, R, P))
    v_polar = bev_voxelize(bev, Z)
    return polar_fuse(v_cubic, v_polar, state, cyl, cub)
