"""From per-object observations to simulation-ready interior particles.

The interior test is a multi-view visual hull: candidate points survive when
they project inside the object's silhouette in every view.  A coarse-to-fine
occupancy refinement (upsample, mean filter, re-stamp observed voxels,
threshold, keep the largest connected component) turns the survivors into a
clean volume, overlapping voxels are assigned to the nearest object surface,
and particles are jittered into the occupied voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import observe
from .errors import ConfigError, DegenerateViews, EmptyInput, EmptyOccupancy
from .mpm import ParticleSet


@dataclass
class OccupancyGrid:
    dims: tuple
    dx: float
    origin: np.ndarray
    density: np.ndarray  # (nx, ny, nz) in [0, 1]

    def same_lattice(self, other):
        return (
            self.dims == other.dims
            and self.dx == other.dx
            and np.allclose(self.origin, other.origin)
        )

    @property
    def occupied_count(self):
        return int((self.density > 0).sum())

    def voxel_centers(self):
        idx = np.argwhere(self.density > 0)
        return self.origin + (idx + 0.5) * self.dx


@dataclass(frozen=True)
class LiftConfig:
    base_resolution: int = 16
    levels: int = 3
    threshold: float = 0.5
    samples_per_voxel: int = 8
    target_particle_count: int | None = None
    hull_samples: int = 120000
    erode_px: float = 0.0  # undo a known splat dilation of the masks

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly inside (0, 1)")
        if self.samples_per_voxel < 1:
            raise ConfigError("samples_per_voxel must be >= 1")

    @property
    def final_resolution(self):
        return self.base_resolution * 2 ** (self.levels - 1)


def _disk_footprint(radius):
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= radius * radius


def hull_interior(samples, silhouettes, cameras, erode_px=0.0):
    """Keep the sample points that fall inside every view's silhouette.

    Masks can optionally be eroded by a disk first (when they are known to
    be point splats dilated by a fixed radius).  Needs at least 3 views.
    """
    if len(cameras) < 3 or len(silhouettes) < 3:
        raise DegenerateViews(f"visual hull needs >= 3 views, got {len(cameras)}")
    samples = np.asarray(samples, dtype=np.float64)
    keep = np.ones(samples.shape[0], dtype=bool)
    for mask, cam in zip(silhouettes, cameras):
        m = np.asarray(mask) > 0
        if erode_px > 0:
            m = ndimage.binary_erosion(m, structure=_disk_footprint(erode_px))
        uv, _depth, valid = observe.project_points(cam, samples)
        px = np.floor(uv[:, 0]).astype(np.int64)
        py = np.floor(uv[:, 1]).astype(np.int64)
        inside = valid & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        ok = np.zeros(samples.shape[0], dtype=bool)
        sel = np.nonzero(inside)[0]
        ok[sel] = m[py[sel], px[sel]]
        keep &= ok
        if not keep.any():
            break
    return samples[keep]


_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def refine_occupancy(rough, cfg, origin=None, extent=None):
    """Coarse-to-fine occupancy from interior sample points.

    The density starts as the per-voxel sample-coverage fraction (robustly
    normalized so fully covered voxels read 1).  Each level doubles the
    resolution, blurs with a 3^3 mean filter, and reassigns full density
    where the point counts show full coverage so the smoothing cannot erode
    the observed shape; the last level stays blur-only so the threshold cuts
    at a clean coverage level set.  Thin overhangs of the input cloud (for
    example silhouette-hull bulges below one voxel) fall under the threshold
    and disappear; the final field is binarized and reduced to its largest
    6-connected component.
    """
    rough = np.asarray(rough, dtype=np.float64)
    if rough.shape[0] == 0:
        raise EmptyInput("no interior points to refine")
    if origin is None or extent is None:
        lo = rough.min(axis=0)
        hi = rough.max(axis=0)
        span = float(np.max(hi - lo))
        pad = max(span, 1e-6) * 0.25
        origin = lo - pad
        extent = float(np.max(hi - lo) + 2 * pad)
    origin = np.asarray(origin, dtype=np.float64)

    res = cfg.base_resolution
    dx = extent / res
    density = _coverage(rough, origin, dx, res)
    for level in range(1, cfg.levels):
        res *= 2
        dx = extent / res
        density = np.repeat(np.repeat(np.repeat(density, 2, 0), 2, 1), 2, 2)
        density = ndimage.uniform_filter(density, size=3, mode="constant")
        if level < cfg.levels - 1:
            density = np.maximum(density, _coverage(rough, origin, dx, res))
    occ = density >= cfg.threshold
    if not occ.any():
        # degenerate input (a handful of points): keep the densest voxels
        occ = density >= density.max()
    labels, n = ndimage.label(occ, structure=_SIX_CONN)
    if n > 1:
        counts = np.bincount(labels.ravel())
        counts[0] = 0
        occ = labels == int(np.argmax(counts))
    return OccupancyGrid((res, res, res), dx, origin, occ.astype(np.float64))


def _coverage(points, origin, dx, res):
    """Per-voxel coverage fraction: counts over the robust full-voxel count."""
    counts = np.zeros((res, res, res))
    idx = np.floor((points - origin) / dx).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < res), axis=1)
    idx = idx[ok]
    np.add.at(counts, (idx[:, 0], idx[:, 1], idx[:, 2]), 1.0)
    nz = counts[counts > 0]
    full = max(float(np.percentile(nz, 60)), 1.0) if nz.size else 1.0
    return np.clip(counts / full, 0.0, 1.0)


def _stamp(density, points, origin, dx):
    res = density.shape[0]
    idx = np.floor((points - origin) / dx).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < res), axis=1)
    idx = idx[ok]
    density[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0


def enforce_disjoint(grids, surfaces):
    """Assign voxels claimed by several objects to the nearest surface.

    Grids must share the lattice.  Equidistant contested voxels go to the
    lower object id (deterministic tie-break).
    """
    if not grids:
        return []
    base = grids[0]
    for g in grids[1:]:
        if not base.same_lattice(g):
            raise ConfigError("occupancy grids must share dims, dx and origin")
    occ = np.stack([g.density > 0 for g in grids])
    multiplicity = occ.sum(axis=0)
    contested = np.argwhere(multiplicity > 1)
    if contested.shape[0] == 0:
        return list(grids)
    centers = base.origin + (contested + 0.5) * base.dx
    dists = np.column_stack(
        [cKDTree(np.asarray(s, dtype=np.float64)).query(centers)[0] for s in surfaces]
    )
    owner_all = np.argmin(dists, axis=1)  # first minimum wins ties
    out = []
    for k, g in enumerate(grids):
        d = g.density.copy()
        losers = contested[owner_all != k]
        mask = occ[k][losers[:, 0], losers[:, 1], losers[:, 2]]
        lose_k = losers[mask]
        d[lose_k[:, 0], lose_k[:, 1], lose_k[:, 2]] = 0.0
        out.append(OccupancyGrid(g.dims, g.dx, g.origin, d))
    return out


def to_particles(grid, params, cfg, object_id=0, seed=0, velocity=None):
    """Jittered particle samples inside the occupied voxels.

    samples_per_voxel draws per voxel, optionally thinned uniformly to
    target_particle_count.  Rest volume is occupied volume / particle count
    so total mass is exactly rho * occupied volume; particles start at rest
    deformation.
    """
    idx = np.argwhere(grid.density > 0)
    if idx.shape[0] == 0:
        raise EmptyOccupancy("no occupied voxels")
    rng = np.random.default_rng(seed)
    reps = np.repeat(idx, cfg.samples_per_voxel, axis=0)
    x = grid.origin + (reps + rng.uniform(0.0, 1.0, reps.shape)) * grid.dx
    if cfg.target_particle_count is not None and x.shape[0] > cfg.target_particle_count:
        keep = np.sort(rng.choice(x.shape[0], size=cfg.target_particle_count, replace=False))
        x = x[keep]
    vol_total = idx.shape[0] * grid.dx**3
    v0 = vol_total / x.shape[0]
    return ParticleSet.from_rest(
        x, mass=params.rho * v0, vol0=v0, object_id=object_id, v=velocity
    )


def lift_objects(obs, params_list, cfg, seed=0, velocities=None):
    """Full multi-object lift from frame-0 observations on a shared lattice.

    Hull-carve each object from its silhouettes, refine occupancy, make the
    supports disjoint, and sample particles.  Returns (particle sets,
    occupancy grids).
    """
    if obs.masks is None:
        raise ConfigError("lifting requires silhouette masks")
    kn = obs.n_objects
    surf0 = [obs.surfaces[0][k] for k in range(kn)]
    all_pts = np.concatenate(surf0)
    lo = all_pts.min(axis=0)
    hi = all_pts.max(axis=0)
    span = float(np.max(hi - lo))
    pad = 0.12 * span
    origin = lo - pad
    extent = span + 2 * pad

    rng = np.random.default_rng(seed)
    grids = []
    for k in range(kn):
        slo = surf0[k].min(axis=0)
        shi = surf0[k].max(axis=0)
        spad = 0.05 * float(np.max(shi - slo))
        cand = rng.uniform(slo - spad, shi + spad, (cfg.hull_samples, 3))
        masks_k = [obs.masks[0][j][k] for j in range(len(obs.cameras))]
        interior = hull_interior(cand, masks_k, obs.cameras, erode_px=cfg.erode_px)
        if interior.shape[0] == 0:
            raise EmptyInput(f"visual hull of object {k} is empty")
        grids.append(refine_occupancy(interior, cfg, origin=origin, extent=extent))
    grids = enforce_disjoint(grids, surf0)
    particles = []
    for k, g in enumerate(grids):
        vel = None if velocities is None else velocities[k]
        particles.append(
            to_particles(g, params_list[k], cfg, object_id=k, seed=seed + 1000 + k,
                         velocity=vel)
        )
    return particles, grids
