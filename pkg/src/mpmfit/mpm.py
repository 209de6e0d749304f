"""Differentiable MPM forward simulator.

Per-object particle sets and background grids, APIC transfers with a
quadratic B-spline kernel, explicit grid dynamics with a Coulomb floor,
pairwise inter-object contact, and per-family plastic projection.  The
time step is the composition

    p2g -> grid_forces -> grid_update -> contact_resolve -> g2p_advect

and every stage optionally carries forward-mode tangents of width P
(see `sensitivity`).  Single-worker execution is bitwise deterministic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .errors import ConfigError, InvertedElement, NonFiniteLoss, OutOfDomain
from .materials import MaterialParams, dp_alpha, lame_from

FLOOR_MODES = {"sticky": K.FLOOR_STICKY, "slip": K.FLOOR_SLIP, "separate": K.FLOOR_SEPARATE}

# rows of the per-object derived-parameter tangent block
PARAM_ROWS = ("mu", "lam", "tau_y", "mu_visc", "kappa", "alpha_dp", "mu_contact")


@dataclass(frozen=True)
class SimConfig:
    """Time stepping and boundary configuration.

    dt * substeps_per_frame must equal one frame period; the CFL check
    against the stiffest object only warns, since transiently stiff guesses
    during optimization are expected.
    """

    dt: float = 1.0 / 4800.0
    gravity: tuple = (0.0, 0.0, -9.8)
    floor_height: float = 0.0
    floor_friction: float = 0.4
    floor_mode: str = "separate"
    substeps_per_frame: int = 200
    frame_rate: float = 24.0

    def __post_init__(self):
        if self.floor_mode not in FLOOR_MODES:
            raise ConfigError(f"unknown floor mode {self.floor_mode!r}")
        if abs(self.dt * self.substeps_per_frame - 1.0 / self.frame_rate) > 1e-12:
            raise ConfigError(
                "dt * substeps_per_frame must equal the frame period: "
                f"{self.dt} * {self.substeps_per_frame} != 1/{self.frame_rate}"
            )


class ParticleSet:
    """Structure-of-arrays particle state for one object.

    Arrays: x, v (N,3); F, B (N,3,3); mass, vol0 (N).  Decomposition and
    velocity-gradient caches ride along so stress evaluation can reuse the
    projected state.  Tangent blocks (trailing axis P) exist only in dual
    mode; `alloc_tangents(0)` drops back to plain simulation.
    """

    def __init__(self, x, v, F, B, mass, vol0, object_id):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        n = self.x.shape[0]
        self.v = np.ascontiguousarray(v, dtype=np.float64)
        self.F = np.ascontiguousarray(F, dtype=np.float64)
        self.B = np.ascontiguousarray(B, dtype=np.float64)
        self.mass = np.ascontiguousarray(mass, dtype=np.float64)
        self.vol0 = np.ascontiguousarray(vol0, dtype=np.float64)
        self.object_id = int(object_id)
        if self.v.shape != (n, 3) or self.F.shape != (n, 3, 3) or self.B.shape != (n, 3, 3):
            raise ValueError("inconsistent particle array shapes")
        if np.any(self.mass <= 0.0) or np.any(self.vol0 <= 0.0):
            raise ValueError("particle masses and rest volumes must be positive")
        self.usvd = np.empty((n, 3, 3))
        self.sig = np.empty((n, 3))
        self.vsvd = np.empty((n, 3, 3))
        self.jfl = np.empty(n)
        self.gradv = np.zeros((n, 3, 3))
        self.refresh_caches()
        self.alloc_tangents(0)

    @classmethod
    def from_rest(cls, x, mass, vol0, object_id, v=None):
        n = np.asarray(x).shape[0]
        if v is None:
            v = np.zeros((n, 3))
        elif np.asarray(v).ndim == 1:
            v = np.broadcast_to(np.asarray(v, dtype=np.float64), (n, 3)).copy()
        F = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        B = np.zeros((n, 3, 3))
        mass = np.broadcast_to(np.asarray(mass, dtype=np.float64), (n,)).copy()
        vol0 = np.broadcast_to(np.asarray(vol0, dtype=np.float64), (n,)).copy()
        return cls(x, v, F, B, mass, vol0, object_id)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def tangent_width(self):
        return self.x_t.shape[2]

    def refresh_caches(self):
        """Recompute the decomposition / volume caches from F."""
        for p in range(self.n):
            K.svd3_kernel(self.F[p], self.usvd[p], self.sig[p], self.vsvd[p])
        self.jfl[:] = np.linalg.det(self.F)

    def alloc_tangents(self, width):
        n = self.n
        self.x_t = np.zeros((n, 3, width))
        self.v_t = np.zeros((n, 3, width))
        self.F_t = np.zeros((n, 3, 3, width))
        self.B_t = np.zeros((n, 3, 3, width))
        self.u_t = np.zeros((n, 3, 3, width))
        self.sig_t = np.zeros((n, 3, width))
        self.vsvd_t = np.zeros((n, 3, 3, width))
        self.jfl_t = np.zeros((n, width))
        self.gradv_t = np.zeros((n, 3, 3, width))

    def copy(self):
        out = ParticleSet.__new__(ParticleSet)
        for name in (
            "x", "v", "F", "B", "mass", "vol0",
            "usvd", "sig", "vsvd", "jfl", "gradv",
            "x_t", "v_t", "F_t", "B_t", "u_t", "sig_t", "vsvd_t", "jfl_t", "gradv_t",
        ):
            setattr(out, name, getattr(self, name).copy())
        out.object_id = self.object_id
        return out


class ObjectGrid:
    """Dense background grid for one object; all objects share the lattice.

    Only the sub-box covered by the object's stencils (plus one node ring
    for contact normals) is touched each step; `ibox` records it.
    """

    def __init__(self, dims, dx, origin):
        self.dims = tuple(int(d) for d in dims)
        if min(self.dims) < 8:
            raise ConfigError("grid needs at least 8 nodes per axis")
        if dx <= 0:
            raise ConfigError("dx must be positive")
        self.dx = float(dx)
        self.origin = np.asarray(origin, dtype=np.float64).copy()
        nx, ny, nz = self.dims
        self.m = np.zeros((nx, ny, nz))
        self.mom = np.zeros((nx, ny, nz, 3))
        self.f = np.zeros((nx, ny, nz, 3))
        self.v = np.zeros((nx, ny, nz, 3))
        self.ibox = np.zeros((2, 3), dtype=np.int64)
        self.alloc_tangents(0)

    def alloc_tangents(self, width):
        nx, ny, nz = self.dims
        self.m_t = np.zeros((nx, ny, nz, width))
        self.mom_t = np.zeros((nx, ny, nz, 3, width))
        self.f_t = np.zeros((nx, ny, nz, 3, width))
        self.v_t = np.zeros((nx, ny, nz, 3, width))

    def copy(self):
        out = ObjectGrid.__new__(ObjectGrid)
        out.dims = self.dims
        out.dx = self.dx
        out.origin = self.origin.copy()
        for name in ("m", "mom", "f", "v", "ibox", "m_t", "mom_t", "f_t", "v_t"):
            setattr(out, name, getattr(self, name).copy())
        return out


@dataclass
class Trajectory:
    """Recorded frame snapshots: positions per object at frame boundaries."""

    frame_indices: list
    frames: list  # frames[i][k] -> (N_k, 3) positions
    frame_rate: float

    @property
    def n_objects(self):
        return len(self.frames[0]) if self.frames else 0


class WorldState:
    """Complete simulation state: K particle sets, grids, and parameters."""

    def __init__(self, particles, grids, params, config, step_index=0):
        if not (len(particles) == len(grids) == len(params)):
            raise ConfigError("need one grid and one parameter set per object")
        base = grids[0]
        for g in grids[1:]:
            if g.dims != base.dims or g.dx != base.dx or not np.array_equal(g.origin, base.origin):
                raise ConfigError("all object grids must share dims, dx and origin")
        self.particles = list(particles)
        self.grids = list(grids)
        self.params = list(params)
        self.config = config
        self.step_index = int(step_index)
        self._refresh_material_table()
        self._check_cfl()

    def _refresh_material_table(self):
        k = len(self.params)
        self.mat_code = np.empty(k, dtype=np.int64)
        self.mat = np.zeros((k, len(PARAM_ROWS)))
        for i, mp in enumerate(self.params):
            self.mat_code[i] = mp.family.code
            lame = lame_from(mp.E, mp.nu)
            self.mat[i, 0] = lame.mu
            self.mat[i, 1] = lame.lam
            self.mat[i, 2] = mp.tau_y
            self.mat[i, 3] = mp.mu_visc
            self.mat[i, 4] = mp.kappa
            self.mat[i, 5] = dp_alpha(mp.theta_fric)
            self.mat[i, 6] = mp.mu_contact
        width = self.tangent_width
        self.mat_t = np.zeros((k, len(PARAM_ROWS), width))

    def _check_cfl(self):
        dx = self.grids[0].dx
        speeds = []
        for mp in self.params:
            lame = lame_from(mp.E, mp.nu)
            speeds.append(np.sqrt((lame.lam + 2.0 * lame.mu) / mp.rho))
        cmax = max(speeds) if speeds else 0.0
        if cmax > 0 and self.config.dt > dx / (10.0 * cmax):
            warnings.warn(
                f"dt={self.config.dt:.3e} exceeds dx/(10 c)={dx / (10 * cmax):.3e}; "
                "explicit update may be inaccurate for the stiffest object",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def n_objects(self):
        return len(self.particles)

    @property
    def tangent_width(self):
        return self.particles[0].tangent_width if self.particles else 0

    def alloc_tangents(self, width):
        for ps in self.particles:
            ps.alloc_tangents(width)
        for g in self.grids:
            g.alloc_tangents(width)
        self.mat_t = np.zeros((len(self.params), len(PARAM_ROWS), width))

    def set_params(self, params):
        self.params = list(params)
        width = self.tangent_width
        self._refresh_material_table()
        self.mat_t = np.zeros((len(self.params), len(PARAM_ROWS), width))

    def copy(self):
        out = WorldState.__new__(WorldState)
        out.particles = [p.copy() for p in self.particles]
        out.grids = [g.copy() for g in self.grids]
        out.params = list(self.params)
        out.config = self.config
        out.step_index = self.step_index
        out.mat_code = self.mat_code.copy()
        out.mat = self.mat.copy()
        out.mat_t = self.mat_t.copy()
        return out


# ---------------------------------------------------------------------------
# staged operations (mutate the world in place, return it for chaining)
# ---------------------------------------------------------------------------


def bspline_stencil(xp, grid):
    """27 (node index, weight, weight gradient) triples for one position.

    Reference implementation of the quadratic B-spline stencil; the kernels
    recompute the same formulas inline.  Raises OutOfDomain when the stencil
    would not leave a one-node safety ring at the boundary.
    """
    xp = np.asarray(xp, dtype=np.float64)
    rel = (xp - grid.origin) / grid.dx
    base = np.floor(rel - 0.5).astype(np.int64)
    dims = np.array(grid.dims)
    if np.any(base < 1) or np.any(base + 3 > dims - 1):
        raise OutOfDomain(f"position {xp} too close to grid boundary")
    fx = rel - base
    w_axis = np.empty((3, 3))
    g_axis = np.empty((3, 3))
    for a in range(3):
        f = fx[a]
        w_axis[a] = (0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, 0.5 * (f - 0.5) ** 2)
        g_axis[a] = (-(1.5 - f) / grid.dx, -2.0 * (f - 1.0) / grid.dx, (f - 0.5) / grid.dx)
    out = []
    for i in range(3):
        for j in range(3):
            for k in range(3):
                w = w_axis[0, i] * w_axis[1, j] * w_axis[2, k]
                gw = np.array(
                    [
                        g_axis[0, i] * w_axis[1, j] * w_axis[2, k],
                        w_axis[0, i] * g_axis[1, j] * w_axis[2, k],
                        w_axis[0, i] * w_axis[1, j] * g_axis[2, k],
                    ]
                )
                out.append(((base[0] + i, base[1] + j, base[2] + k), w, gw))
    return out


def _stencil_box(ps, grid):
    """Node box covering all stencils plus one ring; raises OutOfDomain."""
    rel_min = (ps.x.min(axis=0) - grid.origin) / grid.dx
    rel_max = (ps.x.max(axis=0) - grid.origin) / grid.dx
    if not (np.isfinite(rel_min).all() and np.isfinite(rel_max).all()):
        bad = int(np.argmin(np.isfinite(ps.x).all(axis=1)))
        raise NonFiniteLoss(f"non-finite particle position (object {ps.object_id}, particle {bad})")
    base_lo = np.floor(rel_min - 0.5).astype(np.int64)
    base_hi = np.floor(rel_max - 0.5).astype(np.int64)
    dims = np.array(grid.dims)
    if np.any(base_lo < 1) or np.any(base_hi + 3 > dims - 1):
        rel = (ps.x - grid.origin) / grid.dx
        bases = np.floor(rel - 0.5).astype(np.int64)
        bad_mask = np.any((bases < 1) | (bases + 3 > dims - 1), axis=1)
        bad = int(np.argmax(bad_mask))
        raise OutOfDomain(
            f"particle {bad} of object {ps.object_id} at {ps.x[bad]} leaves the grid",
            particle_index=bad,
        )
    lo = np.maximum(base_lo - 1, 0)
    hi = np.minimum(base_hi + 4, dims)
    return np.stack([lo, hi]).astype(np.int64)


def _raise_kernel_error(err, object_id):
    if err[0] == K.ERR_OOB:
        raise OutOfDomain(
            f"particle {err[1]} of object {object_id} leaves the grid",
            particle_index=int(err[1]),
        )
    if err[0] == K.ERR_INVERTED:
        raise InvertedElement(
            f"inverted deformation gradient (object {object_id}, particle {err[1]})",
            particle_index=int(err[1]),
        )


def p2g(world):
    """Scatter mass and APIC momentum onto each object's (zeroed) grid."""
    for ps, grid in zip(world.particles, world.grids):
        box = _stencil_box(ps, grid)
        grid.ibox[:] = box
        sl = tuple(slice(box[0, a], box[1, a]) for a in range(3))
        grid.m[sl] = 0.0
        grid.mom[sl] = 0.0
        grid.m_t[sl] = 0.0
        grid.mom_t[sl] = 0.0
        err = np.zeros(2, dtype=np.int64)
        K.p2g_kernel(
            ps.x, ps.v, ps.B, ps.mass, ps.x_t, ps.v_t, ps.B_t,
            grid.m, grid.mom, grid.m_t, grid.mom_t,
            grid.origin, grid.dx, err,
        )
        _raise_kernel_error(err, ps.object_id)
    return world


def grid_forces(world):
    """Evaluate per-particle stress and scatter internal grid forces."""
    for k, (ps, grid) in enumerate(zip(world.particles, world.grids)):
        box = grid.ibox
        sl = tuple(slice(box[0, a], box[1, a]) for a in range(3))
        grid.f[sl] = 0.0
        grid.f_t[sl] = 0.0
        err = np.zeros(2, dtype=np.int64)
        K.forces_kernel(
            ps.x, ps.F, ps.vol0, ps.x_t, ps.F_t,
            ps.usvd, ps.sig, ps.vsvd, ps.u_t, ps.sig_t, ps.vsvd_t,
            ps.jfl, ps.jfl_t, ps.gradv, ps.gradv_t,
            grid.f, grid.f_t,
            world.mat_code[k],
            world.mat[k, 0], world.mat[k, 1], world.mat[k, 3], world.mat[k, 4],
            world.mat_t[k, 0], world.mat_t[k, 1], world.mat_t[k, 3], world.mat_t[k, 4],
            grid.origin, grid.dx, err,
        )
        _raise_kernel_error(err, ps.object_id)
    return world


def grid_update(world):
    """Momentum -> velocity with explicit forces, gravity, floor handling."""
    cfg = world.config
    gravity = np.asarray(cfg.gravity, dtype=np.float64)
    mode = FLOOR_MODES[cfg.floor_mode]
    for grid in world.grids:
        K.grid_update_kernel(
            grid.m, grid.mom, grid.f, grid.v,
            grid.m_t, grid.mom_t, grid.f_t, grid.v_t,
            grid.ibox, cfg.dt, gravity, grid.origin, grid.dx,
            cfg.floor_height, cfg.floor_friction, mode,
        )
    return world


def contact_resolve(world):
    """Pairwise inelastic contact with Coulomb friction on shared nodes."""
    kn = world.n_objects
    for a in range(kn):
        for b in range(a + 1, kn):
            ga = world.grids[a]
            gb = world.grids[b]
            lo = np.maximum(ga.ibox[0], gb.ibox[0])
            hi = np.minimum(ga.ibox[1], gb.ibox[1])
            if np.any(lo >= hi):
                continue
            box = np.stack([lo, hi]).astype(np.int64)
            mu_pair = 0.5 * (world.mat[a, 6] + world.mat[b, 6])
            mu_pair_t = 0.5 * (world.mat_t[a, 6] + world.mat_t[b, 6])
            K.contact_kernel(
                ga.m, ga.v, ga.m_t, ga.v_t,
                gb.m, gb.v, gb.m_t, gb.v_t,
                box, ga.dx, mu_pair, np.ascontiguousarray(mu_pair_t),
            )
    return world


def g2p_advect(world):
    """Gather grid velocities, update F, project plastic state, advect."""
    cfg = world.config
    for k, (ps, grid) in enumerate(zip(world.particles, world.grids)):
        err = np.zeros(2, dtype=np.int64)
        K.g2p_kernel(
            ps.x, ps.v, ps.F, ps.B, ps.x_t, ps.v_t, ps.F_t, ps.B_t,
            ps.usvd, ps.sig, ps.vsvd, ps.u_t, ps.sig_t, ps.vsvd_t,
            ps.jfl, ps.jfl_t, ps.gradv, ps.gradv_t,
            grid.v, grid.v_t,
            world.mat_code[k],
            world.mat[k, 0], world.mat[k, 1], world.mat[k, 2], world.mat[k, 5],
            world.mat_t[k, 0], world.mat_t[k, 1], world.mat_t[k, 2], world.mat_t[k, 5],
            grid.origin, grid.dx, cfg.dt, err,
        )
        _raise_kernel_error(err, ps.object_id)
    world.step_index += 1
    return world


def step_inplace(world):
    p2g(world)
    grid_forces(world)
    grid_update(world)
    contact_resolve(world)
    return g2p_advect(world)


def step(world):
    """One substep; returns a new WorldState, input untouched."""
    return step_inplace(world.copy())


def rollout(world0, n_frames, record_stride=1):
    """Advance whole frames and record particle positions.

    Runs n_frames * substeps_per_frame substeps on a private copy and
    snapshots positions at every `record_stride`-th frame boundary
    (ceil(n_frames / record_stride) snapshots; the initial state is not
    recorded).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if record_stride < 1:
        raise ValueError("record_stride must be >= 1")
    world = world0.copy()
    frames = []
    indices = []
    for f in range(1, n_frames + 1):
        for _ in range(world.config.substeps_per_frame):
            step_inplace(world)
        if f % record_stride == 0 or f == n_frames:
            snap = [ps.x.copy() for ps in world.particles]
            for k, xs in enumerate(snap):
                if not np.isfinite(xs).all():
                    raise NonFiniteLoss(f"diverged at frame {f}, object {k}")
            frames.append(snap)
            indices.append(f)
    return Trajectory(indices, frames, world.config.frame_rate)
