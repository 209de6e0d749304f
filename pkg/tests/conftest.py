import warnings

import numpy as np
import pytest

from mpmfit import mpm
from mpmfit.materials import MaterialFamily, MaterialParams

warnings.filterwarnings("ignore", category=RuntimeWarning, module="mpmfit")


def ball_particles(seed, center, radius, n, rho, object_id, v0=(0.0, 0.0, 0.0)):
    """Uniform random ball of particles at rest deformation."""
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        cand = rng.uniform(-radius, radius, (2 * n, 3))
        cand = cand[np.linalg.norm(cand, axis=1) <= radius]
        pts.extend(cand.tolist())
    x = np.array(pts[:n]) + np.asarray(center, dtype=float)
    vol = (4.0 / 3.0) * np.pi * radius**3 / n
    return mpm.ParticleSet.from_rest(
        x, mass=rho * vol, vol0=vol, object_id=object_id, v=np.asarray(v0, dtype=float)
    )


def lattice_particles(center, half, spacing, rho, object_id, v0=(0.0, 0.0, 0.0)):
    """Regular particle lattice (exact symmetry for force-balance checks)."""
    ax = np.arange(-half, half + 1e-9, spacing)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    x = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]) + np.asarray(center, dtype=float)
    vol = spacing**3
    return mpm.ParticleSet.from_rest(
        x, mass=rho * vol, vol0=vol, object_id=object_id, v=np.asarray(v0, dtype=float)
    )


def single_object_world(ps, dims=(32, 32, 32), dx=0.2 / 32, origin=(0.0, 0.0, 0.0),
                        params=None, **cfg_kw):
    params = params or MaterialParams(MaterialFamily.ELASTIC, E=3e4, nu=0.3)
    cfg_kw.setdefault("dt", 1.0 / 2400.0)
    cfg_kw.setdefault("substeps_per_frame", 100)
    cfg_kw.setdefault("frame_rate", 24.0)
    cfg_kw.setdefault("floor_height", -10.0)
    cfg = mpm.SimConfig(**cfg_kw)
    grid = mpm.ObjectGrid(dims, dx, origin)
    return mpm.WorldState([ps], [grid], [params], cfg)


@pytest.fixture
def free_fall_world():
    ps = ball_particles(0, [0.1, 0.1, 0.14], 0.02, 200, 1000.0, 0, v0=(0.1, 0.0, 0.0))
    return single_object_world(ps)
