"""A single elastic ball dropped onto the floor.

Runs the same drop at three stiffness values and prints the rebound heights:
softer balls squash more and bounce less.
"""

import warnings

import numpy as np

from mpmfit import mpm
from mpmfit.materials import MaterialFamily, MaterialParams

warnings.filterwarnings("ignore", category=RuntimeWarning)


def ball(seed, center, radius, n, rho, v0):
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        c = rng.uniform(-radius, radius, (2 * n, 3))
        pts.extend(c[np.linalg.norm(c, axis=1) <= radius].tolist())
    x = np.asarray(pts[:n]) + center
    vol = 4 / 3 * np.pi * radius**3 / n
    return mpm.ParticleSet.from_rest(x, rho * vol, vol, 0, v=np.asarray(v0))


def drop(young):
    cfg = mpm.SimConfig(dt=1 / 4800, substeps_per_frame=200, frame_rate=24.0,
                        floor_height=0.02, floor_friction=0.4)
    ps = ball(0, [0.16, 0.16, 0.16], 0.03, 3000, 1000.0, (0.0, 0.0, -1.0))
    grid = mpm.ObjectGrid((48, 48, 48), 0.32 / 48, (0.0, 0.0, 0.0))
    par = MaterialParams(MaterialFamily.ELASTIC, E=young, nu=0.3)
    world = mpm.WorldState([ps], [grid], [par], cfg)
    traj = mpm.rollout(world, 20)
    heights = [snap[0][:, 2].mean() for snap in traj.frames]
    return heights


if __name__ == "__main__":
    for young in (5e3, 2e4, 8e4):
        h = drop(young)
        rebound = max(h[6:]) - min(h)
        print(f"E = {young:8.0f} Pa: low point {min(h):.4f} m, "
              f"rebound {rebound * 1000:.1f} mm")
        bar = "".join("#" if x > np.median(h) else "." for x in h)
        print(f"   height per frame: {bar}")
