"""Forward-mode parameter gradients through a full rollout.

Differentiates the geometric loss of a small pressed-ball scene with respect
to stiffness and yield stress, and compares against central finite
differences.
"""

import warnings

import numpy as np

from mpmfit import losses, mpm, observe, sensitivity
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


def make_world(par):
    cfg = mpm.SimConfig(dt=1 / 2400, substeps_per_frame=100, frame_rate=24.0,
                        floor_height=0.03, floor_friction=0.3)
    ps = ball(7, [0.1, 0.1, 0.0505], 0.02, 400, 1000.0, (0.0, 0.0, -0.02))
    grid = mpm.ObjectGrid((32, 32, 32), 0.2 / 32, (0.0, 0.0, 0.0))
    return mpm.WorldState([ps], [grid], [par], cfg)


if __name__ == "__main__":
    truth = MaterialParams(MaterialFamily.PLASTICINE, E=2.5e4, nu=0.3, tau_y=400.0)
    traj = mpm.rollout(make_world(truth), 2)
    obs = losses.ObservationSet(
        [1, 2],
        [[p[observe.surface_extract(p, 0.012)].copy() for p in f] for f in traj.frames],
        None, [],
    )

    guess = truth.with_(E=5e4, tau_y=250.0)
    world = make_world(guess)
    cfg = losses.LossConfig(use_alpha=False, extract_surface=False)
    pv = sensitivity.encode([guess], [np.zeros(3)], "physics")
    rep = sensitivity.loss_and_grad(world, obs, cfg, pv, frames=[1, 2])
    print(f"loss at the off-truth guess: {rep.loss:.6f}")
    h = 1e-3
    for j, entry in enumerate(pv.entries):
        up, dn = pv.copy(), pv.copy()
        up.values = pv.values.copy()
        dn.values = pv.values.copy()
        up.values[j] += h
        dn.values[j] -= h
        lp, _ = sensitivity.loss_value(world, obs, cfg, up, frames=[1, 2])
        lm, _ = sensitivity.loss_value(world, obs, cfg, dn, frames=[1, 2])
        fd = (lp - lm) / (2 * h)
        print(f"d loss / d {entry.kind:12s}: forward-mode {rep.grad[j]: .6e}  "
              f"finite difference {fd: .6e}")
