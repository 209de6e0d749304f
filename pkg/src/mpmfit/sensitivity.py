"""Forward-mode parameter sensitivities through full rollouts.

A ParamVector packs the active optimization-space entries (log-space for
stiffness-like quantities, a sigmoid squash for the Poisson ratio, linear
for angles, friction coefficients, and initial velocities).  Tangents of
the P active entries are carried through every substep as explicit arrays;
nonsmooth branches follow the branch actually taken.

Pre-interaction flight is advanced analytically: while every object's
deformation state is exactly at rest and its velocity exactly uniform, the
discrete update has a closed form (positions ballistic, tangents linear in
time), so those substeps cost nothing.  The fast-forward disables itself
automatically the moment any real stepping perturbs the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses, mpm
from .errors import (
    ConfigError,
    IndexOutOfRange,
    InvertedElement,
    NonFiniteLoss,
    OutOfDomain,
)
from .materials import MaterialFamily, dp_alpha, lame_from

LN10 = math.log(10.0)

NU_LO, NU_HI = 0.05, 0.45
THETA_LO, THETA_HI = 0.01, 1.3
MU_CONTACT_LO, MU_CONTACT_HI = 0.0, 2.0

STAGE_VELOCITY = "velocity"
STAGE_PHYSICS = "physics"

# canonical per-object entry order (velocity entries always last)
MATERIAL_KINDS = (
    "log10_E", "squash_nu", "log10_tau_y", "log10_mu_visc",
    "log10_kappa", "theta_fric", "mu_contact",
)
VELOCITY_KINDS = ("v0x", "v0y", "v0z")

# default active material parameters per family
DEFAULT_ACTIVE = {
    MaterialFamily.ELASTIC: ("log10_E",),
    MaterialFamily.PLASTICINE: ("log10_E", "log10_tau_y"),
    MaterialFamily.SNOW: ("log10_E", "log10_tau_y"),
    MaterialFamily.NEWTONIAN_FLUID: ("log10_mu_visc", "log10_kappa"),
    MaterialFamily.SAND: ("theta_fric", "mu_contact"),
}


def squash_nu(s):
    return NU_LO + (NU_HI - NU_LO) / (1.0 + math.exp(-s))


def unsquash_nu(nu):
    if not NU_LO < nu < NU_HI:
        nu = min(max(nu, NU_LO + 1e-6), NU_HI - 1e-6)
    y = (nu - NU_LO) / (NU_HI - NU_LO)
    return math.log(y / (1.0 - y))


def squash_nu_deriv(s):
    sig = 1.0 / (1.0 + math.exp(-s))
    return (NU_HI - NU_LO) * sig * (1.0 - sig)


@dataclass(frozen=True)
class Entry:
    object_id: int
    kind: str


@dataclass
class ParamVector:
    """Active optimization parameters with a deterministic layout.

    Layout is a pure function of (object families, stage, options): per
    object its active material entries in MATERIAL_KINDS order, then per
    object the three initial-velocity components (velocity stage only).
    """

    values: np.ndarray
    entries: list
    stage: str
    families: list

    @property
    def width(self):
        return len(self.entries)

    def copy(self):
        return ParamVector(self.values.copy(), list(self.entries), self.stage, list(self.families))


def active_material_kinds(family, optimize_nu=False, optimize_contact=False):
    kinds = set(DEFAULT_ACTIVE[family])
    if optimize_nu and family is not MaterialFamily.NEWTONIAN_FLUID:
        kinds.add("squash_nu")
    if optimize_contact:
        kinds.add("mu_contact")
    return tuple(k for k in MATERIAL_KINDS if k in kinds)


def _encode_material(params, kind):
    if kind == "log10_E":
        return math.log10(params.E)
    if kind == "squash_nu":
        return unsquash_nu(params.nu)
    if kind == "log10_tau_y":
        return math.log10(max(params.tau_y, 1e-12))
    if kind == "log10_mu_visc":
        return math.log10(max(params.mu_visc, 1e-12))
    if kind == "log10_kappa":
        return math.log10(params.kappa)
    if kind == "theta_fric":
        return params.theta_fric
    if kind == "mu_contact":
        return params.mu_contact
    raise IndexOutOfRange(f"unknown entry kind {kind}")


def encode(params_list, v0_list, stage, optimize_nu=False, optimize_contact=False):
    """Pack per-object parameters and initial velocities into a ParamVector."""
    if stage not in (STAGE_VELOCITY, STAGE_PHYSICS):
        raise ConfigError(f"unknown stage {stage!r}")
    entries = []
    values = []
    if stage == STAGE_PHYSICS:
        for k, p in enumerate(params_list):
            for kind in active_material_kinds(p.family, optimize_nu, optimize_contact):
                entries.append(Entry(k, kind))
                values.append(_encode_material(p, kind))
    else:
        for k, v0 in enumerate(v0_list):
            for c, kind in enumerate(VELOCITY_KINDS):
                entries.append(Entry(k, kind))
                values.append(float(v0[c]))
    return ParamVector(
        np.asarray(values, dtype=np.float64), entries, stage,
        [p.family for p in params_list],
    )


def decode(pv, template_params, template_v0):
    """Unpack a ParamVector onto template parameters / velocities.

    Inactive fields keep their template values; bounded entries are clamped
    back into their physical ranges.
    """
    params = list(template_params)
    v0 = [np.asarray(v, dtype=np.float64).copy() for v in template_v0]
    updates = [{} for _ in params]
    for val, e in zip(pv.values, pv.entries):
        k = e.object_id
        if e.kind == "log10_E":
            updates[k]["E"] = 10.0 ** val
        elif e.kind == "squash_nu":
            updates[k]["nu"] = squash_nu(val)
        elif e.kind == "log10_tau_y":
            updates[k]["tau_y"] = 10.0 ** val
        elif e.kind == "log10_mu_visc":
            updates[k]["mu_visc"] = 10.0 ** val
        elif e.kind == "log10_kappa":
            updates[k]["kappa"] = 10.0 ** val
        elif e.kind == "theta_fric":
            updates[k]["theta_fric"] = min(max(val, THETA_LO), THETA_HI)
        elif e.kind == "mu_contact":
            updates[k]["mu_contact"] = min(max(val, MU_CONTACT_LO), MU_CONTACT_HI)
        elif e.kind == "v0x":
            v0[k][0] = val
        elif e.kind == "v0y":
            v0[k][1] = val
        elif e.kind == "v0z":
            v0[k][2] = val
    params = [p.with_(**u) if u else p for p, u in zip(params, updates)]
    return params, v0


def _material_tangent_rows(pv, params_list):
    """d(derived kernel quantities)/d(active entries): (K, 7, P) block.

    Rows follow mpm.PARAM_ROWS: mu, lam, tau_y, mu_visc, kappa, alpha_dp,
    mu_contact.
    """
    kn = len(params_list)
    out = np.zeros((kn, len(mpm.PARAM_ROWS), pv.width))
    for j, e in enumerate(pv.entries):
        k = e.object_id
        p = params_list[k]
        lame = lame_from(p.E, p.nu)
        if e.kind == "log10_E":
            out[k, 0, j] = LN10 * lame.mu
            out[k, 1, j] = LN10 * lame.lam
        elif e.kind == "squash_nu":
            s = unsquash_nu(p.nu)
            dnu = squash_nu_deriv(s)
            out[k, 0, j] = -p.E / (2.0 * (1.0 + p.nu) ** 2) * dnu
            out[k, 1, j] = (
                p.E * (1.0 + 2.0 * p.nu**2)
                / ((1.0 + p.nu) * (1.0 - 2.0 * p.nu)) ** 2
                * dnu
            )
        elif e.kind == "log10_tau_y":
            out[k, 2, j] = LN10 * p.tau_y
        elif e.kind == "log10_mu_visc":
            out[k, 3, j] = LN10 * p.mu_visc
        elif e.kind == "log10_kappa":
            out[k, 4, j] = LN10 * p.kappa
        elif e.kind == "theta_fric":
            if THETA_LO < p.theta_fric < THETA_HI:  # clamped edge: flat
                c = math.cos(p.theta_fric)
                s = math.sin(p.theta_fric)
                out[k, 5, j] = math.sqrt(2.0 / 3.0) * 6.0 * c / (3.0 - s) ** 2
        elif e.kind == "mu_contact":
            if MU_CONTACT_LO < p.mu_contact < MU_CONTACT_HI:
                out[k, 6, j] = 1.0
    return out


def seeded_world(world_template, pv, template_v0):
    """World with pv applied: parameters, velocities, and tangent seeds."""
    params, v0 = decode(pv, world_template.params, template_v0)
    world = world_template.copy()
    world.set_params(params)
    world.alloc_tangents(pv.width)
    for k, ps in enumerate(world.particles):
        ps.v[:] = v0[k]
    for j, e in enumerate(pv.entries):
        if e.kind in ("v0x", "v0y", "v0z"):
            c = VELOCITY_KINDS.index(e.kind)
            world.particles[e.object_id].v_t[:, c, j] = 1.0
    if pv.stage == STAGE_PHYSICS:
        world.mat_t[:] = _material_tangent_rows(pv, params)
    return world


@dataclass
class GradReport:
    loss: float
    grad: np.ndarray
    per_frame: list  # (frame index, loss value)


# ---------------------------------------------------------------------------
# analytic free-flight fast-forward
# ---------------------------------------------------------------------------


def _flight_state(world):
    """Per-object uniform velocity if the object is exactly at rest state."""
    vels = []
    for ps in world.particles:
        if ps.B.any() or ps.gradv.any():
            return None
        f = ps.F
        if not (
            (f[:, 0, 0] == 1.0).all() and (f[:, 1, 1] == 1.0).all() and (f[:, 2, 2] == 1.0).all()
            and not f[:, 0, 1].any() and not f[:, 0, 2].any() and not f[:, 1, 0].any()
            and not f[:, 1, 2].any() and not f[:, 2, 0].any() and not f[:, 2, 1].any()
        ):
            return None
        v0 = ps.v[0]
        if (ps.v != v0).any():
            return None
        vels.append(v0.copy())
    return vels


def _free_flight_steps(world, max_steps):
    """Largest m <= max_steps safe to advance analytically (0 if none).

    Safe means: every object's axis-aligned bounding box stays clear of the
    floor, the domain walls, and every other object's box by a stencil
    margin for the whole span.  Object boxes translate rigidly (uniform
    velocities), and relative motion between objects is linear in time.
    """
    if max_steps <= 0:
        return 0, None
    vels = _flight_state(world)
    if vels is None:
        return 0, None
    cfg = world.config
    g = np.asarray(cfg.gravity)
    dt = cfg.dt
    grid = world.grids[0]
    margin = 3.0 * grid.dx
    lo_dom = grid.origin + 2.0 * grid.dx
    hi_dom = grid.origin + (np.array(grid.dims) - 3) * grid.dx
    boxes = [(ps.x.min(axis=0), ps.x.max(axis=0)) for ps in world.particles]

    def off(k_step, v):
        # position offset after k_step discrete updates (velocity first)
        return k_step * dt * v + g * dt * dt * k_step * (k_step + 1) / 2.0

    def span_ok(m):
        # check offsets at integer steps: envelope per axis from the
        # endpoints plus the parabola vertex when it falls inside
        ks = [0, m]
        for k, (blo, bhi) in enumerate(boxes):
            v = vels[k]
            kk = list(ks)
            for a in range(3):
                if g[a] != 0.0:
                    kv = -v[a] / (g[a] * dt) - 0.5
                    if 0 < kv < m:
                        kk.extend((int(math.floor(kv)), int(math.ceil(kv))))
            offs = np.array([off(q, v) for q in kk])
            lo = blo + offs.min(axis=0)
            hi = bhi + offs.max(axis=0)
            if (lo < lo_dom + margin).any() or (hi > hi_dom - margin).any():
                return False
            if lo[2] < cfg.floor_height + margin:
                return False
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                # conservative: separation now minus total relative travel
                gap = np.maximum(
                    boxes[b][0] - boxes[a][1], boxes[a][0] - boxes[b][1]
                ).max()
                travel = float(np.linalg.norm(vels[a] - vels[b])) * m * dt
                if gap - travel < 4.0 * grid.dx:
                    return False
        return True

    if span_ok(max_steps):
        return max_steps, vels
    lo_m, hi_m = 0, max_steps
    while lo_m < hi_m:
        mid = (lo_m + hi_m + 1) // 2
        if span_ok(mid):
            lo_m = mid
        else:
            hi_m = mid - 1
    return lo_m, vels


def _apply_free_flight(world, m, vels):
    cfg = world.config
    g = np.asarray(cfg.gravity)
    dt = cfg.dt
    shift_const = g * dt * dt * m * (m + 1) / 2.0
    for k, ps in enumerate(world.particles):
        ps.x += m * dt * vels[k] + shift_const
        ps.v += m * dt * g
        if ps.tangent_width:
            ps.x_t += m * dt * ps.v_t
    world.step_index += m


# ---------------------------------------------------------------------------
# dual rollout and loss
# ---------------------------------------------------------------------------


def dual_frame_rollout(world, n_frames, on_frame, fast_forward=True):
    """Advance whole frames in place, calling on_frame(f, world) after each.

    Uses the analytic fast-forward while the exact free-flight conditions
    hold; reverts to kernel stepping otherwise.
    """
    sub = world.config.substeps_per_frame
    for f in range(1, n_frames + 1):
        done = 0
        while done < sub:
            m = 0
            if fast_forward:
                m, vels = _free_flight_steps(world, sub - done)
                if m == 0:
                    # real stepping perturbs the exact rest state, so the
                    # flight conditions cannot come back: stop checking
                    fast_forward = False
            if m > 0:
                _apply_free_flight(world, m, vels)
                done += m
            else:
                mpm.step_inplace(world)
                done += 1
        on_frame(f, world)
    return world


def loss_and_grad(world_template, obs, loss_cfg, pv, template_v0=None, frames=None,
                  fast_forward=True, start_state=None, start_frame=0):
    """Loss and its gradient w.r.t. the active parameter entries.

    Rolls a seeded copy of the template world over the supervised frames and
    accumulates the geometric loss and its forward-mode gradient.  Diverged
    simulations (non-finite state, particles leaving the grid, inverted
    elements) raise NonFiniteLoss so the optimizer can backtrack.

    `start_state`/`start_frame` restart the rollout from a cached mid-flight
    snapshot (used by the fitting loop's prefix cache).
    """
    if template_v0 is None:
        template_v0 = [ps.v[0] for ps in world_template.particles]
    if frames is None:
        frames = [f for f in obs.frame_indices if f > 0]
    frames = sorted(frames)
    if not frames and pv.width == 0:
        raise ConfigError("nothing to evaluate: no frames and no parameters")

    if start_state is not None:
        world = start_state.copy()
    else:
        world = seeded_world(world_template, pv, template_v0)

    per_frame = []
    grad = np.zeros(pv.width)
    total = 0.0
    frame_set = set(frames)

    def on_frame(f_local, w):
        f = start_frame + f_local
        if f not in frame_set:
            return
        for ps in w.particles:
            if not np.isfinite(ps.x).all():
                raise NonFiniteLoss(f"non-finite positions at frame {f}")
        sim_pos = [ps.x for ps in w.particles]
        sim_tan = [ps.x_t for ps in w.particles]
        vol0s = [ps.vol0 for ps in w.particles]
        v, g = losses.frame_loss(sim_pos, vol0s, obs, f, loss_cfg, sim_tangents=sim_tan)
        per_frame.append((f, v))
        nonlocal total, grad
        total += v
        grad = grad + g

    try:
        dual_frame_rollout(world, max(frames) - start_frame, on_frame, fast_forward)
    except (OutOfDomain, InvertedElement) as exc:
        raise NonFiniteLoss(f"simulation diverged: {exc}") from exc

    loss = total / len(frames)
    grad = grad / len(frames)
    if not (np.isfinite(loss) and np.isfinite(grad).all()):
        raise NonFiniteLoss("non-finite loss or gradient")
    return GradReport(loss=loss, grad=grad, per_frame=per_frame)


def centroid_loss_and_grad(world_template, targets, frames, pv, template_v0=None,
                           fast_forward=True):
    """Smooth positional objective: squared centroid deviation per frame.

    targets[f][k] is the observed centroid of object k at frame f.  Used by
    gradient audits, where the chamfer term's nearest-neighbor reassignments
    would contaminate finite differences on moving scenes.
    """
    if template_v0 is None:
        template_v0 = [ps.v[0] for ps in world_template.particles]
    frames = sorted(frames)
    world = seeded_world(world_template, pv, template_v0)
    acc = {"loss": 0.0}
    grad = np.zeros(pv.width)

    def on_frame(f, w):
        if f not in targets:
            return
        nonlocal grad
        for k, ps in enumerate(w.particles):
            diff = ps.x.mean(axis=0) - targets[f][k]
            acc["loss"] += float(diff @ diff)
            if pv.width:
                grad = grad + 2.0 * np.einsum("c,ct->t", diff, ps.x_t.mean(axis=0))

    try:
        dual_frame_rollout(world, max(frames), on_frame, fast_forward)
    except (OutOfDomain, InvertedElement) as exc:
        raise NonFiniteLoss(f"simulation diverged: {exc}") from exc
    return acc["loss"], grad


def centroid_loss_value(world_template, targets, frames, pv, template_v0=None,
                        fast_forward=True):
    zero = ParamVector(np.zeros(0), [], pv.stage, pv.families)
    params, v0 = decode(pv, world_template.params, template_v0
                        if template_v0 is not None
                        else [ps.v[0] for ps in world_template.particles])
    world = world_template.copy()
    world.set_params(params)
    world.alloc_tangents(0)
    for ps, v in zip(world.particles, v0):
        ps.v[:] = v
    acc = {"loss": 0.0}

    def on_frame(f, w):
        if f not in targets:
            return
        for k, ps in enumerate(w.particles):
            diff = ps.x.mean(axis=0) - targets[f][k]
            acc["loss"] += float(diff @ diff)

    try:
        dual_frame_rollout(world, max(frames), on_frame, fast_forward)
    except (OutOfDomain, InvertedElement) as exc:
        raise NonFiniteLoss(f"simulation diverged: {exc}") from exc
    return acc["loss"]


def loss_value(world_template, obs, loss_cfg, pv, template_v0=None, frames=None,
               fast_forward=True):
    """Plain (tangent-free) loss at the given parameter vector."""
    if template_v0 is None:
        template_v0 = [ps.v[0] for ps in world_template.particles]
    if frames is None:
        frames = [f for f in obs.frame_indices if f > 0]
    frames = sorted(frames)
    params, v0 = decode(pv, world_template.params, template_v0)
    world = world_template.copy()
    world.set_params(params)
    world.alloc_tangents(0)
    for k, ps in enumerate(world.particles):
        ps.v[:] = v0[k]

    per_frame = []
    frame_set = set(frames)

    def on_frame(f, w):
        if f not in frame_set:
            return
        for ps in w.particles:
            if not np.isfinite(ps.x).all():
                raise NonFiniteLoss(f"non-finite positions at frame {f}")
        sim_pos = [ps.x for ps in w.particles]
        vol0s = [ps.vol0 for ps in w.particles]
        v, _ = losses.frame_loss(sim_pos, vol0s, obs, f, loss_cfg)
        per_frame.append((f, v))

    try:
        dual_frame_rollout(world, max(frames), on_frame, fast_forward)
    except (OutOfDomain, InvertedElement) as exc:
        raise NonFiniteLoss(f"simulation diverged: {exc}") from exc
    total = sum(v for _, v in per_frame)
    if not np.isfinite(total):
        raise NonFiniteLoss("non-finite loss")
    return total / len(frames), per_frame
