"""Identification loop: velocity estimation, physics refinement with a
horizon curriculum, periodic state resynchronization, and material swaps.

Stage one estimates per-object initial velocities (80 Adam iterations on a
short early window, initialized from observed centroid differences); stage
two refines the active material parameters (200 iterations) while the
supervised rollout horizon grows whenever the loss plateaus.  Every
`resync_period` iterations the initial velocities are re-derived from
gravity-corrected centroid differences and kept only if they lower the
current-window loss.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses, mpm, sensitivity
from .errors import ConfigError, DivergedOptimization, InvalidPermutation, NonFiniteLoss

loss_id = losses.loss_id
LossConfig = losses.LossConfig


@dataclass(frozen=True)
class Curriculum:
    """Plateau-triggered horizon growth for the physics stage."""

    start_frames: int = 5
    increment: int = 5
    plateau_window: int = 10
    plateau_rel_improvement: float = 0.01

    def __post_init__(self):
        if self.start_frames < 2:
            raise ConfigError("start_frames must be >= 2")
        if self.increment < 1:
            raise ConfigError("increment must be >= 1")


@dataclass(frozen=True)
class FitConfig:
    velocity_iters: int = 80
    physics_iters: int = 200
    lr_velocity: float = 0.02
    lr_physics: float = 0.01
    velocity_frames: int = 3
    resync_period: int = 50
    max_backtracks: int = 5
    optimize_nu: bool = False
    optimize_contact: bool = False
    fast_forward: bool = True


class Adam:
    """Standard Adam on a small dense parameter vector."""

    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, values, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class FitResult:
    params_hat: list
    v0_hat: list
    loss_history: list
    velocity_loss_history: list
    curriculum_history: list
    wall_time: float
    config: dict
    seed: int | None = None

    def to_dict(self):
        # wall_time stays an in-memory diagnostic: serialized fit results
        # must be bitwise reproducible for fixed seeds
        return {
            "params_hat": [
                {
                    "family": p.family.value,
                    "E": p.E, "nu": p.nu, "tau_y": p.tau_y,
                    "mu_visc": p.mu_visc, "kappa": p.kappa,
                    "theta_fric": p.theta_fric, "rho": p.rho,
                    "mu_contact": p.mu_contact,
                }
                for p in self.params_hat
            ],
            "v0_hat": [list(map(float, v)) for v in self.v0_hat],
            "loss_history": self.loss_history,
            "velocity_loss_history": self.velocity_loss_history,
            "curriculum_history": self.curriculum_history,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        from .materials import MaterialFamily, MaterialParams

        params = [
            MaterialParams(
                family=MaterialFamily(p["family"]), E=p["E"], nu=p["nu"],
                tau_y=p["tau_y"], mu_visc=p["mu_visc"], kappa=p["kappa"],
                theta_fric=p["theta_fric"], rho=p["rho"], mu_contact=p["mu_contact"],
            )
            for p in d["params_hat"]
        ]
        return cls(
            params_hat=params,
            v0_hat=[np.array(v) for v in d["v0_hat"]],
            loss_history=d["loss_history"],
            velocity_loss_history=d["velocity_loss_history"],
            curriculum_history=d["curriculum_history"],
            wall_time=d.get("wall_time", 0.0),
            config=d["config"],
            seed=d.get("seed"),
        )


def centroid_velocity_guess(obs, gravity=None):
    """Per-object velocity from the first two observed centroids.

    Plain finite difference; with `gravity` the ballistic curvature over the
    interval is removed.
    """
    if obs.n_frames < 2:
        raise ConfigError("need at least two observed frames")
    f0, f1 = obs.frame_indices[0], obs.frame_indices[1]
    dt = (f1 - f0) / obs.frame_rate
    out = []
    for k in range(obs.n_objects):
        v = (obs.centroid(1, k) - obs.centroid(0, k)) / dt
        if gravity is not None:
            v = v - 0.5 * np.asarray(gravity) * dt
        out.append(v)
    return out


def _adam_loop(world, obs, loss_cfg, pv, v0_template, frames, iters, lr,
               fit_cfg, history):
    """Adam iterations with step-halving backtracking on diverged rollouts."""
    opt = Adam(pv.width, lr)
    values_prev = pv.values.copy()
    for _it in range(iters):
        retries = 0
        while True:
            try:
                rep = sensitivity.loss_and_grad(
                    world, obs, loss_cfg, pv, template_v0=v0_template,
                    frames=frames, fast_forward=fit_cfg.fast_forward,
                )
                break
            except NonFiniteLoss:
                retries += 1
                if retries > fit_cfg.max_backtracks:
                    raise DivergedOptimization(
                        f"no finite loss after {retries - 1} backtracks"
                    ) from None
                pv.values = 0.5 * (pv.values + values_prev)
        history.append(rep.loss)
        values_prev = pv.values.copy()
        pv.values = opt.step(pv.values, rep.grad)
    return pv


def fit_velocity(world0, obs, loss_cfg, fit_cfg=None):
    """Estimate per-object initial velocities on the first observed frames."""
    fit_cfg = fit_cfg or FitConfig()
    if obs.n_frames < 3:
        raise ConfigError("velocity estimation needs at least 3 observed frames")
    v0_init = centroid_velocity_guess(obs)
    pv = sensitivity.encode(world0.params, v0_init, sensitivity.STAGE_VELOCITY)
    frames = [f for f in obs.frame_indices if 0 < f <= fit_cfg.velocity_frames]
    if not frames:
        raise ConfigError("no observed frames inside the velocity window")
    history = []
    pv = _adam_loop(world0, obs, loss_cfg, pv, v0_init, frames,
                    fit_cfg.velocity_iters, fit_cfg.lr_velocity, fit_cfg, history)
    _, v0_hat = sensitivity.decode(pv, world0.params, v0_init)
    return v0_hat, history


def fit_params(world0, obs, loss_cfg, curriculum=None, fit_cfg=None, v0_hat=None,
               seed=None):
    """Refine material parameters with the horizon curriculum.

    The rollout window always starts at the lifted frame-0 state; its length
    grows by `curriculum.increment` frames whenever the best loss improved
    less than `plateau_rel_improvement` over the last `plateau_window`
    iterations, capped at the supervised frame count.
    """
    t_start = time.time()
    curriculum = curriculum or Curriculum()
    fit_cfg = fit_cfg or FitConfig()
    if v0_hat is None:
        v0_hat = [ps.v[0].copy() for ps in world0.particles]
    v0_hat = [np.asarray(v, dtype=np.float64) for v in v0_hat]

    supervised = [f for f in obs.frame_indices if f > 0]
    max_frame = max(supervised)
    horizon = min(curriculum.start_frames, max_frame)

    pv = sensitivity.encode(world0.params, v0_hat, sensitivity.STAGE_PHYSICS,
                            optimize_nu=fit_cfg.optimize_nu,
                            optimize_contact=fit_cfg.optimize_contact)
    opt = Adam(pv.width, fit_cfg.lr_physics)
    values_prev = pv.values.copy()
    loss_history = []
    curriculum_history = [(0, horizon)]
    window_best = []

    for it in range(fit_cfg.physics_iters):
        if fit_cfg.resync_period and it > 0 and it % fit_cfg.resync_period == 0:
            v0_hat = _resync_velocities(world0, obs, loss_cfg, pv, v0_hat, fit_cfg,
                                        horizon, supervised)
        frames = [f for f in supervised if f <= horizon]
        retries = 0
        while True:
            try:
                rep = sensitivity.loss_and_grad(
                    world0, obs, loss_cfg, pv, template_v0=v0_hat,
                    frames=frames, fast_forward=fit_cfg.fast_forward,
                )
                break
            except NonFiniteLoss:
                retries += 1
                if retries > fit_cfg.max_backtracks:
                    raise DivergedOptimization(
                        f"no finite loss after {retries - 1} backtracks at iteration {it}"
                    ) from None
                pv.values = 0.5 * (pv.values + values_prev)
        loss_history.append(rep.loss)
        window_best.append(min(rep.loss, window_best[-1]) if window_best else rep.loss)
        values_prev = pv.values.copy()
        pv.values = opt.step(pv.values, rep.grad)

        if horizon < max_frame and len(window_best) > curriculum.plateau_window:
            prev = window_best[-1 - curriculum.plateau_window]
            improvement = (prev - window_best[-1]) / max(prev, 1e-30)
            if improvement < curriculum.plateau_rel_improvement:
                horizon = min(horizon + curriculum.increment, max_frame)
                curriculum_history.append((it + 1, horizon))
                window_best = []

    params_hat, _ = sensitivity.decode(pv, world0.params, v0_hat)
    return FitResult(
        params_hat=params_hat,
        v0_hat=[np.asarray(v) for v in v0_hat],
        loss_history=loss_history,
        velocity_loss_history=[],
        curriculum_history=curriculum_history,
        wall_time=time.time() - t_start,
        config={
            "loss": asdict(loss_cfg),
            "curriculum": asdict(curriculum),
            "fit": asdict(fit_cfg),
        },
        seed=seed,
    )


def _resync_velocities(world0, obs, loss_cfg, pv, v0_hat, fit_cfg, horizon, supervised):
    """Keyframe resynchronization: candidate v0 from observed centroids.

    The rollout start state itself is rebuilt from the lifted frame-0 state
    on every iteration; here the gravity-corrected centroid estimate is
    offered as a replacement for the current velocities and adopted only if
    it improves the current-window loss.
    """
    cand = centroid_velocity_guess(obs, gravity=world0.config.gravity)
    frames = [f for f in supervised if f <= horizon]
    try:
        cur_loss, _ = sensitivity.loss_value(world0, obs, loss_cfg, pv,
                                             template_v0=v0_hat, frames=frames,
                                             fast_forward=fit_cfg.fast_forward)
        cand_loss, _ = sensitivity.loss_value(world0, obs, loss_cfg, pv,
                                              template_v0=cand, frames=frames,
                                              fast_forward=fit_cfg.fast_forward)
    except NonFiniteLoss:
        return v0_hat
    return cand if cand_loss < cur_loss else v0_hat


def identify(world0, obs, loss_cfg=None, curriculum=None, fit_cfg=None, seed=None):
    """Velocity stage then physics stage on a lifted world."""
    loss_cfg = loss_cfg or LossConfig()
    fit_cfg = fit_cfg or FitConfig()
    if loss_cfg.use_alpha and obs.masks is None:
        raise ConfigError("alpha loss requested but observations carry no masks")
    v0_hat, vel_history = fit_velocity(world0, obs, loss_cfg, fit_cfg)
    result = fit_params(world0, obs, loss_cfg, curriculum, fit_cfg,
                        v0_hat=v0_hat, seed=seed)
    result.velocity_loss_history = vel_history
    return result


def swap_materials(world, permutation):
    """World with object k carrying the parameters of object perm[k].

    Geometry and velocities stay fixed; only the constitutive parameters are
    permuted.
    """
    perm = list(permutation)
    kn = world.n_objects
    if sorted(perm) != list(range(kn)):
        raise InvalidPermutation(f"{perm} is not a bijection on 0..{kn - 1}")
    out = world.copy()
    out.set_params([world.params[perm[k]] for k in range(kn)])
    return out
