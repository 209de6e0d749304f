"""Synthetic benchmark scenes and the evaluation harness.

A scene is two or three parametric solids thrown so their ballistic paths
cross before either lands, simulated with the full stepper, and observed as
per-frame surface samples plus multi-view silhouettes from a hemisphere of
cameras.  True parameters are stored separately from the observations.
Evaluation reports per-frame chamfer / EMD per object and scene-wise, split
into the observable window and the future window.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import formats, lifting, losses, mpm, observe, sensitivity
from .errors import CollisionInfeasible, ConfigError, NonFiniteLoss, OutOfDomain, ShapeMismatch
from .materials import MaterialFamily, MaterialParams

GRAVITY = (0.0, 0.0, -9.8)

# ---------------------------------------------------------------------------
# parametric solids
# ---------------------------------------------------------------------------

SHAPES = ("sphere", "box", "ellipsoid", "torus", "capsule")


def shape_inside(kind, params, pts):
    """Boolean interior test for local-frame points."""
    p = np.asarray(pts)
    if kind == "sphere":
        return (p**2).sum(axis=1) <= params["radius"] ** 2
    if kind == "box":
        h = np.asarray(params["half_extents"])
        return np.all(np.abs(p) <= h, axis=1)
    if kind == "ellipsoid":
        a = np.asarray(params["semi_axes"])
        return ((p / a) ** 2).sum(axis=1) <= 1.0
    if kind == "torus":
        ring = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - params["major_radius"]
        return ring**2 + p[:, 2] ** 2 <= params["minor_radius"] ** 2
    if kind == "capsule":
        h = params["half_height"]
        dz = np.maximum(np.abs(p[:, 2]) - h, 0.0)
        return p[:, 0] ** 2 + p[:, 1] ** 2 + dz**2 <= params["radius"] ** 2
    raise ConfigError(f"unknown shape {kind!r}")


def shape_bounding_radius(kind, params):
    if kind == "sphere":
        return params["radius"]
    if kind == "box":
        return float(np.linalg.norm(params["half_extents"]))
    if kind == "ellipsoid":
        return float(np.max(params["semi_axes"]))
    if kind == "torus":
        return params["major_radius"] + params["minor_radius"]
    if kind == "capsule":
        return params["half_height"] + params["radius"]
    raise ConfigError(f"unknown shape {kind!r}")


def shape_occupancy(kind, params, resolution=48):
    """Analytic occupancy grid of a solid in its local frame."""
    r = shape_bounding_radius(kind, params)
    extent = 2.0 * r * 1.1
    origin = np.full(3, -extent / 2.0)
    dx = extent / resolution
    ax = origin[0] + (np.arange(resolution) + 0.5) * dx
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    density = shape_inside(kind, params, pts).astype(np.float64).reshape(
        resolution, resolution, resolution
    )
    return lifting.OccupancyGrid((resolution,) * 3, dx, origin, density)


# ---------------------------------------------------------------------------
# scene configuration
# ---------------------------------------------------------------------------

# per-family parameter draw ranges; dagger entries follow the published
# dataset recipe (Poisson read as a ratio), the rest are documented choices
DEFAULT_RANGES = {
    "elastic": {"E": (4.75e4, 5.25e4), "nu": (0.20, 0.30), "rho": (800.0, 1200.0),
                "mu_contact": (0.2, 0.6)},
    "plasticine": {"E": (4.75e4, 5.25e4), "nu": (0.20, 0.30), "rho": (800.0, 1200.0),
                   "tau_y": (2.5e-2, 4.5e-2), "mu_contact": (0.2, 0.6)},
    "snow": {"E": (4.75e4, 5.25e4), "nu": (0.20, 0.30), "rho": (800.0, 1200.0),
             "tau_y": (2.5e-2, 4.5e-2), "mu_contact": (0.2, 0.6)},
    "newtonian_fluid": {"mu_visc": (0.5, 5.0), "kappa": (5e4, 2e5),
                        "rho": (800.0, 1200.0), "mu_contact": (0.2, 0.6)},
    "sand": {"E": (4.75e4, 5.25e4), "nu": (0.20, 0.30), "rho": (800.0, 1200.0),
             "theta_fric": (math.radians(15.0), math.radians(45.0)),
             "mu_contact": (0.2, 0.6)},
}

LOG_DRAWN = {"E", "tau_y", "mu_visc", "kappa"}  # mid-range guess in log space


@dataclass
class ObjectSpec:
    family: str = "elastic"
    shape: str = "sphere"
    shape_params: dict = field(default_factory=lambda: {"radius": 0.05})
    ranges: dict = field(default_factory=dict)  # overrides of DEFAULT_RANGES
    fixed: dict = field(default_factory=dict)  # exact values, never drawn

    def all_ranges(self):
        out = dict(DEFAULT_RANGES[self.family])
        out.update({k: tuple(v) for k, v in self.ranges.items()})
        return out


@dataclass
class SceneConfig:
    seed: int = 0
    objects: list = field(default_factory=lambda: [ObjectSpec(), ObjectSpec(family="plasticine")])
    frames: int = 30
    fps: float = 24.0
    substeps: int = 200
    n_views: int = 11
    resolution: int = 128
    splat_radius: float = 1.5
    grid_res: int = 64
    particles_per_object: int = 8000
    object_span_cells: float = 13.0
    floor_friction: float = 0.4
    floor_mode: str = "separate"
    collide_time: tuple = (0.10, 0.22)
    observable_horizon: int = 15

    def __post_init__(self):
        if not 2 <= len(self.objects) <= 3:
            raise ConfigError("scenes take 2 or 3 objects")
        if self.frames < 2:
            raise ConfigError("frames must be >= 2")

    @property
    def dt(self):
        return 1.0 / (self.fps * self.substeps)

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["objects"] = [ObjectSpec(**o) for o in d.get("objects", [])]
        if "collide_time" in d:
            d["collide_time"] = tuple(d["collide_time"])
        return cls(**d)


def draw_params(spec, rng):
    """Uniform draw from the object's ranges (fixed fields win)."""
    vals = {}
    for name, (lo, hi) in spec.all_ranges().items():
        vals[name] = float(rng.uniform(lo, hi))
    vals.update(spec.fixed)
    return MaterialParams(family=MaterialFamily(spec.family), **vals)


def midrange_params(spec):
    """Optimization-space midpoint of every drawn range (fit initialization)."""
    vals = {}
    for name, (lo, hi) in spec.all_ranges().items():
        if name in LOG_DRAWN:
            vals[name] = 10.0 ** (0.5 * (math.log10(lo) + math.log10(hi)))
        else:
            vals[name] = 0.5 * (lo + hi)
    vals.update(spec.fixed)
    return MaterialParams(family=MaterialFamily(spec.family), **vals)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _landing_time(z0, vz, r):
    """First time z0 + vz t - g/2 t^2 reaches r above the floor (z=0)."""
    g = 9.8
    c = z0 - r
    disc = vz * vz + 2.0 * g * c
    if disc < 0:
        return 0.0
    return (vz + math.sqrt(disc)) / g


def _sample_kinematics(cfg, radii, rng):
    """Starting positions / velocities with a guaranteed pre-landing collision."""
    kn = len(radii)
    t_c = rng.uniform(*cfg.collide_time)
    h_col = rng.uniform(0.12, 0.17)
    meet = np.array([0.0, 0.0, h_col])
    phi0 = rng.uniform(0.0, 2.0 * math.pi)
    g = np.array(GRAVITY)
    pos, vel = [], []
    for k in range(kn):
        phi = phi0 + k * 2.0 * math.pi / kn + rng.uniform(-0.3, 0.3)
        elev = rng.uniform(-0.15, 0.45)
        d = rng.uniform(0.09, 0.13)
        dirv = np.array(
            [math.cos(phi) * math.cos(elev), math.sin(phi) * math.cos(elev), math.sin(elev)]
        )
        x0 = meet + d * dirv
        x0[2] = max(x0[2], radii[k] + 0.055)
        m_k = meet + rng.uniform(-0.35, 0.35) * radii[k] * np.array([1.0, 1.0, 0.3])
        v0 = (m_k - x0) / t_c - 0.5 * g * t_c
        pos.append(x0)
        vel.append(v0)
    # validity: bounding spheres meet before frame 15 and before any landing
    t_land = min(_landing_time(pos[k][2], vel[k][2], radii[k]) for k in range(kn))
    t_limit = min(t_land, 15.0 / cfg.fps)
    hit = False
    for a in range(kn):
        for b in range(a + 1, kn):
            dx0 = pos[a] - pos[b]
            dv = vel[a] - vel[b]
            denom = float(dv @ dv)
            t_star = -float(dx0 @ dv) / denom if denom > 1e-12 else 0.0
            t_star = min(max(t_star, 0.0), t_limit)
            dist = np.linalg.norm(dx0 + dv * t_star)
            if dist < 0.95 * (radii[a] + radii[b]):
                hit = True
    if not hit:
        return None
    # initial bounding boxes must be disjoint
    for a in range(kn):
        for b in range(a + 1, kn):
            if np.linalg.norm(pos[a] - pos[b]) < 1.15 * (radii[a] + radii[b]):
                return None
    speed = max(float(np.linalg.norm(v)) for v in vel)
    if speed > 2.2:
        return None
    return pos, vel, t_c


def build_scene_world(cfg, rng=None):
    """Sampled ground-truth world plus the drawn parameters.

    Returns (world, params, v0, geometry-metadata).  Raises
    CollisionInfeasible after 100 kinematics rejections.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    kn = len(cfg.objects)
    params = [draw_params(spec, rng) for spec in cfg.objects]
    radii = [shape_bounding_radius(o.shape, o.shape_params) for o in cfg.objects]

    kin = None
    for _ in range(100):
        kin = _sample_kinematics(cfg, radii, rng)
        if kin is not None:
            break
    if kin is None:
        raise CollisionInfeasible("no colliding velocity assignment in 100 attempts")
    pos, vel, t_c = kin

    dx = 2.0 * max(radii) / cfg.object_span_cells
    span = cfg.grid_res * dx
    center_xy = np.mean([p[:2] for p in pos], axis=0)
    origin = np.array(
        [center_xy[0] - span / 2.0, center_xy[1] - span / 2.0, -3.5 * dx]
    )
    sim_cfg = mpm.SimConfig(
        dt=cfg.dt, gravity=GRAVITY, floor_height=0.0,
        floor_friction=cfg.floor_friction, floor_mode=cfg.floor_mode,
        substeps_per_frame=cfg.substeps, frame_rate=cfg.fps,
    )

    particles = []
    lift_cfg = lifting.LiftConfig(target_particle_count=cfg.particles_per_object)
    for k, spec in enumerate(cfg.objects):
        occ = shape_occupancy(spec.shape, spec.shape_params)
        ps = lifting.to_particles(occ, params[k], lift_cfg, object_id=k,
                                  seed=cfg.seed * 13 + 7 * k)
        rot = _random_rotation(rng)
        ps.x[:] = ps.x @ rot.T + pos[k]
        ps.v[:] = vel[k]
        particles.append(ps)

    grids = [mpm.ObjectGrid((cfg.grid_res,) * 3, dx, origin) for _ in range(kn)]
    world = mpm.WorldState(particles, grids, params, sim_cfg)
    meta = {
        "t_collision": t_c,
        "dx": dx,
        "origin": origin.tolist(),
        "positions": [p.tolist() for p in pos],
        "radii": radii,
    }
    return world, params, [np.asarray(v) for v in vel], meta


def scene_cameras(cfg, world):
    grid = world.grids[0]
    span = cfg.grid_res * grid.dx
    center = grid.origin + np.array([span / 2, span / 2, 0.35 * span])
    return observe.hemisphere_cameras(
        center, radius=1.6 * span, n_views=cfg.n_views,
        width=cfg.resolution, height=cfg.resolution,
    )


def gen_scene(cfg, out_dir):
    """Generate, simulate, observe, and write a scene directory.

    The emitted masks are exactly observe.rasterize_silhouette of the true
    particles, and surface files exactly observe.surface_extract of them, so
    the observation loop closes bitwise.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    last_exc = None
    world = None
    for _attempt in range(5):
        try:
            world, params, v0, meta = build_scene_world(cfg, rng)
            traj = mpm.rollout(world, cfg.frames - 1)
            break
        except (OutOfDomain, NonFiniteLoss) as exc:  # resample kinematics
            last_exc = exc
            world = None
    if world is None:
        raise CollisionInfeasible(f"generation kept diverging: {last_exc}")

    frames = [[ps.x.copy() for ps in world.particles]] + traj.frames
    frame_indices = [0] + traj.frame_indices
    cams = scene_cameras(cfg, world)

    obs_dir = out / "obs"
    obs_dir.mkdir(exist_ok=True)
    for i, f in enumerate(frame_indices):
        for k in range(world.n_objects):
            pts = frames[i][k]
            shell = observe.surface_extract(
                pts, losses.shell_spacing(world.particles[k].vol0)
            )
            formats.write_points(obs_dir / f"surf_f{f:03d}_o{k}.pts", pts[shell])
            for j, cam in enumerate(cams):
                mask = observe.rasterize_silhouette(pts, cam, cfg.splat_radius)
                formats.write_pgm(obs_dir / f"mask_f{f:03d}_v{j:02d}_o{k}.pgm", mask)

    formats.write_trajectory(out / "traj_gt.msv1", frames, frame_indices, cfg.fps)
    formats.write_json(out / "cameras.json", [c.to_dict() for c in cams])
    scene_doc = {
        "config": cfg.to_dict(),
        "world_unit": "meter",
        "grid": {
            "res": cfg.grid_res,
            "dx": world.grids[0].dx,
            "origin": world.grids[0].origin.tolist(),
        },
        "floor": {"height": 0.0, "friction": cfg.floor_friction, "mode": cfg.floor_mode},
        "vol0": [float(ps.vol0[0]) for ps in world.particles],
        "particle_counts": [ps.n for ps in world.particles],
        "object_ranges": [o.all_ranges() for o in cfg.objects],
        "families": [o.family for o in cfg.objects],
        "observable_horizon": cfg.observable_horizon,
        "splat_radius": cfg.splat_radius,
    }
    formats.write_json(out / "scene.json", scene_doc)
    truth = {
        "params": [
            {
                "family": p.family.value, "E": p.E, "nu": p.nu, "tau_y": p.tau_y,
                "mu_visc": p.mu_visc, "kappa": p.kappa, "theta_fric": p.theta_fric,
                "rho": p.rho, "mu_contact": p.mu_contact,
            }
            for p in params
        ],
        "v0": [v.tolist() for v in v0],
        "kinematics": meta,
    }
    formats.write_json(out / "truth.json", truth)
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _params_from_dicts(dicts):
    return [
        MaterialParams(
            family=MaterialFamily(p["family"]), E=p["E"], nu=p["nu"], tau_y=p["tau_y"],
            mu_visc=p["mu_visc"], kappa=p["kappa"], theta_fric=p["theta_fric"],
            rho=p["rho"], mu_contact=p["mu_contact"],
        )
        for p in dicts
    ]


def load_cameras(scene_dir):
    return [observe.Camera.from_dict(d) for d in formats.read_json(Path(scene_dir) / "cameras.json")]


def load_observations(scene_dir, frames=None, with_masks=True):
    """ObservationSet from a scene directory (all frames by default)."""
    scene_dir = Path(scene_dir)
    doc = formats.read_json(scene_dir / "scene.json")
    cams = load_cameras(scene_dir)
    kn = len(doc["families"])
    total = doc["config"]["frames"]
    if frames is None:
        frames = list(range(total))
    surfaces = []
    masks = [] if with_masks else None
    for f in frames:
        surfaces.append(
            [formats.read_points(scene_dir / "obs" / f"surf_f{f:03d}_o{k}.pts") for k in range(kn)]
        )
        if with_masks:
            masks.append(
                [
                    [
                        formats.read_pgm(scene_dir / "obs" / f"mask_f{f:03d}_v{j:02d}_o{k}.pgm")
                        for k in range(kn)
                    ]
                    for j in range(len(cams))
                ]
            )
    return losses.ObservationSet(
        list(frames), surfaces, masks, cams,
        splat_radius=doc["splat_radius"], frame_rate=doc["config"]["fps"],
    )


def load_scene_config(scene_dir):
    return formats.read_json(Path(scene_dir) / "scene.json")


def _sim_config_from_doc(doc):
    cfg = doc["config"]
    return mpm.SimConfig(
        dt=1.0 / (cfg["fps"] * cfg["substeps"]), gravity=GRAVITY,
        floor_height=doc["floor"]["height"], floor_friction=doc["floor"]["friction"],
        floor_mode=doc["floor"]["mode"], substeps_per_frame=cfg["substeps"],
        frame_rate=cfg["fps"],
    )


def gt_world(scene_dir, params=None, v0=None):
    """Ground-truth initial world rebuilt from the scene files."""
    scene_dir = Path(scene_dir)
    doc = formats.read_json(scene_dir / "scene.json")
    truth = formats.read_json(scene_dir / "truth.json")
    frames, _idx, _fps = formats.read_trajectory(scene_dir / "traj_gt.msv1")
    params = params if params is not None else _params_from_dicts(truth["params"])
    v0 = v0 if v0 is not None else [np.array(v) for v in truth["v0"]]
    particles = []
    for k, x0 in enumerate(frames[0]):
        vol0 = doc["vol0"][k]
        particles.append(
            mpm.ParticleSet.from_rest(x0, mass=params[k].rho * vol0, vol0=vol0,
                                      object_id=k, v=v0[k])
        )
    grids = [
        mpm.ObjectGrid((doc["grid"]["res"],) * 3, doc["grid"]["dx"], doc["grid"]["origin"])
        for _ in particles
    ]
    return mpm.WorldState(particles, grids, params, _sim_config_from_doc(doc))


def fit_world(scene_dir, obs, fit_particles=4000, seed=0):
    """World lifted from frame-0 observations with mid-range initial params."""
    scene_dir = Path(scene_dir)
    doc = formats.read_json(scene_dir / "scene.json")
    cfg = SceneConfig.from_dict(doc["config"])
    params0 = [midrange_params(spec) for spec in cfg.objects]
    lift_cfg = lifting.LiftConfig(
        target_particle_count=fit_particles, erode_px=doc["splat_radius"]
    )
    particles, _grids = lifting.lift_objects(obs, params0, lift_cfg, seed=seed)
    grids = [
        mpm.ObjectGrid((doc["grid"]["res"],) * 3, doc["grid"]["dx"], doc["grid"]["origin"])
        for _ in particles
    ]
    return mpm.WorldState(particles, grids, params0, _sim_config_from_doc(doc))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    frame_indices: list
    per_object_cd: np.ndarray  # (frames, K) in 10^3 mm^2
    per_object_emd: np.ndarray  # (frames, K) in meters
    scene_cd: np.ndarray  # (frames,)
    scene_emd: np.ndarray
    horizon: int

    def _split(self, arr, future):
        idx = [i for i, f in enumerate(self.frame_indices)
               if (f >= self.horizon) == future]
        if not idx:
            return None
        return arr[idx].mean(axis=0)

    def summary(self):
        out = {"horizon": self.horizon}
        for name, future in (("observable", False), ("future", True)):
            po_cd = self._split(self.per_object_cd, future)
            po_emd = self._split(self.per_object_emd, future)
            sc_cd = self._split(self.scene_cd, future)
            sc_emd = self._split(self.scene_emd, future)
            out[name] = (
                None
                if po_cd is None
                else {
                    "cd_per_object": po_cd.tolist(),
                    "emd_per_object": po_emd.tolist(),
                    "cd_mean": float(po_cd.mean()),
                    "emd_mean": float(po_emd.mean()),
                    "cd_scene": float(sc_cd),
                    "emd_scene": float(sc_emd),
                }
            )
        return out

    def to_dict(self):
        return {
            "frame_indices": list(map(int, self.frame_indices)),
            "per_object_cd": self.per_object_cd.tolist(),
            "per_object_emd": self.per_object_emd.tolist(),
            "scene_cd": self.scene_cd.tolist(),
            "scene_emd": self.scene_emd.tolist(),
            "summary": self.summary(),
        }

    def to_csv(self):
        lines = ["frame,object,split,cd_k_mm2,emd_m"]
        for i, f in enumerate(self.frame_indices):
            split = "future" if f >= self.horizon else "observable"
            for k in range(self.per_object_cd.shape[1]):
                lines.append(
                    f"{f},{k},{split},{self.per_object_cd[i, k]!r},{self.per_object_emd[i, k]!r}"
                )
            lines.append(f"{f},scene,{split},{self.scene_cd[i]!r},{self.scene_emd[i]!r}")
        return "\n".join(lines) + "\n"


def evaluate(pred_frames, gt_frames, frame_indices, horizon, emd_sub=512, emd_seed=0):
    """Per-frame, per-object chamfer and EMD plus scene-wise values."""
    if len(pred_frames) != len(gt_frames):
        raise ShapeMismatch(
            f"frame counts differ: {len(pred_frames)} vs {len(gt_frames)}"
        )
    kn = len(gt_frames[0])
    nf = len(gt_frames)
    po_cd = np.zeros((nf, kn))
    po_emd = np.zeros((nf, kn))
    sc_cd = np.zeros(nf)
    sc_emd = np.zeros(nf)
    for i in range(nf):
        if len(pred_frames[i]) != kn:
            raise ShapeMismatch(f"object count differs at frame {frame_indices[i]}")
        for k in range(kn):
            po_cd[i, k] = observe.chamfer(pred_frames[i][k], gt_frames[i][k])
            po_emd[i, k] = observe.emd(pred_frames[i][k], gt_frames[i][k],
                                       n_sub=emd_sub, seed=emd_seed)
        pu = np.concatenate(pred_frames[i])
        gu = np.concatenate(gt_frames[i])
        sc_cd[i] = observe.chamfer(pu, gu)
        sc_emd[i] = observe.emd(pu, gu, n_sub=emd_sub, seed=emd_seed)
    return EvalReport(list(frame_indices), po_cd, po_emd, sc_cd, sc_emd, horizon)
