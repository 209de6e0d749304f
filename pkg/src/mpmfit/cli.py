"""Command-line interface.

Subcommands: gen, sim, fit, eval, swap, gradcheck.  Exit codes: 0 success,
1 validation/usage error, 2 diverged computation.  MOSIV_THREADS caps the
worker count (default 1, which is the bitwise-deterministic reference mode).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, formats, losses, mpm, sensitivity, sysid
from .errors import DivergedOptimization, MpmFitError


def _threads():
    try:
        n = int(os.environ.get("MOSIV_THREADS", "1"))
    except ValueError:
        n = 1
    return max(n, 1)


def _apply_thread_cap():
    n = _threads()
    try:
        import numba

        numba.set_num_threads(max(n, 1))
    except Exception:
        pass
    return n


def _loss_cfg(args):
    return losses.LossConfig(
        granularity="object_wise" if args.loss == "object" else "scene_wise",
        use_cd=args.cd == "on",
        use_alpha=args.alpha == "on",
    )


def cmd_gen(args):
    if args.config:
        cfg = bench.SceneConfig.from_dict(formats.read_json(args.config))
    else:
        cfg = bench.SceneConfig(seed=args.seed)
    if args.seed is not None:
        cfg.seed = args.seed
    bench.gen_scene(cfg, args.out)
    print(f"scene written to {args.out}")
    return 0


def cmd_sim(args):
    doc = formats.read_json(Path(args.params))
    params = v0 = None
    if "params_hat" in doc:
        fit = sysid.FitResult.from_dict(doc)
        params, v0 = fit.params_hat, fit.v0_hat
    elif "params" in doc:
        params = bench._params_from_dicts(doc["params"])
        v0 = [np.array(v) for v in doc["v0"]] if "v0" in doc else None
    world = bench.gt_world(args.scene, params=params, v0=v0)
    traj = mpm.rollout(world, args.frames)
    frames = [[ps.x.copy() for ps in world.particles]] + traj.frames
    indices = [0] + traj.frame_indices
    formats.write_trajectory(args.out, frames, indices, world.config.frame_rate)
    print(f"simulated {args.frames} frames -> {args.out}")
    return 0


def cmd_fit(args):
    doc = bench.load_scene_config(args.scene)
    horizon = doc["observable_horizon"] if args.horizon is None else args.horizon
    obs = bench.load_observations(args.scene, frames=list(range(horizon)),
                                  with_masks=args.alpha == "on")
    world0 = bench.fit_world(args.scene, obs, fit_particles=args.fit_particles,
                             seed=args.seed)
    fit_cfg = sysid.FitConfig(
        velocity_iters=args.velocity_iters, physics_iters=args.physics_iters,
    )
    curriculum = sysid.Curriculum()
    result = sysid.identify(world0, obs, _loss_cfg(args), curriculum, fit_cfg,
                            seed=args.seed)
    result.config["scene_dir"] = str(Path(args.scene).resolve())
    result.config["fit_particles"] = args.fit_particles
    formats.write_json(args.out, result.to_dict())
    print(f"fit written to {args.out}; final loss {result.loss_history[-1]:.6g}")
    return 0


def cmd_eval(args):
    pred, pred_idx, _fps = formats.read_trajectory(args.pred)
    gt, gt_idx, _fps2 = formats.read_trajectory(args.gt)
    n = min(len(pred), len(gt))
    report = bench.evaluate(pred[:n], gt[:n], gt_idx[:n], args.horizon)
    if args.format == "csv":
        out_text = report.to_csv()
    else:
        out_text = formats.dump_json(report.to_dict()) + "\n"
    if args.out:
        Path(args.out).write_text(out_text, encoding="utf-8")
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(out_text)
    return 0


def cmd_swap(args):
    fit = sysid.FitResult.from_dict(formats.read_json(args.fit))
    scene = args.scene or fit.config.get("scene_dir")
    if not scene:
        raise MpmFitError("no scene directory: pass --scene or use a fit file that records one")
    perm = [int(t) for t in args.perm.split(",")]
    world = bench.gt_world(scene, params=fit.params_hat, v0=fit.v0_hat)
    swapped = sysid.swap_materials(world, perm)
    traj = mpm.rollout(swapped, args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = [[ps.x.copy() for ps in swapped.particles]] + traj.frames
    indices = [0] + traj.frame_indices
    formats.write_trajectory(out / "traj_swapped.msv1", frames, indices,
                             swapped.config.frame_rate)
    formats.write_json(out / "swap.json", {"perm": perm, "frames": args.frames})
    print(f"swapped rollout written to {out}")
    return 0


def cmd_gradcheck(args):
    """Finite-difference audit of the scene's active parameter gradients.

    Material (physics-stage) entries are audited through the chamfer
    objective; initial-velocity entries through a smooth centroid loss
    (nearest-neighbor reassignments under a rigidly moving cloud kink the
    chamfer landscape at a scale central differences cannot avoid).
    """
    obs = bench.load_observations(args.scene, frames=[0, 1, 2], with_masks=False)
    world = bench.gt_world(args.scene)
    cfg = losses.LossConfig(use_cd=True, use_alpha=False, extract_surface=False)
    frames = [1, 2]
    h = 1e-3
    worst = 0.0
    rows = []
    v0 = [ps.v[0].copy() for ps in world.particles]

    pv = sensitivity.encode(world.params, v0, sensitivity.STAGE_PHYSICS)
    rep = sensitivity.loss_and_grad(world, obs, cfg, pv, template_v0=v0, frames=frames)
    for j in range(pv.width):
        pvp = pv.copy()
        pvp.values = pv.values.copy()
        pvp.values[j] += h
        pvm = pv.copy()
        pvm.values = pv.values.copy()
        pvm.values[j] -= h
        lp, _ = sensitivity.loss_value(world, obs, cfg, pvp, template_v0=v0, frames=frames)
        lm, _ = sensitivity.loss_value(world, obs, cfg, pvm, template_v0=v0, frames=frames)
        fd = (lp - lm) / (2 * h)
        rel = abs(fd - rep.grad[j]) / max(abs(fd), abs(rep.grad[j]), 1e-12)
        worst = max(worst, rel)
        e = pv.entries[j]
        rows.append(f"physics obj{e.object_id} {e.kind}: fd={fd:.6e} "
                    f"dual={rep.grad[j]:.6e} rel={rel:.2e}")

    targets = {f: [obs.centroid(obs.frame_pos(f), k) for k in range(obs.n_objects)]
               for f in frames}
    pv = sensitivity.encode(world.params, v0, sensitivity.STAGE_VELOCITY)
    _, grad = sensitivity.centroid_loss_and_grad(world, targets, frames, pv,
                                                 template_v0=v0)
    for j in range(pv.width):
        pvp = pv.copy()
        pvp.values = pv.values.copy()
        pvp.values[j] += h
        pvm = pv.copy()
        pvm.values = pv.values.copy()
        pvm.values[j] -= h
        lp = sensitivity.centroid_loss_value(world, targets, frames, pvp, template_v0=v0)
        lm = sensitivity.centroid_loss_value(world, targets, frames, pvm, template_v0=v0)
        fd = (lp - lm) / (2 * h)
        rel = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-12)
        worst = max(worst, rel)
        e = pv.entries[j]
        rows.append(f"velocity obj{e.object_id} {e.kind}: fd={fd:.6e} "
                    f"dual={grad[j]:.6e} rel={rel:.2e}")

    print("\n".join(rows))
    print(f"worst relative error: {worst:.3e}")
    if worst >= 1e-3:
        print("gradient check FAILED", file=sys.stderr)
        return 2
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="mpmfit",
        description="differentiable MPM simulation and material identification",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic benchmark scene")
    g.add_argument("--config", help="scene config JSON (defaults to the built-in two-object scene)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("sim", help="re-simulate a scene under given parameters")
    s.add_argument("--scene", required=True)
    s.add_argument("--params", required=True, help="truth.json or a fit result JSON")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sim)

    f = sub.add_parser("fit", help="identify material parameters from observations")
    f.add_argument("--scene", required=True)
    f.add_argument("--loss", choices=("object", "scene"), default="object")
    f.add_argument("--cd", choices=("on", "off"), default="on")
    f.add_argument("--alpha", choices=("on", "off"), default="on")
    f.add_argument("--out", required=True)
    f.add_argument("--horizon", type=int, default=None,
                   help="supervised frame count (default: scene's observable split)")
    f.add_argument("--velocity-iters", type=int, default=80)
    f.add_argument("--physics-iters", type=int, default=200)
    f.add_argument("--fit-particles", type=int, default=4000)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="compare a trajectory against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--horizon", type=int, required=True)
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("swap", help="permute fitted parameters and re-roll")
    w.add_argument("--fit", required=True)
    w.add_argument("--perm", required=True, help='e.g. "1,0"')
    w.add_argument("--out", required=True)
    w.add_argument("--scene", default=None)
    w.add_argument("--frames", type=int, default=29)
    w.set_defaults(func=cmd_swap)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--scene", required=True)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    _apply_thread_cap()
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except DivergedOptimization as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MpmFitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
