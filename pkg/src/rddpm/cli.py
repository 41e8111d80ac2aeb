"""Command-line entry point: ``rddpm train|generate|forward|nll|stats``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O error.
"""

import argparse
import importlib
import math
import os
import sys

import numpy as np

from .chain import AbortTooManyFailures, DriftSpec, NoiseSchedule, ZERO_DRIFT, simulate_forward, simulate_reverse
from .chain import write_trajectory_csv
from .config import ConfigError, dump_config, load_config
from .datasets import (
    Dataset,
    chain_prior,
    default_toy_reference,
    dihedral_toy,
    load_latlon_csv,
    load_points_csv,
    load_reference_csv,
    random_split,
    refine_dataset,
    save_points_csv,
    split_with_isolated_reassignment,
    uniform_prior,
    uniform_sphere,
    vmf_mixture_sphere,
    wrapped_normal_so,
    haar_orthogonal,
)
from .equivariance import EquivariantScore
from .evaluation import (
    AllPathsFailed,
    dihedral_and_rmsd_stats,
    failure_report,
    nll,
    trace_moments,
    write_failures_csv,
    write_histogram_csv,
    write_nll_csv,
)
from .geometry import dihedral, special_orthogonal, sphere
from .model import ScoreNet, load_checkpoint
from .rngs import role_rng
from .solver import NewtonConfig, NoConvergenceError, refine_to_manifold
from .trainer import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# Builders from a resolved config
# ---------------------------------------------------------------------------


def build_manifold(cfg):
    kind = cfg["manifold"]
    if kind == "sphere":
        return sphere(cfg["sphere"]["n"])
    if kind == "so":
        return special_orthogonal(cfg["so"]["k"])
    if kind == "dihedral":
        d = cfg["dihedral"]
        return dihedral(d["atoms"], d["indices"], math.radians(d["phi0_deg"]))
    mod, _, fn = cfg["generic"]["factory"].partition(":")
    return getattr(importlib.import_module(mod), fn)()


def build_schedule(cfg):
    s = cfg["schedule"]
    return NoiseSchedule(s["T"], s["N"], s["gamma_min"], s["gamma_max"])


def build_newton(cfg):
    return NewtonConfig(cfg["newton"]["tol"], cfg["newton"]["max_steps"])


def _path(cfg, p):
    return p if os.path.isabs(p) or os.path.exists(p) else os.path.join(cfg.get("_base_dir", "."), p)


def build_reference(cfg, m):
    """Reference cloud for drift and equivariant wrapping (dihedral manifold only)."""
    if m.kind != "dihedral":
        return None
    ref_file = cfg["drift"]["reference_file"]
    ref = load_reference_csv(_path(cfg, ref_file)) if ref_file else default_toy_reference(m.n // 3)
    if ref.size != m.n:
        raise ConfigError("reference cloud size does not match dihedral.atoms")
    return refine_to_manifold(m, ref, target_tol=1e-10)


def build_drift(cfg, m):
    if cfg["drift"]["kind"] == "zero":
        return ZERO_DRIFT
    return DriftSpec("rmsd_harmonic", cfg["drift"]["kappa"], build_reference(cfg, m))


def build_dataset(cfg, m) -> Dataset:
    """Generate or load the dataset and attach split labels."""
    d = cfg["dataset"]
    seed = cfg["run"]["seed"]
    rng = role_rng(seed, "dataset")
    src = d["source"]
    if src == "uniform":
        if m.kind == "sphere":
            pts = uniform_sphere(m.n, rng, d["count"]).reshape(-1, m.n)
        elif m.kind == "so":
            k = m.params["k"]
            pts = haar_orthogonal(k, rng, d["count"]).reshape(-1, k * k)
        else:
            raise ConfigError("dataset.source = uniform needs a sphere or so manifold")
        ds = Dataset(pts, m, None, "uniform")
    elif src == "vmf":
        centers = np.array(d["centers"], dtype=float)
        if centers.ndim != 2 or centers.shape[1] != m.n:
            raise ConfigError(f"dataset.centers must be a list of {m.n}-vectors")
        centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
        weights = np.array(d["weights"], dtype=float) if d["weights"] else None
        ds = vmf_mixture_sphere(m.n, centers, d["kappa"], weights, d["count"], rng)
    elif src == "so_mixture":
        ds = wrapped_normal_so(m.params["k"], d["modes"], d["y_std"], d["count"], rng, d["reuse_patterns"])
    elif src == "dihedral_toy":
        ds = dihedral_toy(m, d["count"], d["noise"], rng, build_reference(cfg, m), cfg["refine"]["target_tol"])
    elif src == "csv":
        ds = refine_dataset(load_latlon_csv(_path(cfg, d["path"])), cfg["refine"]["target_tol"])
        ds.manifold = m
    else:
        pts, labels = load_points_csv(_path(cfg, d["path"]))
        if pts.shape[1] != m.n:
            raise ConfigError(f"{d['path']}: points have {pts.shape[1]} columns, expected {m.n}")
        ds = refine_dataset(Dataset(pts, m, labels, f"points csv {d['path']}"), cfg["refine"]["target_tol"])
        if labels is not None:
            return ds
    fr = tuple(d["fractions"])
    if m.kind == "sphere" and m.n == 3:
        out, moved = split_with_isolated_reassignment(ds, d["split_seed"], tuple(d["bins"]), fr, d["isolated"])
        out.reassigned = moved
    else:
        out = random_split(ds, d["split_seed"], fr)
        out.reassigned = 0
    for attr in ("logpdf", "centers", "reference"):
        if hasattr(ds, attr):
            setattr(out, attr, getattr(ds, attr))
    return out


def build_prior(cfg, m, ds=None):
    if cfg["prior"]["kind"] == "uniform":
        return uniform_prior(m)
    start = ds.split("train") if ds is not None else build_reference(cfg, m)[None]
    return chain_prior(m, start, build_schedule(cfg), build_drift(cfg, m), cfg["prior"]["burn_steps"],
                       build_newton(cfg))


def build_model(cfg, m, net=None):
    if net is None:
        net = ScoreNet(m.n, cfg["model"]["hidden"], role_rng(cfg["run"]["seed"], "model.init"),
                       cfg["model"]["ema_decay"])
    if cfg["model"]["equivariant"]:
        ref = build_reference(cfg, m)
        if ref is None:
            raise ConfigError("model.equivariant needs manifold = dihedral")
        return EquivariantScore(net, ref)
    return net


def build_train_config(cfg):
    t = cfg["train"]
    return TrainConfig(
        batch_size=t["batch_size"], epochs=t["epochs"], refresh_every=t["refresh_every"],
        schedule=build_schedule(cfg), newton=build_newton(cfg), seed=cfg["run"]["seed"],
        nll_paths_per_point=cfg["nll"]["paths"], val_paths_per_point=t["val_paths"],
        val_every=t["val_every"] or None, lr=t["lr"], clip_norm=t["clip_norm"],
        ema_decay=cfg["model"]["ema_decay"], max_attempts=t["max_attempts"], wall_clock=cfg["run"]["wall_clock"],
    )


def load_model(cfg, m, ckpt_path):
    net, _, meta = load_checkpoint(ckpt_path)
    if net.n != m.n:
        raise ConfigError(f"checkpoint dimension {net.n} does not match the manifold ({m.n})")
    return build_model(cfg, m, net)


def score_fn_for(model, schedule, use_ema=True):
    return lambda x, t: model.forward(x, np.asarray(t) / schedule.T, use_ema)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _prepare(args, command):
    overrides = {"run": {"command": command}}
    if getattr(args, "seed", None) is not None:
        overrides["run"]["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["run"]["out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    out_dir = cfg["run"]["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
        fh.write(dump_config(cfg))
    return cfg, out_dir


def _say(args, msg):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


def cmd_train(args) -> int:
    cfg, out_dir = _prepare(args, "train")
    m = build_manifold(cfg)
    ds = build_dataset(cfg, m)
    save_points_csv(os.path.join(out_dir, "dataset.csv"), ds.points, ds.split_labels)
    prior = build_prior(cfg, m, ds)
    model = build_model(cfg, m)
    tc = build_train_config(cfg)
    if args.epochs is not None:
        tc.epochs = args.epochs
    res = train(model, m, ds.split("train"), tc, build_drift(cfg, m), ds.split("val"), prior.logpdf, out_dir,
                log=(lambda s: _say(args, s)) if args.verbose else None)
    write_failures_csv(os.path.join(out_dir, "failures.csv"),
                       failure_report((res.buffer.failures, res.buffer.attempts)))
    _say(args, f"trained {tc.epochs} epochs; checkpoints in {out_dir}")
    return EXIT_OK


def _ckpt(cfg, args, section, out_dir):
    path = getattr(args, "ckpt", None) or cfg[section]["ckpt"] or os.path.join(out_dir, "ckpt_best.txt")
    return _path(cfg, path)


def cmd_generate(args) -> int:
    cfg, out_dir = _prepare(args, "generate")
    m = build_manifold(cfg)
    schedule = build_schedule(cfg)
    count = cfg["generate"]["count"] if args.count is None else args.count
    steps = cfg["generate"]["steps"] if args.steps is None else [int(s) for s in args.steps.split(",") if s]
    if any(k < 0 or k > schedule.N for k in steps):
        raise ConfigError("requested steps outside 0..N")
    if 0 not in steps:
        steps = [0] + steps
    header_n = m.n
    if count < 0:
        raise ConfigError("--count must be nonnegative")
    if count == 0:
        save_points_csv(os.path.join(out_dir, "samples.csv"), np.empty((0, header_n)))
        return EXIT_OK
    model = load_model(cfg, m, _ckpt(cfg, args, "generate", out_dir))
    ds = build_dataset(cfg, m) if cfg["prior"]["kind"] == "forward_chain" else None
    prior = build_prior(cfg, m, ds)
    rng = role_rng(cfg["run"]["seed"], "generate")
    xN = prior.sample(count, rng)
    tb = simulate_reverse(m, xN, schedule, score_fn_for(model, schedule), build_drift(cfg, m), rng,
                          build_newton(cfg), record_steps=steps)
    for i, k in enumerate(steps):
        name = "samples.csv" if k == 0 else f"samples_step{k}.csv"
        save_points_csv(os.path.join(out_dir, name), tb.points[:, i])
    write_failures_csv(os.path.join(out_dir, "failures.csv"), failure_report(reverse=tb))
    _say(args, f"wrote {count} samples to {out_dir}")
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg, out_dir = _prepare(args, "forward")
    m = build_manifold(cfg)
    ds = build_dataset(cfg, m)
    pts = ds.split("train")
    count = min(args.count, len(pts))
    rng = role_rng(cfg["run"]["seed"], "forward")
    tb = simulate_forward(m, pts[:count], build_schedule(cfg), build_drift(cfg, m), rng, build_newton(cfg))
    traj_dir = os.path.join(out_dir, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    for i in range(count):
        write_trajectory_csv(os.path.join(traj_dir, f"traj_{i:05d}.csv"), tb.points[i])
    write_failures_csv(os.path.join(out_dir, "failures.csv"), failure_report(forward=tb))
    _say(args, f"wrote {count} trajectories to {traj_dir}")
    return EXIT_OK


def cmd_nll(args) -> int:
    cfg, out_dir = _prepare(args, "nll")
    m = build_manifold(cfg)
    ds = build_dataset(cfg, m)
    split = args.split or cfg["nll"]["split"]
    pts = ds.points if split == "all" else ds.split(split)
    prior = build_prior(cfg, m, ds)
    if prior.logpdf is None:
        raise ConfigError("the configured prior has no density; NLL is unavailable")
    schedule = build_schedule(cfg)
    if schedule.N == 0:
        model = build_model(cfg, m)
    else:
        model = load_model(cfg, m, _ckpt(cfg, args, "nll", out_dir))
    paths = args.paths or cfg["nll"]["paths"]
    est = nll(m, model, pts, schedule, build_drift(cfg, m), prior.logpdf, paths,
              role_rng(cfg["run"]["seed"], "nll"), build_newton(cfg))
    write_nll_csv(os.path.join(out_dir, "nll.csv"), est)
    print(f"mean_nll {est.mean_nll:.6f} se {est.standard_error:.6f} points {len(pts)} "
          f"missing {est.missing_points} failed_paths {est.failed_paths}")
    return EXIT_OK


def cmd_stats(args) -> int:
    out_dir = args.out or os.path.dirname(os.path.abspath(args.samples))
    os.makedirs(out_dir, exist_ok=True)
    pts, _ = load_points_csv(args.samples)
    if args.kind == "so_trace":
        k = int(round(math.sqrt(pts.shape[1])))
        if k * k != pts.shape[1]:
            raise ConfigError("so_trace needs k*k columns")
        hists = {f"tr_S{p}": h for p, h in
                 trace_moments(pts.reshape(-1, k, k), [int(p) for p in args.powers.split(",")], args.bins).items()}
    elif args.kind == "dihedral":
        if not args.config:
            raise ConfigError("dihedral stats need --config for atom indices and the reference")
        cfg = load_config(args.config)
        m = build_manifold(cfg)
        angles = {"phi": cfg["dihedral"]["indices"]}
        if args.psi:
            angles["psi"] = [int(i) for i in args.psi.split(",")]
        hists = dihedral_and_rmsd_stats(pts, {"ref": build_reference(cfg, m)}, angles, args.bins)
    else:
        from .datasets import xyz_to_latlon
        from .evaluation import histogram
        lat, lon = xyz_to_latlon(pts)
        hists = {"lat": histogram(lat, "lat", args.bins), "lon": histogram(lon, "lon", args.bins)}
    for name, h in hists.items():
        write_histogram_csv(os.path.join(out_dir, f"hist_{name}.csv"), h)
    _say(args, f"wrote {len(hists)} histograms to {out_dir}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="rddpm", description="Diffusion models on level-set manifolds.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML file or preset name")
        sp.add_argument("--out", help="output directory (overrides run.out_dir)")
        sp.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("train", help="train a score network")
    common(sp)
    sp.add_argument("--epochs", type=int, help="override train.epochs")
    sp.add_argument("--verbose", action="store_true", help="log every epoch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample from a trained model")
    common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--steps", help="comma-separated step indices k to record")
    sp.add_argument("--ckpt")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("forward", help="dump forward trajectories")
    common(sp)
    sp.add_argument("--count", type=int, default=10)
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("nll", help="estimate negative log-likelihoods")
    common(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--split", choices=["train", "val", "test", "all"])
    sp.add_argument("--paths", type=int)
    sp.set_defaults(func=cmd_nll)

    sp = sub.add_parser("stats", help="histograms of sample statistics")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--kind", required=True, choices=["so_trace", "dihedral", "sphere_latlon"])
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.add_argument("--bins", type=int, default=100)
    sp.add_argument("--powers", default="1,2,4,5")
    sp.add_argument("--psi", help="four comma-separated atom indices of a second dihedral")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AbortTooManyFailures, NoConvergenceError, AllPathsFailed, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
