"""Configuration-driven experiment runner.

Subcommands: solve (build and serialise the extinction profile), sample
(forward / conditioned / decomposition trajectories to CSV), verify
(statistical reports), plot (static SVG from existing outputs).  Every
run writes a manifest from which it can be re-run bit-exactly; outputs
are pure functions of (config, master seed) and do not depend on the
worker count.

Exit codes: 0 ok, 1 verification failure, 2 configuration error,
3 sampler infeasibility.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import List, Optional

import numpy as np

from . import rngstreams
from .config import (
    ConfigError,
    ExperimentConfig,
    build_manifest,
    canonical_text,
    config_from_values,
    load_config,
    manifest_json,
)
from .extinction import profile_to_text
from .measures import summary_json, trajectories_to_csv_rows
from .sampler import (
    InfeasibleError,
    ParticleControls,
    sample_conditioned_direct,
    sample_superprocess,
)
from .verify import (
    VerificationReport,
    conditioned_equivalence_battery,
    verify_flow_identity,
    verify_laplace_identity,
    verify_martingale_means,
    verify_mixture,
    verify_near_extinction_trend,
    verify_w_feynman_kac,
    verify_z_law,
)
from .williams import events_to_csv_rows, sample_williams

EXIT_OK = 0
EXIT_TEST_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


class _RunDir:
    """Tracks written files so an aborted run leaves no partial output."""

    def __init__(self, path: str):
        self.path = path
        self.written: List[str] = []
        os.makedirs(path, exist_ok=True)

    def write(self, name: str, text: str) -> str:
        full = os.path.join(self.path, name)
        with open(full, "w") as fh:
            fh.write(text)
        self.written.append(full)
        return full

    def cleanup(self):
        for f in self.written:
            try:
                os.unlink(f)
            except OSError:
                pass


# ---------------------------------------------------------------------------
# replica work (module level so worker processes can import it)

_WORKER = {}


def _worker_init(values_json: str):
    cfg = config_from_values(json.loads(values_json))
    _WORKER["cfg"] = cfg
    _WORKER["profile"] = cfg.build_profile()


def _sample_one(task):
    kind, replica, values_json = task
    if "cfg" not in _WORKER:
        _worker_init(values_json)
    cfg: ExperimentConfig = _WORKER["cfg"]
    profile = _WORKER["profile"]
    seed = cfg.master_seed
    rng = rngstreams.stream(seed, rngstreams.TRAJECTORY, replica)
    ctrl = ParticleControls(kappa=0.05, max_atoms=cfg.mc("attempt_budget"))
    h = cfg.h
    if kind == "forward":
        rec = sample_superprocess(cfg.mech, cfg.motion, cfg.mu, cfg.grid, ctrl, rng,
                                  n_steps=int(round(min(cfg.grid.t_max, 4.0) / cfg.grid.dt)))
        return rec, None, {"kind": kind}
    if kind == "conditioned":
        rec, attempts = sample_conditioned_direct(
            cfg.mech, cfg.motion, cfg.mu, h, cfg.eps, cfg.grid, ctrl, rng,
            max_attempts=cfg.mc("attempt_budget"),
        )
        return rec, None, {"kind": kind, "attempts": attempts}
    if kind == "williams":
        ws = sample_williams(
            cfg.mech, cfg.motion, profile, cfg.mu, h, cfg.delta, cfg.eps_n, cfg.grid,
            ctrl, rng, n_spine_particles=cfg.mc("spine_particles"),
            max_attempts=cfg.mc("attempt_budget"),
        )
        return ws.assembled, ws, {"kind": kind, "n_events": len(ws.events)}
    raise ConfigError(f"unknown sample kind {kind!r}")


def _parallel_map(tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [_sample_one(t) for t in tasks]
    try:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(processes=workers, initializer=_worker_init, initargs=(tasks[0][2],)) as pool:
            return pool.map(_sample_one, tasks, chunksize=max(1, len(tasks) // (4 * workers)))
    except (OSError, ValueError):
        return [_sample_one(t) for t in tasks]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_solve(cfg: ExperimentConfig, rundir: _RunDir, args: dict) -> int:
    profile = cfg.build_profile()
    rundir.write("profile.txt", profile_to_text(profile))
    rundir.write("manifest.json", manifest_json(build_manifest(cfg, "solve", args)))
    return EXIT_OK


def _cmd_sample(cfg: ExperimentConfig, rundir: _RunDir, args: dict) -> int:
    kind = args["kind"]
    n = int(args["n"])
    values_json = json.dumps(cfg.values, sort_keys=True)
    results = _parallel_map([(kind, i, values_json) for i in range(n)], int(args["workers"]))
    records = [r[0] for r in results]
    rundir.write("trajectories.csv", "\n".join(trajectories_to_csv_rows(records)) + "\n")
    extra = {"kind": kind}
    if kind == "conditioned":
        extra["attempts"] = [meta["attempts"] for _, _, meta in results]
        extra["acceptance_rate"] = float(n / max(sum(extra["attempts"]), 1))
    if kind == "williams":
        samples = [ws for _, ws, _ in results]
        rundir.write("events.csv", "\n".join(events_to_csv_rows(samples)) + "\n")
        extra["n_events"] = [meta["n_events"] for _, _, meta in results]
    rundir.write("summary.json", summary_json(records, extra) + "\n")
    rundir.write("manifest.json", manifest_json(build_manifest(cfg, "sample", args)))
    return EXIT_OK


def _run_one_test(name: str, cfg: ExperimentConfig, profile, seed: int) -> VerificationReport:
    common = dict(model=cfg.model_name, seed=seed)
    homog = profile.is_homogeneous
    if name == "flow_identity":
        return verify_flow_identity(cfg.mech, cfg.motion, profile, cfg.grid, **common)
    if name == "w_feynman_kac":
        return verify_w_feynman_kac(cfg.mech, cfg.motion, profile, cfg.grid,
                                    n=cfg.mc("laplace_n"), **common)
    if name == "martingale_means":
        return verify_martingale_means(cfg.mech, cfg.motion, profile, cfg.grid, cfg.mu,
                                       h=cfg.h, n=cfg.mc("n_paths"), **common)
    if name == "laplace_identity":
        n = cfg.mc("laplace_n") if homog else min(2000, cfg.mc("laplace_n"))
        return verify_laplace_identity(cfg.mech, cfg.motion, profile, cfg.grid, cfg.mu,
                                       t=0.5, n=n, **common)
    if name == "conditioned_equivalence":
        if not homog:
            raise ConfigError("conditioned_equivalence requires a spatially constant mechanism")
        return conditioned_equivalence_battery(
            cfg.mech, cfg.motion, profile, cfg.grid, cfg.mu, h=cfg.h, eps=cfg.eps,
            delta=cfg.delta, n=cfg.mc("n_verify"), seeds=(seed, seed + 1, seed + 2),
            model=cfg.model_name,
        )
    if name == "mixture":
        if not homog:
            raise ConfigError("mixture requires a spatially constant mechanism")
        return verify_mixture(cfg.mech, cfg.motion, profile, cfg.grid, cfg.mu,
                              delta=max(cfg.delta, 0.02), n=cfg.mc("n_verify"), **common)
    if name == "near_extinction_trend":
        if homog:
            raise ConfigError("near_extinction_trend requires a spatial mechanism")
        return verify_near_extinction_trend(cfg.mech, cfg.motion, profile, cfg.grid, cfg.mu,
                                            n_rep=cfg.mc("n_replicas"), **common)
    if name == "z_law":
        if not homog:
            raise ConfigError("z_law requires a spatially constant mechanism")
        return verify_z_law(cfg.mech, cfg.motion, profile, cfg.grid, cfg.mu,
                            n_rep=max(cfg.mc("n_replicas"), 300), **common)
    raise ConfigError(f"unknown test {name!r}")


def _cmd_verify(cfg: ExperimentConfig, rundir: _RunDir, args: dict) -> int:
    tests = [t.strip() for t in args["tests"].split(",") if t.strip()] if args.get("tests") else cfg.tests
    profile = cfg.build_profile()
    seed = cfg.master_seed
    reports = []
    for name in tests:
        report = _run_one_test(name, cfg, profile, seed)
        reports.append(report)
        print(report.format_line())
    rundir.write("reports.json", json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1) + "\n")
    rundir.write("report_table.txt", "\n".join(r.format_line() for r in reports) + "\n")
    rundir.write("manifest.json", manifest_json(build_manifest(cfg, "verify", args)))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_TEST_FAILURE


def _cmd_plot(directory: str, rundir: _RunDir) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made_any = False
    summary_path = os.path.join(directory, "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)
        ext = [e for e in summary.get("extinction_times", []) if e is not None]
        if ext:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            xs = np.sort(ext)
            ax.step(xs, np.arange(1, len(xs) + 1) / len(xs), where="post")
            ax.set_xlabel("extinction time")
            ax.set_ylabel("empirical CDF")
            fig.tight_layout()
            fig.savefig(os.path.join(rundir.path, "extinction_cdf.svg"))
            plt.close(fig)
            rundir.written.append(os.path.join(rundir.path, "extinction_cdf.svg"))
            made_any = True
    traj_path = os.path.join(directory, "trajectories.csv")
    if os.path.exists(traj_path):
        mass = {}
        with open(traj_path) as fh:
            header = fh.readline().strip().split(",")
            ti, mi = header.index("t"), header.index("mass")
            for line in fh:
                parts = line.strip().split(",")
                if len(parts) < len(header):
                    continue
                rid = int(parts[0])
                key = (rid, float(parts[ti]))
                mass[key] = mass.get(key, 0.0) + float(parts[mi])
        rids = sorted({rid for rid, _ in mass})[:30]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for rid in rids:
            pts = sorted((t, m) for (r, t), m in mass.items() if r == rid)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=0.7, alpha=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("total mass")
        fig.tight_layout()
        fig.savefig(os.path.join(rundir.path, "total_mass.svg"))
        plt.close(fig)
        rundir.written.append(os.path.join(rundir.path, "total_mass.svg"))
        made_any = True
    if not made_any:
        print("plot: nothing to plot in", directory, file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def _parse_overrides(pairs: Optional[List[str]]) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--override expects key=value, got {pair!r}")
        key, _, val = pair.partition("=")
        out[key.strip()] = val.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="willdec", description=__doc__)
    parser.add_argument("--from-manifest", help="re-run a previous run bit-exactly")
    sub = parser.add_subparsers(dest="subcommand")

    def common(p):
        p.add_argument("--config", required=False)
        p.add_argument("--out", help="output directory (overrides config / env)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--override", action="append", metavar="KEY=VALUE")
        p.add_argument("--workers", type=int, default=0, help="0 = available parallelism")

    p_solve = sub.add_parser("solve", help="build and serialise the extinction profile")
    common(p_solve)
    p_sample = sub.add_parser("sample", help="sample trajectories to CSV")
    common(p_sample)
    p_sample.add_argument("--kind", choices=("forward", "conditioned", "williams"), default="forward")
    p_sample.add_argument("--n", type=int, default=0, help="replicas (default mc.n_replicas)")
    p_sample.add_argument("--h", type=float, help="conditioning time override")
    p_verify = sub.add_parser("verify", help="run verification reports")
    common(p_verify)
    p_verify.add_argument("--tests", help="comma list (default run.tests)")
    p_plot = sub.add_parser("plot", help="static SVG plots from existing outputs")
    p_plot.add_argument("--dir", required=True)
    p_plot.add_argument("--out")
    return parser


def _load_from_manifest(path: str):
    with open(path) as fh:
        manifest = json.load(fh)
    cfg = config_from_values(manifest["config"])
    return cfg, manifest["subcommand"], manifest.get("args", {})


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.from_manifest:
            cfg, subcommand, args = _load_from_manifest(ns.from_manifest)
        elif ns.subcommand == "plot":
            rundir = _RunDir(ns.out or ns.dir)
            return _cmd_plot(ns.dir, rundir)
        else:
            if ns.subcommand is None:
                parser.print_help()
                return EXIT_CONFIG
            if not ns.config:
                raise ConfigError("--config is required")
            overrides = _parse_overrides(ns.override)
            if ns.seed is not None:
                overrides["run.master_seed"] = str(ns.seed)
            if getattr(ns, "h", None) is not None:
                overrides["conditioning.h"] = repr(ns.h)
            cfg = load_config(ns.config, overrides)
            subcommand = ns.subcommand
            args = {"workers": ns.workers or (os.cpu_count() or 1)}
            if subcommand == "sample":
                args["kind"] = ns.kind
                args["n"] = ns.n or cfg.mc("n_replicas")
            if subcommand == "verify" and ns.tests:
                args["tests"] = ns.tests
        out_dir = getattr(ns, "out", None) or cfg.output_dir
        rundir = _RunDir(out_dir)
        try:
            if subcommand == "solve":
                return _cmd_solve(cfg, rundir, args)
            if subcommand == "sample":
                return _cmd_sample(cfg, rundir, args)
            if subcommand == "verify":
                return _cmd_verify(cfg, rundir, args)
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        except Exception:
            rundir.cleanup()
            raise
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"sampler infeasibility: {exc} (acceptance ~ {exc.acceptance_rate:.3g})", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
