"""``certmpc`` command-line pipeline: gen-data, train, certify, simulate, report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .certify import certify, denser_counts
from .config import VARIANTS, RunConfig, load_config
from .dataset import generate, load, save, seed_grid, uniform_points
from .errors import (BoundInfeasibleError, ConfigError, ControllerError, GenerationError,
                     IntegrationError, TrainingError)
from .mlp import load_params, sample_errors, save_history, save_params, train
from .simulate import (Controller, disturbed_mpc_controller, metrics, mpc_controller,
                       nn_controller, simulate_closed_loop, write_trajectory_csv)

log = logging.getLogger("certmpc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4
CONTROLLERS = ("mpc", "nn", "disturbed-mpc", "all")


class StageMissing(Exception):
    pass


class CertificationInfeasible(Exception):
    pass


def _digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


class Run:
    """Output directory plus its manifest of stage keys, artifacts and wall times."""

    def __init__(self, cfg: RunConfig, out: Path, force: bool = False, workers: int = 1):
        self.cfg = cfg
        self.out = Path(out)
        self.force = force
        self.workers = workers
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = {"stages": {}}
        if self.manifest_path.exists():
            try:
                self.manifest = json.loads(self.manifest_path.read_text())
            except json.JSONDecodeError:
                log.warning("ignoring unreadable manifest %s", self.manifest_path)
        self.manifest["config_hash"] = cfg.hash()
        self.manifest["toolkit_version"] = __version__

    def path(self, name) -> Path:
        return self.out / name

    def cached(self, stage, key) -> bool:
        entry = self.manifest["stages"].get(stage)
        if self.force or not entry or entry.get("key") != key:
            return False
        arts = entry.get("artifacts", {})
        return all(self.path(a).exists() and _digest(self.path(a)) == d for a, d in arts.items())

    def record(self, stage, key, artifacts, wall_time, cache_hit=False):
        entry = self.manifest["stages"].get(stage, {})
        entry.update(key=key, cache_hit=cache_hit,
                     artifacts={a: _digest(self.path(a)) for a in artifacts})
        if not cache_hit:
            entry["wall_time"] = round(wall_time, 3)
        self.manifest["stages"][stage] = entry
        self.manifest["stages"] = dict(sorted(self.manifest["stages"].items()))
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def require(self, *names):
        missing = [_producer(n) for n in names if not self.path(n).exists()]
        if missing:
            raise StageMissing(sorted(set(missing)))


def _producer(artifact: str) -> str:
    if artifact.endswith(".jsonl"):
        return "gen-data"
    if "/" in artifact:
        return f"train --variant {artifact.split('/')[0]}"
    return artifact


# --- stages ------------------------------------------------------------------

def stage_gen_data(run: Run, with_sens: bool = True) -> dict:
    cfg = run.cfg
    key = _key(cfg.section_hash("model", "ocp", "grid", "validation"), cfg.seed, with_sens)
    arts = ["dataset.jsonl", "validation.jsonl"]
    if run.cached("gen-data", key):
        run.record("gen-data", key, arts, 0.0, cache_hit=True)
        print("gen-data: cache hit, dataset unchanged")
        return {"cache_hit": True}
    t0 = time.perf_counter()
    spec, grid = cfg.ocp_spec(), cfg.grid()
    ds = generate(seed_grid(grid), spec, with_sensitivities=with_sens, grid=grid,
                  seed=cfg.stage_seed("data"), workers=run.workers)
    save(ds, run.path("dataset.jsonl"))
    vpts = uniform_points(grid.lower, grid.upper, cfg.validation_size(),
                          cfg.stage_seed("validation"))
    val = generate(vpts, spec, with_sensitivities=False, seed=cfg.stage_seed("validation"),
                   workers=run.workers)
    save(val, run.path("validation.jsonl"))
    run.record("gen-data", key, arts, time.perf_counter() - t0)
    s = ds.summary()
    excluded = s["total"] - s.get("ok", 0)
    print(f"gen-data: {s['total']} grid points, {s.get('ok', 0)} usable, {excluded} excluded "
          f"({', '.join(f'{k}={v}' for k, v in s.items() if k not in ('total', 'ok')) or 'none'})")
    print(f"gen-data: validation set {len(val.labelled())}/{len(val.samples)} labelled")
    return {"cache_hit": False, "summary": s}


def _variant_paths(variant):
    return f"{variant}/params.json", f"{variant}/history.csv", f"{variant}/train_report.json"


def stage_train(run: Run, variant: str) -> dict:
    run.require("dataset.jsonl", "validation.jsonl")
    cfg = run.cfg
    tcfg = cfg.train_config(variant)
    arts = list(_variant_paths(variant))
    key = _key(cfg.section_hash("train"), cfg.seed, variant,
               _digest(run.path("dataset.jsonl"), run.path("validation.jsonl")))
    stage = f"train:{variant}"
    if run.cached(stage, key):
        run.record(stage, key, arts, 0.0, cache_hit=True)
        print(f"train {variant}: cache hit")
        return json.loads(run.path(arts[2]).read_text())
    t0 = time.perf_counter()
    ds = load(run.path("dataset.jsonl"))
    val = load(run.path("validation.jsonl"))
    params, rep = train(ds, tcfg, validation=val)
    run.path(variant).mkdir(exist_ok=True)
    save_params(params, run.path(arts[0]),
                {"variant": variant, "lambdas": list(tcfg.lambdas), "seed": tcfg.seed,
                 "dataset": _digest(run.path("dataset.jsonl"))})
    save_history(rep, run.path(arts[1]))
    doc = {k: v for k, v in rep.to_dict().items() if k != "wall_time"}
    doc.update(variant=variant, lambdas=list(tcfg.lambdas), seed=tcfg.seed)
    _write_json(run.path(arts[2]), doc)
    run.record(stage, key, arts, time.perf_counter() - t0)
    print(f"train {variant}: epsilon_D={rep.epsilon_d:.4f} validation R2={rep.validation_r2:.4f}")
    return doc


def stage_certify(run: Run, variant: str, probe: bool = False) -> dict:
    params_path = _variant_paths(variant)[0]
    run.require("dataset.jsonl", params_path)
    cfg = run.cfg
    opts = cfg.certify_options()
    name = f"certify_{variant}.json"
    stage = f"certify:{variant}"
    key = _key(cfg.section_hash("certify", "ocp", "model", "grid"), cfg.seed, probe,
               _digest(run.path("dataset.jsonl"), run.path(params_path)))
    if run.cached(stage, key):
        run.record(stage, key, [name], 0.0, cache_hit=True)
        doc = json.loads(run.path(name).read_text())
        print(f"certify {variant}: cache hit")
    else:
        t0 = time.perf_counter()
        ds = load(run.path("dataset.jsonl"))
        net = load_params(run.path(params_path))
        grid = ds.grid or cfg.grid()
        rep = certify(net, ds, grid, opts["epsilon"],
                      probe_density=denser_counts(grid, opts["probe_factor"]) if probe else None,
                      spec=cfg.ocp_spec(), workers=run.workers,
                      safety_factor=opts["safety_factor"], nn_samples=opts["nn_samples"],
                      seed=cfg.stage_seed("certify"))
        doc = rep.to_dict()
        doc["summary"] = rep.summary_table()
        _write_json(run.path(name), doc)
        run.record(stage, key, [name], time.perf_counter() - t0)
    print(f"certify {variant}:")
    print(doc["summary"], end="")
    if doc["delta_required"] is None:
        raise CertificationInfeasible(f"{variant}: epsilon_d={doc['epsilon_d']:.6g} >= "
                                      f"epsilon={doc['epsilon']:.6g}")
    return doc


def _controllers(run: Run, which: str, variant: str | None):
    cfg = run.cfg
    sim = cfg.simulate_options()
    out = []
    if which in ("mpc", "all"):
        out.append(("mpc", lambda: mpc_controller(), None))
    if which in ("nn", "all"):
        for v in ([variant] if variant else VARIANTS):
            p = _variant_paths(v)[0]
            out.append((f"nn-{v}", lambda p=p: nn_controller(load_params(run.path(p))), p))
    if which == "disturbed-mpc":
        out.append(("disturbed-mpc", lambda: disturbed_mpc_controller(
            sim["disturbance_epsilon"], cfg.stage_seed("disturbance")), None))
    return out


def stage_simulate(run: Run, which: str = "all", variant: str | None = None) -> dict:
    cfg = run.cfg
    sim = cfg.simulate_options()
    spec = cfg.ocp_spec()
    results = {}
    for name, make, dep in _controllers(run, which, variant):
        if dep:
            run.require(dep)
        stage = f"simulate:{name}"
        arts = [f"sim_{name}.csv", f"sim_{name}.json"]
        key = _key(cfg.section_hash("simulate", "ocp", "model"), cfg.seed, name,
                   _digest(run.path(dep)) if dep else None)
        if run.cached(stage, key):
            run.record(stage, key, arts, 0.0, cache_hit=True)
            results[name] = json.loads(run.path(arts[1]).read_text())
            print(f"simulate {name}: cache hit")
            continue
        t0 = time.perf_counter()
        ctrl: Controller = make()
        traj = simulate_closed_loop(spec, ctrl, sim["x0"], sim["steps"])
        m = metrics(traj, spec)
        write_trajectory_csv(traj, spec, run.path(arts[0]))
        doc = m.to_dict()
        doc["controller"] = name
        doc["reference_failures"] = sum(1 for d in traj.diagnostics if "error" in d)
        _write_json(run.path(arts[1]), doc)
        run.record(stage, key, arts, time.perf_counter() - t0)
        results[name] = doc
        print(f"simulate {name}: terminal |x|={m.terminal_norm:.4f} "
              f"violations={m.violation_pct:.2f}% max violation={m.max_violation:.4f} "
              f"max divergence={m.max_input_divergence:.4f}")
    return results


REPORT_NEEDS = {
    "gen-data": ["dataset.jsonl", "validation.jsonl"],
    "train --variant nominal": list(_variant_paths("nominal")),
    "train --variant sensreg": list(_variant_paths("sensreg")),
    "simulate --controller all": ["sim_mpc.csv", "sim_nn-nominal.csv", "sim_nn-sensreg.csv"],
}


def _read_trajectory(path):
    from .simulate import Trajectory
    data = np.genfromtxt(path, delimiter=",", names=True)
    x = np.column_stack([data["x1"], data["x2"]])
    return Trajectory(data["t"], x, data["u_applied"][:-1, None], data["u_mpc_ref"][:-1, None])


def stage_report(run: Run) -> list[str]:
    from .certify import lipschitz_nn_lower_sampled, lipschitz_nn_upper
    from .report import render_fig1, render_tables, write_fig2_data

    missing = [stage for stage, files in REPORT_NEEDS.items()
               if any(not run.path(f).exists() for f in files)]
    if missing:
        raise StageMissing(missing)
    cfg = run.cfg
    deps = [f for files in REPORT_NEEDS.values() for f in files]
    certs = [f"certify_{v}.json" for v in VARIANTS if run.path(f"certify_{v}.json").exists()]
    arts = ["fig1.svg", "fig2_data.csv", "tables.md"]
    key = _key(_digest(*[run.path(f) for f in deps + certs]), certs)
    if run.cached("report", key):
        run.record("report", key, arts, 0.0, cache_hit=True)
        print("report: cache hit")
        return arts
    t0 = time.perf_counter()
    spec = cfg.ocp_spec()
    val = load(run.path("validation.jsonl"))
    grid = cfg.grid()
    trajs = {n: _read_trajectory(run.path(f"sim_{n}.csv"))
             for n in ("mpc", "nn-nominal", "nn-sensreg")}
    train_rows, series = {}, {}
    for v in VARIANTS:
        net = load_params(run.path(_variant_paths(v)[0]))
        tr = json.loads(run.path(_variant_paths(v)[2]).read_text())
        train_rows[v] = {"r2": tr["validation_r2"], "epsilon_d": tr["epsilon_d"],
                         "l_upper": lipschitz_nn_upper(net),
                         "l_lower": lipschitz_nn_lower_sampled(
                             net, grid, cfg.certify_options()["nn_samples"],
                             cfg.stage_seed("certify"))}
        series[("validation_error", v)] = sample_errors(net, val)
    sim_rows = {n: json.loads(run.path(f"sim_{n}.json").read_text()) for n in trajs}
    for v in VARIANTS:
        doc = sim_rows[f"nn-{v}"]
        series[("divergence", v)] = [np.nan if d is None else d for d in doc["divergence"]]
    from .simulate import violation_magnitudes
    for v in VARIANTS:
        series[("violation", v)] = violation_magnitudes(trajs[f"nn-{v}"].x, spec.state_lower,
                                                        spec.state_upper)
    cert_rows = {f[len("certify_"):-len(".json")]: json.loads(run.path(f).read_text())
                 for f in certs}
    render_fig1(trajs, spec, run.path("fig1.svg"))
    write_fig2_data(series, run.path("fig2_data.csv"))
    run.path("tables.md").write_text(render_tables(train_rows, sim_rows, series, cert_rows))
    run.record("report", key, arts, time.perf_counter() - t0)
    print("report: wrote " + ", ".join(arts))
    return arts


# --- argument handling -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults if omitted)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="parallel OCP solver processes")
    common.add_argument("--force", action="store_true", help="recompute even if outputs exist")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="certmpc", description=__doc__)
    p.add_argument("--version", action="version", version=f"certmpc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="label the state grid with the MPC law")
    g.add_argument("--no-sens", action="store_true", help="skip control-law Jacobians")
    t = sub.add_parser("train", parents=[common], help="train imitation networks")
    t.add_argument("--variant", choices=[*VARIANTS, "both"], default="both")
    c = sub.add_parser("certify", parents=[common], help="evaluate the error-bound certificate")
    c.add_argument("--variant", choices=[*VARIANTS, "both"], default="both")
    c.add_argument("--probe", action="store_true",
                   help="also measure the error on a denser grid of fresh OCP solves")
    s = sub.add_parser("simulate", parents=[common], help="closed-loop swing-up simulation")
    s.add_argument("--controller", choices=CONTROLLERS, default="all")
    s.add_argument("--variant", choices=VARIANTS, help="network for --controller nn")
    sub.add_parser("report", parents=[common], help="figures and tables for a run directory")
    r = sub.add_parser("run", parents=[common], help="all stages in order")
    r.add_argument("--probe", action="store_true")
    return p


def _load_run(args) -> Run:
    if args.config:
        cfg = load_config(args.config)
    else:
        from .config import from_dict
        cfg = from_dict({})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.raw["seed"] = args.seed
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    out = Path(args.out) if args.out else cfg.out
    return Run(cfg, out, force=args.force, workers=args.workers)


def _variants(choice):
    return list(VARIANTS) if choice == "both" else [choice]


def run_command(args) -> int:
    run = _load_run(args)
    cmd = args.command
    infeasible = []

    def do_certify(variants, probe):
        for v in variants:
            try:
                stage_certify(run, v, probe)
            except CertificationInfeasible as exc:
                infeasible.append(str(exc))

    if cmd == "gen-data":
        stage_gen_data(run, with_sens=not args.no_sens)
    elif cmd == "train":
        for v in _variants(args.variant):
            stage_train(run, v)
    elif cmd == "certify":
        do_certify(_variants(args.variant), args.probe)
    elif cmd == "simulate":
        if args.variant and args.controller != "nn":
            raise ConfigError("--variant applies only to --controller nn")
        stage_simulate(run, args.controller, args.variant)
    elif cmd == "report":
        stage_report(run)
    elif cmd == "run":
        stage_gen_data(run)
        for v in VARIANTS:
            stage_train(run, v)
        do_certify(VARIANTS, args.probe)
        stage_simulate(run, "all")
        stage_report(run)
    if infeasible:
        for msg in infeasible:
            print(f"certification infeasible: {msg}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageMissing as exc:
        names = exc.args[0]
        print("missing stage outputs: " + ", ".join(names), file=sys.stderr)
        print("run the listed stages first (e.g. `certmpc " + names[0].split()[0]
              + " ...`) or `certmpc run`", file=sys.stderr)
        return EXIT_CONFIG
    except (GenerationError, TrainingError, ControllerError, IntegrationError,
            BoundInfeasibleError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
