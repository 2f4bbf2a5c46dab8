"""Configuration, orchestration and export: validate | solve | simulate | verify.

One JSON config file drives everything; ``--set key=value`` overrides single
entries for sweeps.  Every run writes a manifest carrying the content hash of
the canonicalised config, so outputs are attributable and reruns with the
same (config, seed) are byte-identical apart from wall-clock fields.

Exit codes: 0 pass, 1 test failure, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine, families, verify
from .engine import AtomicMeasure, CampaignTask, SimParams, run_campaign
from .exceptions import ConfigError, InvalidMartingaleFunction, SksimError
from .mechanism import (
    BranchingMechanism,
    JumpAtom,
    MartingaleFunction,
    OffspringLaw,
    build_offspring_law,
    constant_root_w,
    validate_w,
)
from .motion import DomainSpec, Motion
from .solver import kappa, solve_fT, solve_hT, solve_u, solve_u_star
from .verify import StandardReducer, TestReport

TOOL_VERSION = "0.1.0"

EXIT_OK = 0
EXIT_TEST_FAILURE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


# ---------------------------------------------------------------------------
# configuration


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def load_config(path_or_preset: str) -> dict:
    """Load a config file; bare names resolve against the shipped presets."""
    p = Path(path_or_preset)
    if p.exists():
        text = p.read_text()
    else:
        name = path_or_preset.removesuffix(".json")
        try:
            text = resources.files("sksim").joinpath(f"presets/{name}.json").read_text()
        except (FileNotFoundError, ModuleNotFoundError):
            raise ConfigError(f"config {path_or_preset!r} is neither a file nor a preset")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    return cfg


def apply_override(config: dict, dotted: str, raw_value: str) -> None:
    """--set a.b.c=json_value; value parsed as JSON, falling back to string."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {dotted!r} crosses a non-object")
    node[keys[-1]] = value


def _get(cfg: dict, *keys, default=None, required=False):
    node = cfg
    for k in keys:
        if not isinstance(node, dict) or k not in node:
            if required:
                raise ConfigError(f"missing config key {'.'.join(keys)}")
            return default
        node = node[k]
    return node


@dataclass(frozen=True)
class ModelBundle:
    """Everything the commands need, built and validated from one config."""

    config: dict
    fingerprint: str
    mech: BranchingMechanism
    motion: Motion
    w: MartingaleFunction
    offspring: OffspringLaw
    mu: AtomicMeasure
    params: SimParams
    tol_disc: float
    f: Optional[families.SpatialFn]
    h: Optional[families.SpatialFn]


def build_model(config: dict) -> ModelBundle:
    """Parse, construct and validate the full model; raises ConfigError/SksimError."""
    dom_cfg = _get(config, "model", "domain", required=True)
    try:
        domain = DomainSpec(mode=dom_cfg["mode"], bounds=tuple(dom_cfg["bounds"]),
                            grid_nodes=int(dom_cfg["grid_nodes"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad domain block: {exc}") from None

    mo_cfg = _get(config, "model", "motion", required=True)
    motion = Motion(drift=families.from_spec(mo_cfg["drift"]),
                    diffusion=families.from_spec(mo_cfg["diffusion"]),
                    domain=domain)

    me_cfg = _get(config, "model", "mechanism", required=True)
    alpha = families.from_spec(me_cfg["alpha"])
    beta_spec = me_cfg["beta"]
    beta = families.from_spec(beta_spec)
    jumps = []
    homogeneous = beta_spec.get("family") == "constant" \
        and me_cfg["alpha"].get("family") == "constant"
    for jump in me_cfg.get("jumps", []):
        u = float(jump["u"])
        if u <= 0:
            raise ConfigError("jump size u must be positive")
        c_spec = jump["c"] if isinstance(jump["c"], dict) \
            else {"family": "constant", "value": jump["c"]}
        if c_spec.get("family") == "constant" and c_spec.get("value", 0) < 0:
            raise ConfigError("jump weight c must be non-negative")
        homogeneous = homogeneous and c_spec.get("family") == "constant"
        jumps.append(JumpAtom(u, families.from_spec(c_spec)))
    if beta_spec.get("family") == "constant" and beta_spec.get("value", 0) < 0:
        raise ConfigError("beta must be non-negative")
    mech = BranchingMechanism(alpha=alpha, beta=beta, jumps=tuple(jumps),
                              homogeneous=homogeneous)
    mech = mech.validate_on_grid(domain.grid)

    num = config.get("numerics", {})
    w_cfg = _get(config, "model", "w", default={"mode": "constant-root"})
    w_tol = float(w_cfg.get("tol", num.get("w_tol", 1e-6)))
    if w_cfg.get("mode", "constant-root") == "constant-root":
        w = constant_root_w(mech, motion, tol=w_tol)
    elif w_cfg["mode"] == "closed-form":
        w = validate_w(mech, motion, families.from_spec(w_cfg["fn"]), tol=w_tol)
    else:
        raise ConfigError(f"unknown w mode {w_cfg.get('mode')!r}")

    offspring = build_offspring_law(mech, w, n_max=int(num.get("n_max", 8)),
                                    tail_tol=float(num.get("tail_tol", 1e-12)))

    mu_cfg = _get(config, "model", "mu", default=[])
    if mu_cfg:
        mu = AtomicMeasure(np.array([a["mass"] for a in mu_cfg], dtype=float),
                           np.array([a["x"] for a in mu_cfg], dtype=float))
        motion.require_in_domain(mu.positions)
    else:
        mu = AtomicMeasure.empty()

    camp = config.get("campaign", {})
    params = SimParams(
        dt=float(num.get("dt", 1e-3)),
        delta=float(num.get("delta", 1e-2)),
        epsilon=float(num.get("epsilon", 1e-2)),
        rng_seed=int(camp.get("seed", 0)),
        T=float(camp.get("T", 1.0)),
        population_ceiling=int(num.get("population_ceiling", 1_000_000)),
    )
    q_sup = offspring.q_sup()
    if q_sup > 0 and params.dt > 0.1 / q_sup:
        raise ConfigError(f"dt={params.dt} exceeds 0.1/q_sup={0.1 / q_sup:.4g}")

    def opt_fn(key):
        spec = camp.get(key)
        return families.from_spec(spec) if spec else None

    return ModelBundle(config=config, fingerprint=fingerprint(config), mech=mech,
                       motion=motion, w=w, offspring=offspring, mu=mu, params=params,
                       tol_disc=float(num.get("tol_disc", verify.DEFAULT_TOL_DISC)),
                       f=opt_fn("f"), h=opt_fn("h"))


# ---------------------------------------------------------------------------
# manifest


def write_manifest(out_dir: Path, config: dict, reports, outputs, started: float) -> Path:
    fp = fingerprint(config)
    manifest = {
        "fingerprint": fp,
        "tool_version": TOOL_VERSION,
        "wall_clock_s": round(time.time() - started, 3),
        "reports": [json.loads(r.to_json_line()) for r in reports],
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / f"manifest-{fp}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(config: dict, override: Optional[str]) -> Path:
    d = Path(override or _get(config, "output", "directory", default="out"))
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_validate(config: dict, out: Optional[str] = None) -> int:
    started = time.time()
    try:
        bundle = build_model(config)
    except InvalidMartingaleFunction as exc:
        print(f"INVALID: martingale function rejected: {exc}", file=sys.stderr)
        print(f"residual profile sup={exc.residual_sup:.6e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, SksimError) as exc:
        print(f"INVALID: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    grid = bundle.motion.domain.grid
    q = np.asarray(bundle.offspring.q(grid))
    tails = bundle.offspring.tail_mass(grid)
    print(f"config fingerprint: {bundle.fingerprint}")
    print(f"w: residual_sup={bundle.w.residual_sup:.3e} "
          f"range=[{bundle.w.lower_bound:.6g}, {bundle.w.bound:.6g}]")
    print(f"q: range=[{float(q.min()):.6g}, {float(q.max()):.6g}]")
    print(f"offspring: n_max={bundle.offspring.n_max} "
          f"tail_sup={float(np.max(tails)):.3e}")
    out_dir = _out_dir(config, out)
    write_manifest(out_dir, config, [], [], started)
    return EXIT_OK


def cmd_solve(config: dict, out: Optional[str] = None) -> int:
    started = time.time()
    bundle = build_model(config)
    num = config.get("numerics", {})
    dt = float(num.get("solver_dt") or bundle.params.dt)
    T = bundle.params.T
    f = bundle.f if bundle.f is not None else families.constant(0.0, tag="f=0")
    h = bundle.h if bundle.h is not None else families.constant(0.0, tag="h=0")
    mech, w, motion = bundle.mech, bundle.w, bundle.motion

    u = solve_u(mech, motion, f, T, dt)
    ustar = solve_u_star(mech, w, motion, f, T, dt)
    fT = solve_fT(mech, w, motion, f, T, dt)
    hT = solve_hT(mech, w, motion, f, h, T, dt)
    kap = kappa(fT, hT, w)

    out_dir = _out_dir(config, out)
    fp = bundle.fingerprint
    outputs = []
    for tag, fld in [("u", u), ("ustar", ustar), ("fT", fT), ("hT", hT), ("kappa", kap)]:
        path = out_dir / f"{fp}-{tag}.csv"
        fld.to_csv(path, tag)
        outputs.append(path)

    reports = []
    if num.get("refine_check"):
        cfg2 = json.loads(json.dumps(config))
        cfg2["numerics"]["solver_dt"] = dt / 2.0
        cfg2["model"]["domain"]["grid_nodes"] = 2 * config["model"]["domain"]["grid_nodes"]
        fine = build_model(cfg2)
        u_fine = solve_u(fine.mech, fine.motion, f, T, dt / 2.0)
        period = motion.domain.length if motion.domain.mode == "torus" else None
        coarse_val = u.inner(T, bundle.mu, period=period)
        fine_val = u_fine.inner(T, fine.mu, period=period)
        delta = abs(coarse_val - fine_val) / max(abs(fine_val), 1e-300)
        path = out_dir / f"{fp}-u-refined.csv"
        u_fine.to_csv(path, "u-refined")
        outputs.append(path)
        reports.append(TestReport(name="grid-refinement", statistic=float(delta),
                                  passed=bool(delta < 1e-3),
                                  thresholds={"rel_tol": 1e-3},
                                  config_fingerprint=fp))
        print(f"refinement delta: {delta:.3e}")
    manifest = write_manifest(out_dir, config, reports, outputs, started)
    print(f"wrote {len(outputs)} field files and {manifest}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_TEST_FAILURE


def cmd_simulate(config: dict, which: str, out: Optional[str] = None,
                 jobs: int = 1) -> int:
    started = time.time()
    bundle = build_model(config)
    camp = config.get("campaign", {})
    replicates = int(camp.get("replicates", 1))
    out_dir = _out_dir(config, out)
    fp = bundle.fingerprint
    events_path = out_dir / f"{fp}-{which}-events.csv"
    snap_path = out_dir / f"{fp}-{which}-final.csv"
    bin_path = out_dir / f"{fp}-{which}-final.bin"
    if replicates <= 0:
        print("warning: replicates=0, writing empty outputs", file=sys.stderr)
        with open(events_path, "w") as fh:
            engine.write_events_csv([], fh)
        with open(snap_path, "w") as fh:
            engine.write_events_csv([], fh)
        with open(bin_path, "wb") as fh:
            engine.write_snapshot_bin([], fh)
        write_manifest(out_dir, config, [], [events_path, snap_path, bin_path], started)
        return EXIT_OK

    T = bundle.params.T
    all_events = []
    final_rows = []
    for rep in range(replicates):
        rng = engine.replicate_rng(bundle.params.rng_seed, rep)
        if which == "superprocess":
            snaps = engine.simulate_superprocess(bundle.mech, bundle.motion, bundle.mu,
                                                 T, bundle.params, rng)
            _, last = snaps[-1]
            final_rows += [(rep, T, "lambda-atom", float(x), float(m))
                           for m, x in zip(last.masses, last.positions)]
        elif which == "skeleton":
            init = engine.sample_initial_skeleton(bundle.mu, bundle.w, rng)
            traj = engine.simulate_skeleton(bundle.offspring, bundle.motion, bundle.w,
                                            init, T, bundle.params, rng)
            all_events += engine.event_rows(traj.event_log, rep)
            _, pos, _ids = traj.snapshots[-1]
            final_rows += [(rep, T, "skeleton", float(x), 0.0) for x in pos]
        elif which == "dressed":
            states = engine.simulate_dressed(bundle.mech, bundle.w, bundle.motion,
                                             bundle.mu, T, bundle.params, rng,
                                             offspring=bundle.offspring)
            last = states[-1]
            all_events += engine.event_rows(last.event_log, rep)
            final_rows += [(rep, T, "lambda-atom", float(x), float(m))
                           for m, x in zip(last.Lambda.masses, last.Lambda.positions)]
            final_rows += [(rep, T, "skeleton", p.position, 0.0) for p in last.Z]
        else:
            raise ConfigError(f"unknown simulation kind {which!r}")
    with open(events_path, "w") as fh:
        engine.write_events_csv(all_events, fh)
    with open(snap_path, "w") as fh:
        engine.write_events_csv(final_rows, fh)
    with open(bin_path, "wb") as fh:
        engine.write_snapshot_bin(final_rows, fh)
    manifest = write_manifest(out_dir, config, [],
                              [events_path, snap_path, bin_path], started)
    print(f"simulated {replicates} replicate(s) of {which}; wrote {manifest}")
    return EXIT_OK


def _battery(bundle: ModelBundle, config: dict, jobs: int) -> list[TestReport]:
    camp = config.get("campaign", {})
    tests = camp.get("tests", [])
    fp = bundle.fingerprint
    reports: list[TestReport] = []
    T = bundle.params.T
    replicates = int(camp.get("replicates", 1000))
    regions = tuple(tuple(b) for b in camp.get("regions", []))
    times = tuple(float(t) for t in camp.get("times", [T]))

    if "poissonization" in tests and not regions:
        raise ConfigError("the poissonization test needs campaign.regions")
    needs_dressed = {"identity", "poissonization"} & set(tests)
    dressed_res = None
    if needs_dressed:
        reducer = StandardReducer(laplace=(("lap", bundle.f, bundle.h),),
                                  regions=regions if "poissonization" in tests else (),
                                  w=bundle.w)
        task = CampaignTask(kind="dressed", mech=bundle.mech, motion=bundle.motion,
                            mu=bundle.mu, params=bundle.params, T=T, times=(T,),
                            reducer=reducer, w=bundle.w, offspring=bundle.offspring)
        dressed_res = run_campaign(task, replicates, jobs=jobs)

    for name in tests:
        if name == "identity":
            rhs = verify.laplace_rhs(bundle.mech, bundle.w, bundle.motion, bundle.mu,
                                     bundle.f, bundle.h, T, bundle.params.dt)
            reports.append(verify.identity_report(dressed_res[T]["lap"], rhs,
                                                  name="identity-check",
                                                  tol_disc=bundle.tol_disc,
                                                  fingerprint=fp))
        elif name == "poissonization":
            lam = np.column_stack([dressed_res[T][f"lam_w_B{i}"] for i in range(len(regions))])
            cnt = np.column_stack([dressed_res[T][f"z_count_B{i}"] for i in range(len(regions))])
            rng = engine.replicate_rng(bundle.params.rng_seed, 2**32)
            reports.append(verify.poissonization_report(lam, cnt, rng, fingerprint=fp))
        elif name == "martingale":
            reports.append(verify.martingale_test(bundle.mech, bundle.w, bundle.motion,
                                                  bundle.mu, times, bundle.params,
                                                  replicates, tol_disc=bundle.tol_disc,
                                                  jobs=jobs, fingerprint=fp))
        elif name == "skeleton-moment":
            n0 = int(camp.get("skeleton_n0", 100))
            x0 = float(bundle.mu.positions[0]) if len(bundle.mu) else \
                float(bundle.motion.domain.grid[0])
            init = np.full(n0, x0)
            reports.append(verify.skeleton_moment_test(
                bundle.offspring, bundle.motion, bundle.w, init, T, bundle.params,
                min(replicates, 1000), jobs=jobs, fingerprint=fp))
        elif name == "poissonization-positive-control":
            rng = engine.replicate_rng(bundle.params.rng_seed, 2**32 + 1)
            lam = rng.uniform(0.3, 1.5, size=(max(replicates, 2000), 3))
            cnt = verify.synthetic_poisson_counts(lam, 1.0, rng)
            reports.append(verify.poissonization_report(lam, cnt, rng, fingerprint=fp))
        elif name == "poissonization-miscalibrated":
            # deliberate 1.5x intensity inflation: the battery must catch it
            rng = engine.replicate_rng(bundle.params.rng_seed, 2**32 + 2)
            lam = rng.uniform(0.3, 1.5, size=(max(replicates, 2000), 3))
            cnt = verify.synthetic_poisson_counts(lam, 1.5, rng)
            reports.append(verify.poissonization_report(lam, cnt, rng, fingerprint=fp))
        else:
            raise ConfigError(f"unknown test name {name!r}")
    return reports


def cmd_verify(config: dict, out: Optional[str] = None, jobs: int = 1) -> int:
    started = time.time()
    bundle = build_model(config)
    reports = _battery(bundle, config, jobs)
    out_dir = _out_dir(config, out)
    results = out_dir / f"results-{bundle.fingerprint}.jsonl"
    with open(results, "w") as fh:
        verify.write_reports_jsonl(reports, fh)
    write_manifest(out_dir, config, reports, [results], started)
    print(verify.summary_table(reports))
    if not reports:
        return EXIT_OK
    return EXIT_OK if all(r.passed for r in reports) else EXIT_TEST_FAILURE


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sksim",
                                description="skeletal-decomposition simulator and verifier")
    p.add_argument("command", choices=["validate", "solve", "simulate", "verify"])
    p.add_argument("which", nargs="?", default=None,
                   help="for simulate: skeleton | superprocess | dressed")
    p.add_argument("--config", required=True,
                   help="path to a JSON config, or a preset name")
    p.add_argument("--set", action="append", default=[], metavar="K=V",
                   help="override a config key (dotted path, JSON value)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects K=V, got {item!r}")
            key, _, value = item.partition("=")
            apply_override(config, key, value)
        if args.seed is not None:
            config.setdefault("campaign", {})["seed"] = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "validate":
            return cmd_validate(config, out=args.out)
        if args.command == "solve":
            return cmd_solve(config, out=args.out)
        if args.command == "simulate":
            if args.which not in ("skeleton", "superprocess", "dressed"):
                print("simulate requires: skeleton | superprocess | dressed",
                      file=sys.stderr)
                return EXIT_CONFIG
            return cmd_simulate(config, args.which, out=args.out, jobs=args.jobs)
        if args.command == "verify":
            return cmd_verify(config, out=args.out, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SksimError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
