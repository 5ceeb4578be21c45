"""Command-line runner: ``ldcbf <command> [--config PATH] [--seed N] [--out DIR] [--json]``.

Exit codes: 0 pass, 1 invariant failure, 2 config error.

A config file is a flat JSON object with one level of sections, e.g.::

    {"seed": 3, "coverage": {"T": 50.0}, "coverage_run": {"n_seeds": 10}}

Unknown sections or keys are rejected. Every CSV starts with ``# key=value``
metadata lines (constants, seeds, git revision) followed by a header row;
floats are written with 17 significant digits and LF line endings.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, LdcbfError

log = logging.getLogger("ldcbf")

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# CSV with metadata header


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def git_revision() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_csv(path, header, rows, meta: dict):
    """Metadata lines, header row, then rows; deterministic given inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k in sorted(meta):
            fh.write(f"# {k}={_meta_value(meta[k])}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path):
    """Returns (meta dict of strings, header, rows of strings)."""
    meta, lines = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition("=")
                meta[k] = v
            else:
                lines.append(line)
    rows = list(csv.reader(lines))
    return meta, rows[0], rows[1:]


def _meta_value(v) -> str:
    if dataclasses.is_dataclass(v):
        # section seeds are always replaced by the run seed
        v = {k: x for k, x in dataclasses.asdict(v).items() if k != "seed"}
    if isinstance(v, (dict, list, tuple)):
        return json.dumps(_jsonable(v), sort_keys=True, separators=(",", ":"))
    return fmt(v)


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        v = dataclasses.asdict(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if np.isfinite(f) else str(f)
    return v


# ---------------------------------------------------------------------------
# Config


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _coerce(name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
        return value
    if default is None:
        return value
    raise ConfigError(f"{name}: unsupported setting")


def apply_section(obj, section: str, values, exclude=()):
    """Copy of dataclass ``obj`` with ``values`` applied; unknown keys raise."""
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(obj)} - set(exclude)
    changes = {}
    for k, v in values.items():
        if k not in names:
            raise ConfigError(f"unknown key {section}.{k}")
        changes[k] = _coerce(f"{section}.{k}", v, getattr(obj, k))
    return dataclasses.replace(obj, **changes)


@dataclasses.dataclass
class CoverageRunConfig:
    n_agents: int = 6
    n_seeds: int = 10
    horizon: float = 600.0
    dt: float = 0.1
    grid: int = 100  # density quadrature resolution


@dataclasses.dataclass
class RunConfig:
    """Resolved configuration of one command."""

    command: str
    seed: int
    out: Path
    sections: dict

    def meta(self) -> dict:
        m = {"command": self.command, "seed": self.seed, "version": __version__, "git_revision": git_revision()}
        for name, sec in self.sections.items():
            m[name] = sec
        return m


def _sections(command: str) -> dict:
    """Default section objects for ``command``."""
    from .experiments import DurationConfig, OuConfig, ToyConfig, TransferConfig
    from .envs.coverage import CoverageParams
    from .trainer import LdcbfLearnConfig, balance_defaults, move_defaults

    if command == "verify":
        return {}
    if command == "learn-ldcbf":
        return {"toy": ToyConfig()}
    if command == "stochastic-check":
        return {"ou": OuConfig()}
    if command == "coverage":
        return {"coverage": CoverageParams(grid=100), "coverage_run": CoverageRunConfig()}
    base = {"balance": balance_defaults(), "ldcbf": LdcbfLearnConfig(), "durations": DurationConfig()}
    if command == "cartpole":
        return base
    if command == "transfer":
        return {**base, "move": move_defaults(), "transfer": TransferConfig()}
    raise ConfigError(f"unknown command {command}")


DEFAULT_SEEDS = {"verify": 0, "learn-ldcbf": 0, "stochastic-check": 0, "coverage": 0, "cartpole": 10, "transfer": 10}


def resolve(command: str, raw: dict, seed=None, out=None) -> RunConfig:
    sections = _sections(command)
    top = {"experiment", "seed", "out"}
    for k, v in raw.items():
        if k in top:
            continue
        if k not in sections:
            raise ConfigError(f"unknown key {k!r} for command {command}")
        sections[k] = apply_section(sections[k], k, v, exclude=("seed",))
    if "experiment" in raw and raw["experiment"] != command:
        raise ConfigError(f"config is for {raw['experiment']!r}, not {command!r}")
    if seed is None:
        seed = raw.get("seed", DEFAULT_SEEDS[command])
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    out = Path(out if out is not None else raw.get("out", os.path.join("runs", command)))
    return RunConfig(command, seed, out, sections)


# ---------------------------------------------------------------------------
# Commands; each returns (exit code, report dict)


def cmd_verify(rc: RunConfig):
    from .verify import run_checks

    results = run_checks()
    failed = [r for r in results if not r.ok]
    rows = [(r.suite, r.name, r.ok, r.detail, r.seconds) for r in results]
    report = {
        "ok": not failed,
        "checks": [dataclasses.asdict(r) for r in results],
        "first_failure": failed[0].name if failed else None,
    }
    table = ["suite       invariant               ok    detail"]
    table += [f"{r.suite:<11} {r.name:<23} {'pass' if r.ok else 'FAIL':<5} {r.detail}" for r in results]
    report["text"] = "\n".join(table + ([f"first failing invariant: {failed[0].name}"] if failed else []))
    report["_csv"] = {"verify.csv": (["suite", "invariant", "ok", "detail", "seconds"], rows)}
    return (EXIT_FAIL if failed else EXIT_PASS), report


def cmd_learn_ldcbf(rc: RunConfig):
    from .experiments import run_toy

    cfg = dataclasses.replace(rc.sections["toy"], seed=rc.seed)
    res = run_toy(cfg)
    lo, hi = res.initial_interval
    ok = res.td_residual < 1e-4 and res.violations == 0 and res.runs_ok >= 0.99 * res.runs
    xs = np.linspace(cfg.lo, cfg.hi, cfg.nodes)
    B = np.asarray(res.learned.B(xs[:, None]))
    report = {
        "ok": ok,
        "td_residual": res.td_residual,
        "violations": res.violations,
        "n_verify": res.n_verify,
        "initial_interval": [lo, hi],
        "c_offset": res.learned.c_offset,
        "L_hat": res.learned.L_hat,
        "runs_ok": res.runs_ok,
        "runs": res.runs,
    }
    report["text"] = (f"TD residual {res.td_residual:.3g}; learned safe set violations {res.violations}/{res.n_verify}; "
                      f"initial set [{lo:.4f}, {hi:.4f}]; runs staying safe {res.runs_ok}/{res.runs}")
    report["_csv"] = {"barrier.csv": (["x", "B", "in_initial_set", "in_safe_set"],
                                      [(x, b, b <= res.learned.threshold, b < res.learned.level) for x, b in zip(xs, B)])}
    return (EXIT_PASS if ok else EXIT_FAIL), report


def cmd_stochastic_check(rc: RunConfig):
    from .experiments import stochastic_check

    cfg = dataclasses.replace(rc.sections["ou"], seed=rc.seed)
    rows = stochastic_check(cfg)
    ok = all(r.bound_ok and r.supermartingale_ok for r in rows)
    report = {"ok": ok, "pairs": [dict(dataclasses.asdict(r), bound_ok=r.bound_ok,
                                        supermartingale_ok=r.supermartingale_ok) for r in rows]}
    lines = ["x0      T      freq      bound     halfwidth  rise/SE  ok"]
    lines += [f"{r.x0:<7.3g} {r.T:<6.3g} {r.freq:<9.4f} {r.bound:<9.4f} {r.halfwidth:<10.2e} {r.max_rise_se:<8.2f} "
              f"{'pass' if r.bound_ok and r.supermartingale_ok else 'FAIL'}" for r in rows]
    report["text"] = "\n".join(lines)
    report["_csv"] = {"exit_probability.csv": (
        ["x0", "T", "freq", "halfwidth", "bound", "exits", "max_rise_se", "bound_ok", "supermartingale_ok"],
        [(r.x0, r.T, r.freq, r.halfwidth, r.bound, r.exits, r.max_rise_se, r.bound_ok, r.supermartingale_ok)
         for r in rows])}
    return (EXIT_PASS if ok else EXIT_FAIL), report


def cmd_coverage(rc: RunConfig):
    from .experiments import coverage_batch

    params = rc.sections["coverage"]
    run = rc.sections["coverage_run"]
    if run.n_agents < 1:
        raise ConfigError("coverage_run.n_agents must be at least 1")
    if run.n_seeds < 1 or run.horizon <= 0 or run.dt <= 0:
        raise ConfigError("coverage_run needs n_seeds >= 1 and positive horizon and dt")
    params = dataclasses.replace(params, grid=run.grid)
    warnings = []
    t_energy = (params.E_max - params.E_min) / params.K_d
    if params.T <= t_energy:
        msg = f"T = {params.T:g} is not above (E_max - E_min) / K_d = {t_energy:g}; the energy guarantee does not apply"
        log.warning(msg)
        warnings.append(msg)
    seeds = [rc.seed + i for i in range(run.n_seeds)]
    batch = coverage_batch(params, seeds, run.n_agents, run.horizon, run.dt)
    steps, summary = [], []
    for s, r in batch:
        for k, t in enumerate(r.times):
            for i in range(r.E.shape[1]):
                steps.append((s, t, i, r.P[k, i, 0], r.P[k, i, 1], r.E[k, i], r.B[k, i], r.docked[k, i],
                              r.slack[k, i]))
        for i, e in enumerate(r.min_energy):
            summary.append((s, i, e, e >= params.E_min))
    depleted = [(s, i, e) for s, i, e, ok in summary if not ok]
    report = {
        "ok": not depleted,
        "warnings": warnings,
        "E_min": params.E_min,
        "min_energy": min(e for _, _, e, _ in summary),
        "depleted": [list(d) for d in depleted],
        "runs": {str(s): list(r.min_energy) for s, r in batch},
    }
    lines = warnings + [f"seed {s}: min energy per agent " + " ".join(f"{e:.4f}" for e in r.min_energy) for s, r in batch]
    lines.append(f"overall min energy {report['min_energy']:.4f} (E_min {params.E_min})"
                 + (f"; {len(depleted)} agent runs below E_min" if depleted else ""))
    report["text"] = "\n".join(lines)
    report["_csv"] = {
        "coverage_steps.csv": (["seed", "t", "agent_id", "x", "y", "E", "B", "docked", "slack"], steps),
        "coverage_summary.csv": (["seed", "agent_id", "min_energy", "above_E_min"], summary),
    }
    return (EXIT_PASS if not depleted else EXIT_FAIL), report


def _cartpole_report(outcomes):
    rows = []
    for a, o in enumerate(outcomes):
        for name, d in (("random_low_slope", o.random_low), ("random_high_slope", o.random_high),
                        ("fixed_u", o.fixed)):
            for k, v in enumerate(d):
                rows.append((a, o.seed, name, k, v))
    last = outcomes[-1]
    return rows, {
        "attempts": len(outcomes),
        "seed": last.seed,
        "balance_score_s": last.balance_score,
        "ldcbf": last.info,
        "random_low_mean_s": float(last.random_low.mean()),
        "random_high_mean_s": float(last.random_high.mean()),
        "fixed_mean_s": float(last.fixed.mean()),
        "checks": last.checks,
    }


def cmd_cartpole(rc: RunConfig):
    from .experiments import cartpole_experiment

    outcomes = cartpole_experiment(rc.seed, rc.sections["balance"], rc.sections["ldcbf"], rc.sections["durations"])
    rows, rep = _cartpole_report(outcomes)
    ok = outcomes[-1].ok
    report = {"ok": ok, **rep}
    d = rc.sections["durations"]
    report["text"] = "\n".join([
        f"attempts {rep['attempts']} (last seed {rep['seed']}); balance snapshot {rep['balance_score_s']:.2f} s",
        f"filtered random, slope {d.slope_low:g}: mean {rep['random_low_mean_s']:.2f} s (floor {d.min_random:g})",
        f"filtered random, slope {d.slope_high:g}: mean {rep['random_high_mean_s']:.2f} s (must be shorter)",
        f"filtered u = {d.fixed_u:g}: mean {rep['fixed_mean_s']:.2f} s (floor {d.min_fixed:g})",
    ])
    trace = [(name, *r) for name, tr in outcomes[-1].trace.items() for r in tr]
    report["_csv"] = {
        "durations.csv": (["attempt", "seed", "policy", "trial", "duration_s"], rows),
        "filtered_runs.csv": (["policy", "trial", "t", "p", "p_dot", "psi", "psi_dot", "u_nom", "u", "B", "slack"],
                              trace),
    }
    return (EXIT_PASS if ok else EXIT_FAIL), report


def cmd_transfer(rc: RunConfig):
    from .experiments import cartpole_experiment, transfer_experiment

    outcomes = cartpole_experiment(rc.seed, rc.sections["balance"], rc.sections["ldcbf"], rc.sections["durations"])
    src = outcomes[-1]
    tcfg = rc.sections["transfer"]
    res = transfer_experiment(src.actor, src.learned, rc.sections["move"], tcfg, rc.seed)
    report = {"ok": res.ok, "source_seed": src.seed, **res.summary()}
    report["text"] = res.table()
    report["_csv"] = {
        "transfer_episodes.csv": (["batch", "arm", "episode", "trial", "success", "duration_s", "mean_slack"],
                                  res.episode_rows()),
        "transfer_summary.csv": (["episode", "with_ldcbf", "without_ldcbf"], res.mean_rows()),
    }
    return (EXIT_PASS if res.ok else EXIT_FAIL), report


COMMANDS = {
    "verify": (cmd_verify, "run the analytic invariant suites"),
    "learn-ldcbf": (cmd_learn_ldcbf, "learn and check a barrier on the 1-D integrator"),
    "cartpole": (cmd_cartpole, "balance training, barrier learning and filtered-duration test"),
    "transfer": (cmd_transfer, "move-the-pole transfer with and without the learned barrier"),
    "coverage": (cmd_coverage, "battery-constrained multi-agent coverage"),
    "stochastic-check": (cmd_stochastic_check, "Monte Carlo exit probabilities under the stochastic filter"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldcbf", description="Limited-duration control barrier function experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", metavar="PATH", help="JSON config file")
        sp.add_argument("--seed", type=int, metavar="N", help="master seed")
        sp.add_argument("--out", metavar="DIR", help="output directory (default runs/<command>)")
        sp.add_argument("--json", action="store_true", help="print a machine-readable report")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        rc = resolve(args.command, load_config(args.config), args.seed, args.out)
        t0 = time.perf_counter()
        code, report = fn(rc)
    except ConfigError as exc:
        _emit_error(args, str(exc), EXIT_CONFIG)
        return EXIT_CONFIG
    except LdcbfError as exc:
        _emit_error(args, f"{type(exc).__name__}: {exc}", EXIT_FAIL)
        return EXIT_FAIL
    elapsed = time.perf_counter() - t0
    files = []
    if args.command != "verify" or args.out is not None:
        meta = rc.meta()
        for name, (header, rows) in report.pop("_csv", {}).items():
            write_csv(rc.out / name, header, rows, meta)
            files.append(str(rc.out / name))
    report.pop("_csv", None)
    text = report.pop("text")
    report.update(command=args.command, seed=rc.seed, exit_code=code, files=files, seconds=elapsed)
    if args.json:
        print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    else:
        print(text)
        for f in files:
            print(f"wrote {f}")
        print("PASS" if code == EXIT_PASS else "FAIL")
    return code


def _emit_error(args, msg, code):
    if getattr(args, "json", False):
        print(json.dumps({"command": args.command, "exit_code": code, "error": msg}, indent=2, sort_keys=True))
    print(f"error: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
