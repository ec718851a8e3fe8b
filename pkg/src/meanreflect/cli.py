"""Command-line front end.

Reads versioned JSON scenario configs, orchestrates the solvers, and emits
bit-stable artifacts: a gnuplot-ready per-node CSV and a diagnostics JSON
holding every checker report.  All numbers are written with 17 significant
digits so reruns can be compared byte-for-byte.

Exit codes: 0 success, 1 config/validation/verification failure, 2 for a
terminal condition that is infeasible for the declared constraints.  Every
failure prints a one-line machine-readable JSON reason to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, is_dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .bsde import (
    Generator,
    RegressionConfig,
    affine_mix_generator,
    constant_generator,
    linear_generator,
    quadratic_z_generator,
)
from .constraints import (
    LinearEnvelope,
    LinearObstacles,
    LossPair,
    linear_band,
    saturating_band,
)
from .core import RngSpec
from .diagnostics import (
    audit_solution,
    constraint_violation,
    contraction_estimate,
    mean_loss_paths,
    representation_gap,
    solution_stat_tol,
)
from .errors import InfeasibleTerminalError, MeanReflectError
from .mrbsde import (
    MRSolution,
    Scenario,
    Tolerances,
    kt_variation_guard,
    picard_solve,
    solve_constant_driver,
)
from .penalty import penalty_sweep
from .verify import SUITE_NAMES, run_suite

__all__ = ["main", "cmd_run", "cmd_sweep_penalty", "cmd_verify", "build_scenario"]

SCHEMA_VERSION = 1
CSV_HEADER = "t,mean_Y,mean_L,mean_R,K,push_up,push_down"
SWEEP_HEADER = "n,sup_error,variation,upper_violation,lower_violation,upper_bound,lower_bound"


class ConfigError(Exception):
    """Raised for any malformed or inconsistent scenario config."""


# ---------------------------------------------------------------------------
# bit-stable number emission
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class _Encoder17(json.JSONEncoder):
    """JSON encoder that prints every float with 17 significant digits."""

    def iterencode(self, o, _one_shot=False):
        def floatstr(x, _repr=None, _inf=float("inf")):
            if x != x:
                return "NaN"
            if x == _inf:
                return "Infinity"
            if x == -_inf:
                return "-Infinity"
            return format(x, ".17g")

        chunks = json.encoder._make_iterencode(
            {} if self.check_circular else None,
            self.default,
            json.encoder.encode_basestring_ascii,
            self.indent,
            floatstr,
            self.key_separator,
            self.item_separator,
            self.sort_keys,
            self.skipkeys,
            _one_shot,
        )
        return chunks(o, 0)


def _jsonable(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _dump_json(path: Path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True, cls=_Encoder17)
    path.write_text(text + "\n")


def _emit_error(reason: str, message: str) -> None:
    print(json.dumps({"error": reason, "message": message}), file=sys.stderr)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def _kind(node: Any, what: str) -> str:
    if not isinstance(node, dict) or "kind" not in node:
        raise ConfigError(f"{what} must be an object with a 'kind' tag")
    return str(node["kind"])


def _num(node: dict, key: str, what: str, default: float | None = None) -> float:
    if key not in node:
        if default is None:
            raise ConfigError(f"{what} requires numeric field '{key}'")
        return float(default)
    v = node[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{what}.{key} must be a number")
    return float(v)


def _parse_terminal(node: Any) -> Callable[[np.ndarray], np.ndarray]:
    kind = _kind(node, "terminal")
    if kind == "brownian":
        scale = _num(node, "scale", "terminal", 1.0)
        shift = _num(node, "shift", "terminal", 0.0)
        return lambda b: scale * b + shift
    if kind == "constant":
        value = _num(node, "value", "terminal")
        return lambda b: np.full(b.shape, value)
    if kind == "bounded-sin":
        scale = _num(node, "scale", "terminal", 1.0)
        shift = _num(node, "shift", "terminal", 0.0)
        return lambda b: scale * np.sin(b) + shift
    raise ConfigError(f"unknown terminal kind {kind!r}")


def _parse_generator(node: Any) -> Generator:
    kind = _kind(node, "generator")
    if kind == "constant":
        return constant_generator(_num(node, "value", "generator"))
    if kind == "linear":
        return linear_generator(_num(node, "a", "generator"))
    if kind == "quadratic-z":
        return quadratic_z_generator(_num(node, "gamma", "generator"))
    if kind == "affine-mix":
        return affine_mix_generator(
            a_y=_num(node, "a_y", "generator", 0.0),
            a_mean_y=_num(node, "a_mean_y", "generator", 0.0),
            a_z=_num(node, "a_z", "generator", 0.0),
            a_mean_z=_num(node, "a_mean_z", "generator", 0.0),
            const=_num(node, "const", "generator", 0.0),
        )
    raise ConfigError(f"unknown generator kind {kind!r}")


def _affine_loss_pair(node: dict) -> LossPair:
    """Per-side affine losses ``L = sL x + bL``, ``R = sR x + bR``."""
    sides = []
    for side in ("L", "R"):
        sub = node.get(side)
        if not isinstance(sub, dict):
            raise ConfigError(f"losses kind 'linear' requires object field '{side}'")
        slope = _num(sub, "slope", f"losses.{side}")
        intercept = _num(sub, "intercept", f"losses.{side}")
        if slope <= 0.0:
            raise ConfigError(f"losses.{side}.slope must be positive")
        sides.append((slope, intercept))
    (s_l, b_l), (s_r, b_r) = sides
    gap = (-b_l / s_l) - (-b_r / s_r)
    if gap <= 0.0:
        raise ConfigError("losses admit no band: root of L must exceed root of R")
    return LossPair(
        L=lambda t, x: s_l * x + b_l,
        R=lambda t, x: s_r * x + b_r,
        c=min(s_l, s_r),
        C=max(s_l, s_r),
        gap=gap,
        time_invariant=True,
        affine=True,
    )


def _parse_losses(node: Any) -> LossPair:
    kind = _kind(node, "losses")
    if kind == "linear-band":
        return linear_band(_num(node, "lower", "losses"), _num(node, "upper", "losses"))
    if kind == "saturating-band":
        return saturating_band(
            _num(node, "lower", "losses"), _num(node, "upper", "losses")
        )
    if kind == "linear":
        return _affine_loss_pair(node)
    raise ConfigError(f"unknown losses kind {kind!r}")


def _sampled(node: dict, key: str, times: np.ndarray) -> Callable[[float], float]:
    vals = np.asarray(node[key], dtype=float)
    if vals.shape != times.shape:
        raise ConfigError(f"envelope '{key}' samples must align with 'times'")
    return lambda t: float(np.interp(t, times, vals))


def _parse_envelope(node: Any) -> LinearEnvelope:
    kind = _kind(node, "envelope")
    if kind != "affine-envelope":
        raise ConfigError(f"unknown envelope kind {kind!r}")
    if any(isinstance(node.get(k), list) for k in ("b", "p", "q")):
        if "times" not in node:
            raise ConfigError("sampled envelope requires a 'times' array")
        times = np.asarray(node["times"], dtype=float)
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0.0):
            raise ConfigError("envelope 'times' must be strictly increasing")
        fns = {}
        for k in ("b", "p", "q"):
            v = node.get(k)
            if isinstance(v, list):
                fns[k] = _sampled(node, k, times)
            else:
                const = _num(node, k, "envelope")
                fns[k] = lambda t, c=const: c
        return LinearEnvelope(b=fns["b"], p=fns["p"], q=fns["q"])
    try:
        return LinearEnvelope.constants(
            _num(node, "b", "envelope", 1.0),
            _num(node, "p", "envelope"),
            _num(node, "q", "envelope"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_obstacles(node: Any) -> LinearObstacles:
    kind = _kind(node, "obstacles")
    starts = (
        _num(node, "lower_start", "obstacles", 0.0),
        _num(node, "upper_start", "obstacles", 0.0),
    )
    try:
        if kind == "linear-rates":
            return LinearObstacles.constants(
                _num(node, "lower_rate", "obstacles"),
                _num(node, "upper_rate", "obstacles"),
                *starts,
            )
        if kind == "sampled-rates":
            times = np.asarray(node.get("times", []), dtype=float)
            if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0.0):
                raise ConfigError("obstacle 'times' must be strictly increasing")
            lo = _sampled(node, "lower_rate", times)
            hi = _sampled(node, "upper_rate", times)
            return LinearObstacles(
                lower_rate=lo,
                upper_rate=hi,
                lower_start=starts[0],
                upper_start=starts[1],
            )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown obstacles kind {kind!r}")


def _parse_solver(node: Any) -> tuple[RegressionConfig, Tolerances]:
    if node is None:
        return RegressionConfig(), Tolerances()
    if not isinstance(node, dict):
        raise ConfigError("'solver' must be an object")
    reg_defaults = RegressionConfig()
    tol_defaults = Tolerances()
    try:
        reg = RegressionConfig(
            degree=int(node.get("degree", reg_defaults.degree)),
            ridge=_num(node, "ridge", "solver", reg_defaults.ridge),
            z_mode=str(node.get("z_mode", reg_defaults.z_mode)),
        )
        tol = Tolerances(
            picard_tol=_num(node, "picard_tol", "solver", tol_defaults.picard_tol),
            max_iterations=int(
                node.get("max_iterations", tol_defaults.max_iterations)
            ),
            contraction_margin=_num(
                node, "contraction_margin", "solver", tol_defaults.contraction_margin
            ),
            root_tol=_num(node, "root_tol", "solver", tol_defaults.root_tol),
            band_min=_num(node, "band_min", "solver", tol_defaults.band_min),
            stat_tol_mult=_num(
                node, "stat_tol_mult", "solver", tol_defaults.stat_tol_mult
            ),
            stiff_max=_num(node, "stiff_max", "solver", tol_defaults.stiff_max),
        )
    except ValueError as exc:
        raise ConfigError(f"bad solver settings: {exc}") from exc
    return reg, tol


def load_config(path: str | Path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version must be {SCHEMA_VERSION}, "
            f"got {cfg.get('schema_version')!r}"
        )
    return cfg


def build_scenario(cfg: dict, seed: int) -> Scenario:
    """Assemble a Scenario from a parsed config and a resolved seed."""
    for key in ("horizon", "steps", "particles", "terminal", "generator"):
        if key not in cfg:
            raise ConfigError(f"config requires field '{key}'")
    reg, tol = _parse_solver(cfg.get("solver"))
    try:
        return Scenario(
            horizon=_num(cfg, "horizon", "config"),
            steps=int(cfg["steps"]),
            particles=int(cfg["particles"]),
            rng=RngSpec(seed=seed),
            terminal=_parse_terminal(cfg["terminal"]),
            generator=_parse_generator(cfg["generator"]),
            losses=_parse_losses(cfg["losses"]) if cfg.get("losses") else None,
            envelope=_parse_envelope(cfg["envelope"]) if cfg.get("envelope") else None,
            obstacles=(
                _parse_obstacles(cfg["obstacles"]) if cfg.get("obstacles") else None
            ),
            regression=reg,
            tol=tol,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario settings: {exc}") from exc


def resolve_seed(cli_seed: int | None, cfg: dict | None) -> int:
    """Precedence: --seed flag, then config 'seed', then MEANREFLECT_SEED, then 0."""
    if cli_seed is not None:
        seed = int(cli_seed)
    elif cfg is not None and "seed" in cfg:
        if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int):
            raise ConfigError("config 'seed' must be an integer")
        seed = int(cfg["seed"])
    else:
        env = os.environ.get("MEANREFLECT_SEED")
        if env is not None:
            try:
                seed = int(env)
            except ValueError as exc:
                raise ConfigError("MEANREFLECT_SEED must be an integer") from exc
        else:
            seed = 0
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    return seed


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    """One experiment's full artifact bundle, pre-serialization."""

    scenario: dict
    table: np.ndarray
    diagnostics: dict
    timing: float
    seed: int

    def csv_text(self) -> str:
        lines = [CSV_HEADER]
        for row in self.table:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"


def _trace_block(sol: MRSolution) -> dict | None:
    tr = sol.trace
    if tr is None:
        return None
    block = {
        "iterations": tr.iterations,
        "converged": tr.converged,
        "segment_count": tr.segment_count,
        "segment_iterations": list(tr.segment_iterations),
        "y_distances": list(tr.y_distances),
        "k_distances": list(tr.k_distances),
        "ratios": list(tr.ratios),
    }
    if tr.iterations >= 3:
        block["contraction"] = asdict(contraction_estimate(tr))
    return block


def _run_result(cfg: dict, sc: Scenario, sol: MRSolution, seed: int, dt_wall: float) -> RunResult:
    grid = sc.make_grid()
    mean_y = sol.mean_path
    e_l, e_r = mean_loss_paths(sol.y, sc.losses)
    table = np.column_stack(
        [
            grid.nodes,
            mean_y,
            e_l,
            e_r,
            sol.K.values,
            sol.push_up.values,
            sol.push_down.values,
        ]
    )
    audit = audit_solution(sol, sc.losses, mult=sc.tol.stat_tol_mult)
    v_lo, v_hi = constraint_violation(sol.y, sc.losses)
    diag: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "command": "run",
        "seed": seed,
        "timing_seconds": dt_wall,
        "nodes": grid.n_nodes,
        "particles": sc.particles,
        "audit": asdict(audit),
        "representation_gap": representation_gap(sol),
        "constraint_violation": {"lower": v_lo, "upper": v_hi},
        "stat_tol": solution_stat_tol(sol.y, sc.losses, sc.tol.stat_tol_mult),
        "force_terminal": float(sol.K.values[-1]),
        "force_variation": sol.variation,
        "trace": _trace_block(sol),
    }
    if sc.envelope is not None and sol.trace is not None and sol.trace.envelope_terms:
        diag["force_variation_guard"] = asdict(
            kt_variation_guard(sol.trace, sc.envelope)
        )
    return RunResult(
        scenario=cfg, table=table, diagnostics=diag, timing=dt_wall, seed=seed
    )


def cmd_run(
    config_path: str,
    out_dir: str,
    seed: int | None = None,
    threads: int = 1,
) -> int:
    """Solve the configured scenario and write result.csv + diagnostics.json.

    A single run has no independent sub-tasks, so ``threads`` does not alter
    the computation; all cross-particle reductions are fixed-order pairwise
    sums and the emitted bytes depend only on config and seed.
    """
    cfg = load_config(config_path)
    resolved = resolve_seed(seed, cfg)
    sc = build_scenario(cfg, resolved)
    if sc.losses is None:
        raise ConfigError("cmd_run requires a 'losses' block")
    method = str(cfg.get("method", "picard"))
    init = str(cfg.get("init", "zero"))
    if init not in ("zero", "unreflected"):
        raise ConfigError(f"unknown init {init!r}")
    t0 = time.perf_counter()
    if method == "picard":
        sol = picard_solve(sc, init=init)
    elif method == "constant-driver":
        sol = solve_constant_driver(sc)
    else:
        raise ConfigError(f"unknown method {method!r}")
    wall = time.perf_counter() - t0

    result = _run_result(cfg, sc, sol, resolved, wall)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.csv").write_text(result.csv_text())
    diag = dict(result.diagnostics)
    diag["scenario"] = cfg
    _dump_json(out / "diagnostics.json", diag)
    return 0


def cmd_sweep_penalty(
    config_path: str,
    out_dir: str,
    seed: int | None = None,
    threads: int = 1,
    levels_arg: str | None = None,
) -> int:
    """Run the penalization sweep and write sweep.csv + diagnostics.json."""
    cfg = load_config(config_path)
    resolved = resolve_seed(seed, cfg)
    sc = build_scenario(cfg, resolved)
    if levels_arg is not None:
        try:
            levels = [float(tok) for tok in levels_arg.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError("--levels must be a comma-separated number list") from exc
    else:
        levels = cfg.get("penalty", {}).get("levels")
        if not levels:
            raise ConfigError("no penalty levels: pass --levels or config 'penalty.levels'")
    t0 = time.perf_counter()
    try:
        sweep = penalty_sweep(sc, levels, threads=max(1, threads))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    wall = time.perf_counter() - t0

    lines = [SWEEP_HEADER]
    rows = zip(
        sweep.ns,
        sweep.sup_errors,
        sweep.variations,
        sweep.upper_violations,
        sweep.lower_violations,
        sweep.upper_bound_column,
        sweep.lower_bound_column,
    )
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    _dump_json(
        out / "diagnostics.json",
        {
            "schema_version": SCHEMA_VERSION,
            "command": "sweep-penalty",
            "seed": resolved,
            "timing_seconds": wall,
            "levels": list(sweep.ns),
            "slope": sweep.slope,
            "sup_errors": list(sweep.sup_errors),
            "upper_bound_column": list(sweep.upper_bound_column),
            "lower_bound_column": list(sweep.lower_bound_column),
            "reference_mean": sweep.reference_mean,
            "scenario": cfg,
        },
    )
    return 0


def cmd_verify(suite: str, instances: int = 100) -> int:
    """Run a named verification suite; exit 0 iff every check passes."""
    try:
        results = run_suite(suite, instances=instances)
    except ValueError as exc:
        _emit_error("unknown-suite", str(exc))
        return 1
    ok = True
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(
            f"{status} {res.name}: instances={res.instances} "
            f"failures={res.failures} worst_slack={_fmt(res.worst_slack)}"
        )
        for line in res.details:
            print(f"  {line}")
        ok = ok and res.passed
    if not ok:
        _emit_error("verification-failed", f"suite {suite!r} has failing checks")
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument(
        "--seed", type=int, default=None, help="unsigned 64-bit seed (overrides config)"
    )
    common.add_argument(
        "--threads", type=int, default=1, help="thread fan-out for independent solves"
    )
    parser = argparse.ArgumentParser(
        prog="meanreflect",
        description="Mean-reflected backward SDE experiments and verification suites.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", parents=[common], help="solve one scenario config")
    p_run.add_argument("config", help="path to JSON scenario config")
    p_sweep = sub.add_parser(
        "sweep-penalty", parents=[common], help="penalization convergence sweep"
    )
    p_sweep.add_argument("config", help="path to JSON scenario config")
    p_sweep.add_argument(
        "--levels", default=None, help="comma-separated penalty levels (overrides config)"
    )
    p_verify = sub.add_parser(
        "verify", parents=[common], help="run a randomized verification suite"
    )
    p_verify.add_argument("suite", help=f"one of {', '.join(SUITE_NAMES)}")
    p_verify.add_argument(
        "--instances", type=int, default=100, help="instances per suite"
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.threads)
        if args.command == "sweep-penalty":
            return cmd_sweep_penalty(
                args.config, args.out, args.seed, args.threads, args.levels
            )
        return cmd_verify(args.suite, args.instances)
    except InfeasibleTerminalError as exc:
        _emit_error("infeasible-terminal", str(exc))
        return 2
    except ConfigError as exc:
        _emit_error("config", str(exc))
        return 1
    except MeanReflectError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
