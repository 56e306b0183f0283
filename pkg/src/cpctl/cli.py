"""Command-line front end.

Exit codes: 0 success (or TARGET_MET), 1 certification refused, 2
CONVERGED_TARGET_UNMET, 3 ITER_CAP, 64 usage, 65 malformed input data,
66 unreadable input, 70 internal solver failure, 73 unwritable output.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .builtins import BUILTIN_NAMES, SlipLevels, builtin_model, gridworld
from .engine import EXIT_CODES, EngineConfig, run_vi, slater_check
from .formula import CPCTL, SAFE_PCTL, FormulaSyntaxError, FragmentError, parse_formula, to_text
from .model import ModelError, chain_from_mdp, load_model, model_to_dict, save_model
from .policy import CertificationRefused, FiniteMemoryPolicy, PolicyError, certify_coherence, extract_policy, to_valued_policy
from .reachability import continuation_projection, safe_sets_by_flags
from .verify import THM1_FORMULA, SolverError, exact_check, product_chain, simulate_chain

EX_USAGE = 64
EX_DATAERR = 65
EX_NOINPUT = 66
EX_SOFTWARE = 70
EX_CANTCREAT = 73
EX_REFUSED = 1

DEFAULT_MANIFEST = "cpctl-manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EX_USAGE, f"{self.prog}: {message}\n\n{self.format_usage()}")


# --------------------------------------------------------------------------
# helpers


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EX_NOINPUT, f"cannot read {path}: {exc.strerror or exc}") from exc


def _write(path: str, data: bytes, outputs: list) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CliError(EX_CANTCREAT, f"cannot write {path}: {exc.strerror or exc}") from exc
    outputs.append(path)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _slip(args) -> SlipLevels | None:
    given = {k: getattr(args, f"slip_{k}", None) for k in ("high", "medium", "low", "constant")}
    given = {k: v for k, v in given.items() if v is not None}
    if not given:
        return None
    try:
        return SlipLevels(**given)
    except ValueError as exc:
        raise CliError(EX_USAGE, str(exc)) from exc


def _load_model(args, state: dict):
    name = args.model
    if name in BUILTIN_NAMES:
        try:
            mdp = builtin_model(name, alpha=args.alpha, eps=args.eps, slip=_slip(args))
        except ValueError as exc:
            raise CliError(EX_USAGE, str(exc)) from exc
    else:
        try:
            mdp = load_model(_read(name))
        except ModelError as exc:
            raise CliError(EX_DATAERR, f"{name}: {exc}") from exc
    state["model_hash"] = hashlib.sha256(save_model(mdp)).hexdigest()
    return mdp


def _parse(text: str, fragment: str, normalize: bool, state: dict):
    state["formula"] = text
    try:
        return parse_formula(text, fragment=fragment, continuing_normalize=normalize)
    except (FormulaSyntaxError, FragmentError) as exc:
        raise CliError(EX_DATAERR, f"formula: {exc}") from exc


def _threads(args) -> int:
    env = os.environ.get("CPCTL_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise CliError(EX_USAGE, f"CPCTL_THREADS must be an integer, got {env!r}") from exc
    else:
        value = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if value < 1:
        raise CliError(EX_USAGE, "thread count must be positive")
    return value


def _fmt(x: float) -> str:
    return repr(float(x))


def frontier_csv(result) -> bytes:
    f = result.formula
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state"] + [f"mu{k}" for k in range(f.sf)] + [f"nu{j}" for j in range(f.pf)])
    s0 = result.mdp.initial
    for s in [s0] + [t for t in range(result.mdp.n_states) if t != s0]:
        for p in sorted(result.frontiers[s], key=lambda q: (tuple(-q.nu), tuple(-q.mu))):
            w.writerow([result.mdp.state_names[s]] + [int(b) for b in p.mu] + [_fmt(x) for x in p.nu])
    return buf.getvalue().encode("utf-8")


def frontier_json(result) -> dict:
    f = result.formula
    return {
        "formula": str(f),
        "status": result.status,
        "iterations": result.iterations,
        "state_subformulas": [to_text(f.subtree(i)) for i in f.state_subs],
        "frontiers": {
            result.mdp.state_names[s]: [
                {"mu": [int(b) for b in p.mu], "nu": [float(x) for x in p.nu]}
                for p in sorted(result.frontiers[s], key=lambda q: (tuple(-q.nu), tuple(-q.mu)))
            ]
            for s in range(result.mdp.n_states)
        },
    }


def step_function(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Staircase outline of the downward closure of ``points`` (x ascending, y nonincreasing)."""
    pts = sorted(set(points))
    front = []
    for x, y in sorted(pts, key=lambda t: (-t[0], -t[1])):
        if not front or y > front[-1][1]:
            front.append((x, y))
    front.reverse()
    out = []
    for i, (x, y) in enumerate(front):
        out.append((x, y))
        if i + 1 < len(front):
            out.append((x, front[i + 1][1]))
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_model(args, state: dict) -> int:
    if args.name == "gridworld":
        if args.variant not in (1, 2):
            raise CliError(EX_USAGE, "gridworld needs --variant 1 or 2")
        mdp = gridworld(args.variant, _slip(args))
        state["model_hash"] = hashlib.sha256(save_model(mdp)).hexdigest()
    else:
        args.model = args.name
        mdp = _load_model(args, state)
    data = _json_bytes(model_to_dict(mdp))
    if args.output:
        _write(args.output, data, state["outputs"])
    else:
        sys.stdout.buffer.write(data)
    state["status"] = "OK"
    return 0


def cmd_synth(args, state: dict) -> int:
    mdp = _load_model(args, state)
    f = _parse(args.formula, CPCTL, args.continuing_normalize, state)
    try:
        cfg = EngineConfig(
            epsilon=args.epsilon,
            max_iters=args.max_iters,
            convergence_delta=args.convergence_delta if args.convergence_delta is not None else min(1e-6, args.epsilon),
            w_mix=args.w_mix,
            max_points=args.max_points,
        )
    except ValueError as exc:
        raise CliError(EX_USAGE, str(exc)) from exc
    state["config"] = cfg.as_dict()
    result = run_vi(mdp, f, cfg, ignore_target=args.converge)
    state["status"] = result.status
    summary = {
        "status": result.status,
        "iterations": result.iterations,
        "initial_frontier": frontier_json(result)["frontiers"][mdp.state_names[mdp.initial]],
    }
    if args.frontier:
        _write(args.frontier, frontier_csv(result), state["outputs"])
        _write(str(Path(args.frontier).with_suffix(".json")), _json_bytes(frontier_json(result)), state["outputs"])
    if args.policy:
        point = result.target_point()
        if point is None:
            print("no satisfying point at the initial state; policy not written", file=sys.stderr)
        else:
            fm = extract_policy(mdp, f, point)
            _write(args.policy, fm.to_json(), state["outputs"])
            summary["policy_memory_states"] = len(fm.memory)
    if args.slater_check:
        rep = slater_check(mdp, f, cfg)
        summary["slater"] = {"thresholds": rep.thresholds, "status": rep.status, "plausible": rep.plausible}
    sys.stdout.buffer.write(_json_bytes(summary))
    return EXIT_CODES[result.status]


def _load_policy(args, mdp, f, state: dict) -> FiniteMemoryPolicy:
    try:
        return FiniteMemoryPolicy.from_json(_read(args.policy), mdp, f)
    except PolicyError as exc:
        raise CliError(EX_DATAERR, f"{args.policy}: {exc}") from exc


def cmd_certify(args, state: dict) -> int:
    mdp = _load_model(args, state)
    f = _parse(args.formula, CPCTL, args.continuing_normalize, state)
    fm = _load_policy(args, mdp, f, state)
    try:
        cert = certify_coherence(mdp, f, to_valued_policy(fm))
    except CertificationRefused as exc:
        state["status"] = "REFUSED"
        report = {"certified": False, "violations": [v.describe() for v in exc.violations]}
        sys.stdout.buffer.write(_json_bytes(report))
        return EX_REFUSED
    except PolicyError as exc:
        raise CliError(EX_DATAERR, str(exc)) from exc
    state["status"] = "CERTIFIED"
    data = _json_bytes(cert.to_dict(mdp, f))
    if args.output:
        _write(args.output, data, state["outputs"])
        sys.stdout.buffer.write(_json_bytes({"certified": True, "bounds": cert.bounds()}))
    else:
        sys.stdout.buffer.write(data)
    return 0


def cmd_check(args, state: dict) -> int:
    mdp = _load_model(args, state)
    text = args.formula
    if text is None:
        if args.model not in ("thm1", "thm1chain"):
            raise CliError(EX_USAGE, "--formula is required for this model")
        text = THM1_FORMULA
    f = _parse(text, SAFE_PCTL, args.continuing_normalize, state)
    state["seed"] = args.seed
    try:
        if args.policy:
            chain = product_chain(mdp, _load_policy(args, mdp, f, state)).chain
        else:
            chain = chain_from_mdp(mdp)
    except (ModelError, PolicyError, ValueError) as exc:
        raise CliError(EX_DATAERR, str(exc)) from exc
    result = exact_check(chain, f)
    out = {"formula": str(f), "satisfied": result.holds(chain.initial)}
    out["initial"] = result.to_dict(chain.initial)["states"][0]
    if args.simulate:
        n, horizon = args.simulate
        if n <= 0 or horizon <= 0:
            raise CliError(EX_USAGE, "--simulate needs positive sample count and horizon")
        est = simulate_chain(chain, f, n, horizon, args.seed, threads=_threads(args))
        out["simulation"] = {"samples": n, "horizon": horizon, "seed": args.seed, "estimates": [e.to_dict() for e in est]}
    state["status"] = "SATISFIED" if out["satisfied"] else "VIOLATED"
    data = _json_bytes(out)
    if args.output:
        _write(args.output, data, state["outputs"])
    sys.stdout.buffer.write(data)
    return 0


def cmd_frontier_plot(args, state: dict) -> int:
    raw = _read(args.csv).decode("utf-8")
    rows = list(csv.reader(io.StringIO(raw)))
    if not rows or not rows[0] or rows[0][0] != "state":
        raise CliError(EX_DATAERR, f"{args.csv}: not a frontier CSV")
    header = rows[0]
    nus = [i for i, h in enumerate(header) if h.startswith("nu")]
    if not nus:
        raise CliError(EX_DATAERR, f"{args.csv}: no counter columns")
    x = args.x if args.x is not None else 0
    y = args.y if args.y is not None else len(nus) - 1
    if not (0 <= x < len(nus) and 0 <= y < len(nus)):
        raise CliError(EX_USAGE, f"counter index out of range (0..{len(nus) - 1})")
    body = [r for r in rows[1:] if r]
    target = args.state if args.state is not None else (body[0][0] if body else None)
    try:
        pts = [(float(r[nus[x]]), float(r[nus[y]])) for r in body if r[0] == target]
    except (ValueError, IndexError) as exc:
        raise CliError(EX_DATAERR, f"{args.csv}: {exc}") from exc
    lines = [f"# state {target}: x = nu{x}, y = nu{y}"]
    lines += [f"{_fmt(a)} {_fmt(b)}" for a, b in step_function(pts)]
    data = ("\n".join(lines) + "\n").encode("utf-8")
    if args.output:
        _write(args.output, data, state["outputs"])
    else:
        sys.stdout.buffer.write(data)
    state["status"] = "OK"
    return 0


def cmd_preinfo(args, state: dict) -> int:
    mdp = _load_model(args, state)
    f = _parse(args.formula, CPCTL, args.continuing_normalize, state)
    names = mdp.state_names
    sets = safe_sets_by_flags(mdp, f)

    def dump(safe):
        return {
            "states": sorted(names[s] for s in safe.states),
            "safe_action": {names[s]: mdp.actions[s][a] for s, a in sorted(safe.safe_action.items())},
        }

    out = {
        "formula": str(f),
        "path_formulas": [
            {
                "index": j,
                "path": to_text(f.subtree(f.path_subs[j])),
                "projection": to_text(continuation_projection(f, j)),
                **dump(sets[frozenset([j])]),
            }
            for j in range(f.pf)
        ],
        "joint": [{"flags": sorted(flags), **dump(safe)} for flags, safe in sets.items() if len(flags) > 1],
    }
    state["status"] = "OK"
    sys.stdout.buffer.write(_json_bytes(out))
    return 0


# --------------------------------------------------------------------------
# parser


def _model_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--model", required=required, help="built-in name or model JSON file")
    p.add_argument("--alpha", type=float, default=0.5, help="thm1 chain parameter")
    p.add_argument("--eps", type=float, default=0.0, help="thm1 chain parameter")
    for tier in ("high", "medium", "low", "constant"):
        p.add_argument(f"--slip-{tier}", type=float, default=None, help=f"gridworld {tier} slip mass")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpctl", description="Policy synthesis for Continuing-PCTL on finite MDPs.")
    parser.add_argument("--version", action="version", version=f"cpctl {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (CPCTL_THREADS overrides)")
    parser.add_argument("--manifest", default=DEFAULT_MANIFEST, help="run manifest path")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("model", help="export a built-in or validated model as JSON")
    p.add_argument("name", help="gridworld, a built-in name, or a model file")
    p.add_argument("--variant", type=int, default=None)
    p.add_argument("-o", "--output")
    _model_flags(p, required=False)

    def formula_flags(q, required=True):
        q.add_argument("--formula", required=required)
        q.add_argument("--continuing-normalize", action="store_true", help="read A W B as A W (A & B)")

    p = sub.add_parser("synth", help="run value iteration and export frontiers / a policy")
    _model_flags(p)
    formula_flags(p)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=100_000)
    p.add_argument("--convergence-delta", type=float, default=None)
    p.add_argument("--w-mix", type=int, default=4)
    p.add_argument("--max-points", type=int, default=64)
    p.add_argument("--converge", action="store_true", help="iterate to convergence even once the target is met")
    p.add_argument("--frontier", help="frontier CSV path (a .json mirror is written alongside)")
    p.add_argument("--policy", help="policy JSON path")
    p.add_argument("--slater-check", action="store_true")

    p = sub.add_parser("certify", help="check state and path compatibility of a policy")
    _model_flags(p)
    formula_flags(p)
    p.add_argument("--policy", required=True)
    p.add_argument("-o", "--output", help="certificate JSON path")

    p = sub.add_parser("check", help="evaluate a formula on a chain or policy product")
    _model_flags(p)
    formula_flags(p, required=False)
    p.add_argument("--policy")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="exact evaluation only (default)")
    mode.add_argument("--simulate", nargs=2, type=int, metavar=("N", "HORIZON"))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("-o", "--output")

    p = sub.add_parser("frontier-plot", help="turn a frontier CSV into step-function plot data")
    p.add_argument("csv")
    p.add_argument("--state", help="state whose frontier to plot (default: the initial state, listed first)")
    p.add_argument("--x", type=int, default=None, help="counter on the x axis (default 0)")
    p.add_argument("--y", type=int, default=None, help="counter on the y axis (default last)")
    p.add_argument("-o", "--output")

    p = sub.add_parser("preinfo", help="dump almost-sure safe sets per path formula")
    _model_flags(p)
    formula_flags(p)
    return parser


COMMANDS = {
    "model": cmd_model,
    "synth": cmd_synth,
    "certify": cmd_certify,
    "check": cmd_check,
    "frontier-plot": cmd_frontier_plot,
    "preinfo": cmd_preinfo,
}


def _write_manifest(path: str, state: dict) -> None:
    try:
        Path(path).write_bytes(_json_bytes(state))
    except OSError as exc:
        print(f"cpctl: cannot write manifest {path}: {exc.strerror or exc}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    state: dict = {
        "tool": "cpctl",
        "version": __version__,
        "argv": argv,
        "command": None,
        "config": None,
        "model_hash": None,
        "formula": None,
        "seed": None,
        "status": None,
        "exit_code": None,
        "outputs": [],
        "elapsed_seconds": None,
    }
    manifest = DEFAULT_MANIFEST
    start = time.perf_counter()
    try:
        if not argv:
            raise CliError(EX_USAGE, parser.format_help())
        args = parser.parse_args(argv)
        manifest = args.manifest
        if args.command is None:
            raise CliError(EX_USAGE, parser.format_help())
        state["command"] = args.command
        code = COMMANDS[args.command](args, state)
    except CliError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        code = exc.code
        state["status"] = state["status"] or "ERROR"
        state["error"] = str(exc).splitlines()[0] if str(exc) else ""
    except SystemExit as exc:  # --help / --version
        code = exc.code if isinstance(exc.code, int) else 0
        state["status"] = "OK"
    except SolverError as exc:
        print(f"cpctl: solver failure: {exc}", file=sys.stderr)
        code = EX_SOFTWARE
        state["status"] = "ERROR"
        state["error"] = str(exc)
    state["exit_code"] = code
    state["elapsed_seconds"] = round(time.perf_counter() - start, 6)
    _write_manifest(manifest, state)
    return code


if __name__ == "__main__":
    sys.exit(main())
