"""Command-line entry point.

Subcommands: simulate, spectral, phase, critical, verify, couple. Every option
can also come from a JSON config file (``--config``); explicit flags win over
the file. A previously written artifact is accepted as a config file, which
replays the run that produced it.

Exit codes: 0 success, 1 validation error, 2 verification failure,
3 resource cap.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, coupling, gfi_sim, size_process, spectral, verify
from ._random import replica_rng
from .params import Params, ResourceCapError, ValidationError, param_hash

EXIT_OK, EXIT_VALIDATION, EXIT_VERIFICATION, EXIT_RESOURCE = 0, 1, 2, 3
ENV_OUTPUT_DIR = "GFI_OUTPUT_DIR"
ENV_THREADS = "GFI_THREADS"

VARIANT_ALIASES = {
    "standard": "standard",
    "modified": "modified-edge-isolation",
    "modified-edge-isolation": "modified-edge-isolation",
    "growth-only": "growth-only",
}

# name -> (type, default); a default of None means "required" for science options
RATES = {"beta": (float, None), "theta": (float, None), "gamma": (float, None),
         "variant": (str, "standard")}
OPTIONS = {
    "simulate": {**RATES, "fidelity": (str, "size"), "initial": (str, "1"),
                 "horizon": (float, 5.0), "observe": (str, ""), "n_observe": (int, 11),
                 "replicas": (int, 1), "seed": (int, 0), "events": (bool, False),
                 "cluster_cap": (int, size_process.DEFAULT_CLUSTER_CAP)},
    "spectral": {**RATES, "N": (int, spectral.DEFAULT_N), "tol": (float, 1e-6),
                 "N_cap": (int, spectral.DEFAULT_N_CAP)},
    "phase": {"beta": (float, None), "thetas": (str, None), "gammas": (str, None),
              "tol": (float, 1e-6)},
    "critical": {"beta": (float, None), "theta": (str, None), "tol": (float, 1e-6)},
    "verify": {"profile": (str, "desk"), "only": (str, "")},
    "couple": {"n": (int, 1), "n_prime": (int, 1), "beta": (float, None),
               "beta_prime": (float, None), "theta": (float, None), "gamma": (float, None),
               "horizon": (float, 3.0), "pairs": (int, 1), "seed": (int, 0)},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gfi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gfi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="JSON config file or previous artifact")
        p.add_argument("--out", help=f"output directory (env {ENV_OUTPUT_DIR}, default .)")
        p.add_argument("--workers", type=int,
                       help=f"parallel workers (env {ENV_THREADS}, default all cores)")
        p.add_argument("--no-cache", action="store_true", help="ignore the results cache")
        for name, (kind, _) in opts.items():
            flag = "--" + name.replace("_", "-")
            p.add_argument(flag, dest=name, type=_bool if kind is bool else kind, default=None)
    return parser


def _read_config(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if text.startswith("# "):
        text = text.splitlines()[0][2:]
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    if isinstance(data.get("meta"), dict):
        data = data["meta"]
    if isinstance(data.get("config"), dict):
        data = data["config"]
    return data


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = OPTIONS[command]
    config = {name: default for name, (_, default) in opts.items()}
    if args.config:
        for key, value in _read_config(args.config).items():
            key = key.replace("-", "_")
            if key == "command":
                continue
            if key not in opts:
                raise ValidationError(f"unknown {command} option {key!r} in config file")
            kind = opts[key][0]
            try:
                config[key] = value if value is None else kind(value)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"bad value for {key}: {value!r}") from exc
    for name in opts:
        value = getattr(args, name)
        if value is not None:
            config[name] = value
    missing = [k for k, v in config.items() if v is None]
    if missing:
        raise ValidationError(f"{command}: missing required option(s) {', '.join(missing)}")
    if "variant" in config:
        if config["variant"] not in VARIANT_ALIASES:
            raise ValidationError(f"unknown variant {config['variant']!r}")
        config["variant"] = VARIANT_ALIASES[config["variant"]]
    return config


def _params(config: dict) -> Params:
    return Params(config["beta"], config["theta"], config["gamma"],
                  config.get("variant", "standard"))


def _float_list(text: str, name: str) -> list:
    """Comma list, or ``start:stop:count`` for an inclusive even grid."""
    text = text.strip()
    try:
        if ":" in text:
            a, b, k = text.split(":")
            k = int(k)
            if k < 1:
                raise ValueError
            if k == 1:
                return [float(a)]
            return [round(float(a) + (float(b) - float(a)) * i / (k - 1), 12) for i in range(k)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"cannot parse {name} {text!r}") from exc


def _initial_sizes(text: str) -> list:
    """``"3"`` is one cluster of size 3; ``"1,1,4"`` lists sizes; ``"2x5"`` repeats."""
    sizes: list = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "x" in part:
                n, k = part.split("x")
                sizes.extend([int(n)] * int(k))
            elif part:
                sizes.append(int(part))
    except ValueError as exc:
        raise ValidationError(f"cannot parse initial condition {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise ValidationError("initial condition needs at least one cluster of size >= 1")
    return sizes


def _meta(command: str, config: dict) -> dict:
    return {"command": command, "version": __version__, "seed": config.get("seed"),
            "param_hash": param_hash({"command": command, **config}), "config": config}


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "tolist"):
        return _clean(value.tolist())
    if hasattr(value, "item"):
        return _clean(value.item())
    return value


def _dump_json(payload: dict) -> str:
    return json.dumps(_clean(payload), indent=2, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(text)


def _csv_text(meta: dict, header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(_clean(meta), separators=(",", ":")) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


class Context:
    def __init__(self, args: argparse.Namespace, out=sys.stdout):
        self.out_dir = Path(args.out or os.environ.get(ENV_OUTPUT_DIR) or ".")
        workers = args.workers or os.environ.get(ENV_THREADS) or os.cpu_count() or 1
        try:
            self.workers = max(1, int(workers))
        except ValueError as exc:
            raise ValidationError(f"bad worker count {workers!r}") from exc
        self.use_cache = not args.no_cache
        self.stdout = out

    def cache_path(self, command: str, meta: dict) -> Path:
        return self.out_dir / ".gfi-cache" / f"{command}-{meta['param_hash']}.json"

    def say(self, text: str) -> None:
        print(text, file=self.stdout)


# ---------------------------------------------------------------------------
# simulate


def _simulate_one(job: tuple) -> list:
    params, config, times, i = job
    rng = replica_rng(config["seed"], i)
    sizes = _initial_sizes(config["initial"])
    rows = []
    if config["fidelity"] == "tree":
        traj = gfi_sim.simulate(params, sizes, config["horizon"], rng, times,
                                cluster_cap=config["cluster_cap"],
                                record_events=config["events"])
        for t, obs in traj.snapshots:
            for pool in ("active", "inactive"):
                rows.extend((i, t, pool, n, c) for n, c in sorted(obs[pool].items()))
        events = [ev.to_dict() for ev in traj.events]
    else:
        hist: dict = {}
        for n in sizes:
            hist[n] = hist.get(n, 0) + 1
        traj = size_process.simulate(params, size_process.SizeState(0.0, hist),
                                     config["horizon"], rng, times,
                                     cluster_cap=config["cluster_cap"],
                                     record_events=config["events"])
        for snap in traj.snapshots:
            for pool, h in (("active", snap.active), ("inactive", snap.inactive)):
                rows.extend((i, snap.time, pool, n, c) for n, c in sorted(h.items()))
        events = traj.events
    summary = {"replica": i, "reason": traj.reason, "events": traj.n_events,
               "extinction_time": traj.extinction_time, "censored": traj.censored}
    return [rows, events, summary]


def cmd_simulate(config: dict, ctx: Context) -> int:
    if config["fidelity"] not in ("tree", "size"):
        raise ValidationError("fidelity must be 'tree' or 'size'")
    if config["replicas"] < 1:
        raise ValidationError("replicas must be at least 1")
    if not (config["horizon"] > 0 and math.isfinite(config["horizon"])):
        raise ValidationError("horizon must be positive and finite")
    params = _params(config)
    params.require_simulable()
    _initial_sizes(config["initial"])
    if config["observe"]:
        times = _float_list(config["observe"], "observation times")
    else:
        k = max(2, config["n_observe"])
        times = [config["horizon"] * j / (k - 1) for j in range(k)]
    if any(t < 0 or t > config["horizon"] for t in times):
        raise ValidationError("observation times must lie in [0, horizon]")
    meta = _meta("simulate", config)
    jobs = [(params, config, times, i) for i in range(config["replicas"])]
    if ctx.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(ctx.workers, len(jobs))) as pool:
            results = list(pool.map(_simulate_one, jobs, chunksize=max(1, len(jobs) // 64)))
    else:
        results = [_simulate_one(j) for j in jobs]
    rows = [r for res in results for r in res[0]]
    _write(ctx.out_dir / "snapshots.csv",
           _csv_text(meta, ["replica", "time", "pool", "size", "count"], rows))
    if config["events"]:
        lines = [json.dumps({"meta": _clean(meta)}, separators=(",", ":"))]
        for res in results:
            lines.extend(json.dumps(_clean({"replica": res[2]["replica"], **ev}),
                                    separators=(",", ":")) for ev in res[1])
        _write(ctx.out_dir / "events.jsonl", "\n".join(lines) + "\n")
    summary = {"meta": meta, "replicas": [res[2] for res in results]}
    _write(ctx.out_dir / "simulate.json", _dump_json(summary))
    censored = sum(res[2]["censored"] for res in results)
    ctx.say(f"simulated {len(results)} replica(s), {censored} censored; "
            f"wrote {ctx.out_dir / 'snapshots.csv'}")
    return EXIT_RESOURCE if censored else EXIT_OK


# ---------------------------------------------------------------------------
# spectral numerics


def _cached(command: str, config: dict, ctx: Context, compute) -> dict:
    meta = _meta(command, config)
    path = ctx.cache_path(command, meta)
    if ctx.use_cache and path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    payload = {"meta": meta, **compute()}
    if ctx.use_cache:
        _write(path, _dump_json(payload))
    return json.loads(_dump_json(payload))


def cmd_spectral(config: dict, ctx: Context) -> int:
    params = _params(config)
    if config["N"] < 2 or config["N"] > config["N_cap"]:
        raise ValidationError("need 2 <= N <= N_cap")

    def compute():
        lam, diag = spectral.malthusian_exponent(params, tol=config["tol"], N0=config["N"],
                                                 N_cap=config["N_cap"])
        triple = diag.pop("triple").to_dict()
        triple.pop("params")
        return {"lambda": lam, "convergence": diag, "triple": triple}

    payload = _cached("spectral", config, ctx, compute)
    _write(ctx.out_dir / "spectral.json", _dump_json(payload))
    ctx.say(f"lambda = {payload['lambda']!r}")
    if not payload["convergence"]["converged"]:
        ctx.say("truncation refinement hit N_cap before converging; result is censored")
        return EXIT_RESOURCE
    return EXIT_OK


def cmd_phase(config: dict, ctx: Context) -> int:
    thetas = _float_list(config["thetas"], "thetas")
    gammas = _float_list(config["gammas"], "gammas")
    if not thetas or not gammas:
        raise ValidationError("phase needs non-empty theta and gamma grids")

    def compute():
        surface = spectral.phase_surface(config["beta"], thetas, gammas, tol=config["tol"],
                                         workers=ctx.workers)
        return {"flags": surface.flags, "columns": list(surface.COLUMNS),
                "rows": surface.table()}

    payload = _cached("phase", config, ctx, compute)
    _write(ctx.out_dir / "phase.csv",
           _csv_text({**payload["meta"], "flags": payload["flags"]}, payload["columns"],
                     payload["rows"]))
    ctx.say("flags: " + json.dumps(payload["flags"]))
    return EXIT_OK


def cmd_critical(config: dict, ctx: Context) -> int:
    thetas = _float_list(config["theta"], "theta")
    beta = config["beta"]
    bad = [t for t in thetas if not 0 < t < beta]
    if bad:
        raise ValidationError(f"domain error: the critical curve needs 0 < theta < beta "
                              f"(beta={beta}, theta={bad})")

    def compute():
        rows = []
        for t in thetas:
            g, info = spectral.critical_gamma(beta, t, tol=config["tol"])
            lo, hi = spectral.critical_bracket(beta, t)
            rows.append({"theta": t, "gamma_c": g, "bracket": [lo, hi], "diagnostics": info})
        return {"beta": beta, "critical": rows}

    payload = _cached("critical", config, ctx, compute)
    _write(ctx.out_dir / "critical.json", _dump_json(payload))
    for row in payload["critical"]:
        ctx.say(f"theta={row['theta']!r} gamma_c={row['gamma_c']!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification and coupling


def cmd_verify(config: dict, ctx: Context) -> int:
    if config["profile"] not in verify.PROFILES:
        raise ValidationError(f"unknown profile {config['profile']!r}; "
                              f"expected one of {sorted(verify.PROFILES)}")
    only = [int(x) for x in _float_list(config["only"], "criteria")] if config["only"] else None
    results = verify.run_suite(config["profile"], only, progress=ctx.say)
    report = {"meta": _meta("verify", config),
              "passed": all(r.passed for _, r in results),
              "criteria": [{"criterion": n, **r.to_dict()} for n, r in results]}
    _write(ctx.out_dir / "verify.json", _dump_json(report))
    failed = [n for n, r in results if not r.passed]
    ctx.say("all checks passed" if not failed else f"failed criteria: {failed}")
    return EXIT_OK if not failed else EXIT_VERIFICATION


def cmd_couple(config: dict, ctx: Context) -> int:
    if config["pairs"] < 1:
        raise ValidationError("pairs must be at least 1")
    meta = _meta("couple", config)
    lines = [json.dumps({"meta": _clean(meta)}, separators=(",", ":"))]
    summaries = []
    for i in range(config["pairs"]):
        try:
            run = coupling.coupled_processes(config["n"], config["n_prime"], config["beta"],
                                             config["beta_prime"], config["theta"],
                                             config["gamma"], config["horizon"],
                                             config["seed"], stream=i)
        except coupling.CouplingViolation as exc:
            _write(ctx.out_dir / "coupling-violation.json",
                   _dump_json({"meta": meta, "pair": i, "message": str(exc),
                               "reproducer": exc.reproducer}))
            ctx.say(f"coupling violation in pair {i}: {exc}")
            return EXIT_VERIFICATION
        buf = io.StringIO()
        run.to_jsonl(buf)
        lines.extend(json.dumps({"pair": i, **json.loads(line)}, separators=(",", ":"))
                     for line in buf.getvalue().splitlines())
        offspring = sorted(n for _, n in run.stopping.values())
        summaries.append({"pair": i, "count": run.count(), "count_prime": run.count(True),
                          "offspring": offspring})
    _write(ctx.out_dir / "coupling.jsonl", "\n".join(lines) + "\n")
    _write(ctx.out_dir / "coupling.json", _dump_json({"meta": meta, "pairs": summaries}))
    ctx.say(f"{config['pairs']} coupled pair(s), no violations")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "spectral": cmd_spectral, "phase": cmd_phase,
            "critical": cmd_critical, "verify": cmd_verify, "couple": cmd_couple}


def main(argv: Optional[Sequence[str]] = None, stdout=None) -> int:
    out = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args.command, args)
        return COMMANDS[args.command](config, Context(args, out))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ResourceCapError, spectral.ConvergenceError) as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
