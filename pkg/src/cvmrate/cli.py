"""Command-line interface.

Subcommands::

    rate         one Monte-Carlo SIR estimate
    sweep        SIR over an alpha grid or an SNR grid (shared master seed)
    validate     RMS relative error of GBP against strip DP over a range of N
    region-info  region counts, counting numbers and validation of a region graph

Settings come from built-in defaults, then an optional JSON file given with
``--config`` (keys are the RunConfig field names), then explicit flags.  Output
goes to ``--output`` (``-`` for stdout).  When no output is given and
``CVMRATE_OUTPUT_DIR`` is set, results go to ``<dir>/<command>.<format>``.

Exit codes: 0 success, 1 validation threshold exceeded, 2 usage error,
3 guard violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, fields, replace

from .exact_oracle import OracleGuardError
from .factor_model import build_factor_graph
from .gbp_engine import SCHEDULES, GBPConfig
from .lattice_channel import (
    InputPrior,
    InvalidSpecError,
    LatticeSpec,
    Topology,
    build_interference_matrix,
    snr_to_sigma2,
)
from .rate_estimator import CSV_FIELDS, Engine, monte_carlo_sir, rms_error_vs_exact
from .region_graph import RegionGraphError, build_region_graph, validate_region_graph

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_GUARD = 0, 1, 2, 3
OUTPUT_DIR_ENV = "CVMRATE_OUTPUT_DIR"
VALIDATE_FIELDS = (
    "topology",
    "alpha",
    "snr_db",
    "prior",
    "window",
    "damping",
    "tolerance",
    "max_iters",
    "master_seed",
    "size_n",
    "trials",
    "rms_percent",
    "max_abs_rel",
    "converged_fraction",
    "threshold_percent",
    "passed",
)


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    command: str = "rate"
    topology: str = "hex"
    size_n: int = 16
    alpha: float = 0.5
    snr_db: float = 0.0
    alpha_grid: tuple[float, ...] | None = None
    snr_grid: tuple[float, ...] | None = None
    sizes: tuple[int, ...] = (4, 5, 6, 7, 8)
    trials: int = 100
    master_seed: int = 0
    engine: str = "gbp"
    window: int = 3
    damping: float = 0.5
    max_iters: int = 2000
    tolerance: float = 1e-8
    schedule: str = "outer-inner"
    anderson: int = 10
    prior: str = "binary"
    threshold_percent: float = 1e-2
    threads: int = 1
    exclude_unconverged: bool = False
    output: str | None = None
    format: str = "csv"

    def validate(self) -> RunConfig:
        Topology.parse(self.topology)
        Engine.parse(self.engine)
        InputPrior.parse(self.prior)
        GBPConfig(self.damping, self.max_iters, self.tolerance, self.schedule, self.anderson)
        if self.command in ("rate", "sweep", "region-info"):
            LatticeSpec(self.topology, self.size_n, self.alpha)
        if self.trials < 1:
            raise UsageError("trials must be >= 1")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")
        if self.window < 2:
            raise UsageError("window must be >= 2")
        if self.format not in ("csv", "json"):
            raise UsageError(f"format must be csv or json, got {self.format!r}")
        for name in ("alpha_grid", "snr_grid", "sizes"):
            grid = getattr(self, name)
            if grid is None:
                continue
            if len(grid) == 0:
                raise UsageError(f"{name} is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise UsageError(f"{name} must be strictly increasing")
        if self.command == "sweep" and (self.alpha_grid is None) == (self.snr_grid is None):
            raise UsageError("sweep needs exactly one of --alpha-grid or --snr-grid")
        if self.command == "sweep" and self.alpha_grid is not None:
            for a in self.alpha_grid:
                LatticeSpec(self.topology, self.size_n, a)
        if self.command == "validate" and min(self.sizes) < 3:
            raise InvalidSpecError("size_n must be an integer >= 3 so a 3x3 window fits")
        return self

    @property
    def gbp(self) -> GBPConfig:
        return GBPConfig(self.damping, self.max_iters, self.tolerance, self.schedule, self.anderson)


_FLAG_FIELDS = {f.name for f in fields(RunConfig)} - {"command"}


def _float_list(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _size_range(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in text.split(","))


def _add_common(p: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--topology", default=s, help="isi (4 neighbors) or hex (6 neighbors)")
    p.add_argument("--size", dest="size_n", type=int, default=s, help="lattice side N (>= 3)")
    p.add_argument("--alpha", type=float, default=s, help="neighbor gain, |alpha| <= 1")
    p.add_argument("--snr-db", dest="snr_db", type=float, default=s, help="SNR = 1/sigma2 in dB")
    p.add_argument("--trials", type=int, default=s)
    p.add_argument("--seed", dest="master_seed", type=int, default=s, help="master seed")
    p.add_argument("--engine", default=s, help="gbp, brute or strip")
    p.add_argument("--window", type=int, default=s, help="outer region side length")
    p.add_argument("--damping", type=float, default=s)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=s)
    p.add_argument("--tolerance", type=float, default=s)
    p.add_argument("--schedule", choices=SCHEDULES, default=s)
    p.add_argument("--anderson", type=int, default=s, help="Anderson history length, 0 for plain sweeps")
    p.add_argument("--prior", default=s, help="binary, binomial:K, or v1,v2,..:p1,p2,..")
    p.add_argument("--threads", type=int, default=s, help="worker processes for trials")
    p.add_argument("--exclude-unconverged", dest="exclude_unconverged", action="store_true", default=s)
    p.add_argument("-o", "--output", default=s, help="output path, '-' for stdout")
    p.add_argument("--format", choices=("csv", "json"), default=s)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvmrate", description="Information rates of 2-D channels via GBP.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("rate", help="one Monte-Carlo SIR estimate"))
    sweep = sub.add_parser("sweep", help="SIR over an alpha or SNR grid")
    _add_common(sweep)
    sweep.add_argument("--alpha-grid", dest="alpha_grid", type=_float_list, default=argparse.SUPPRESS)
    sweep.add_argument("--snr-grid", dest="snr_grid", type=_float_list, default=argparse.SUPPRESS)
    val = sub.add_parser("validate", aliases=["validate-exact"], help="GBP vs strip DP RMS error")
    _add_common(val)
    val.add_argument("--sizes", type=_size_range, default=argparse.SUPPRESS, help="e.g. 4-8 or 4,6,8")
    val.add_argument(
        "--threshold", dest="threshold_percent", type=float, default=argparse.SUPPRESS, help="max rms_percent"
    )
    _add_common(sub.add_parser("region-info", help="inspect the region graph"))
    return parser


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(data) - _FLAG_FIELDS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key in ("alpha_grid", "snr_grid", "sizes"):
        if data.get(key) is not None:
            data[key] = tuple(data[key])
    return data


def resolve_config(argv) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    command = "validate" if command == "validate-exact" else command
    merged = {}
    path = args.pop("config", None)
    if path:
        merged.update(_load_config_file(path))
    merged.update(args)
    return replace(RunConfig(command=command), **merged).validate()


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return v


def _write(cfg: RunConfig, records: list[dict], columns) -> None:
    if cfg.format == "json":
        text = json.dumps(records, indent=2) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in records:
            w.writerow([_fmt(r[c]) for c in columns])
        text = buf.getvalue()
    _emit(cfg, text)


def _emit(cfg: RunConfig, text: str) -> None:
    target = cfg.output
    if target is None and os.environ.get(OUTPUT_DIR_ENV):
        target = os.path.join(os.environ[OUTPUT_DIR_ENV], f"{cfg.command}.{cfg.format}")
    if target in (None, "-"):
        sys.stdout.write(text)
    else:
        os.makedirs(os.path.dirname(os.path.abspath(target)), exist_ok=True)
        with open(target, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _estimate(cfg: RunConfig, alpha: float, snr_db: float) -> dict:
    spec = LatticeSpec(cfg.topology, cfg.size_n, alpha)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = monte_carlo_sir(
            spec,
            snr_to_sigma2(snr_db),
            InputPrior.parse(cfg.prior),
            cfg.trials,
            cfg.master_seed,
            cfg.engine,
            cfg.gbp,
            cfg.window,
            cfg.threads,
            cfg.exclude_unconverged,
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    rec = est.record()
    rec["snr_db"] = float(snr_db)  # echo the requested value, not its sigma2 round trip
    return rec


def cmd_rate(cfg: RunConfig) -> int:
    _write(cfg, [_estimate(cfg, cfg.alpha, cfg.snr_db)], CSV_FIELDS)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    if cfg.alpha_grid is not None:
        records = [_estimate(cfg, a, cfg.snr_db) for a in cfg.alpha_grid]
    else:
        records = [_estimate(cfg, cfg.alpha, snr) for snr in cfg.snr_grid]
    _write(cfg, records, CSV_FIELDS)
    return EXIT_OK


def cmd_validate(cfg: RunConfig) -> int:
    rows = rms_error_vs_exact(
        cfg.topology,
        cfg.sizes,
        snr_to_sigma2(cfg.snr_db),
        cfg.alpha,
        cfg.trials,
        cfg.master_seed,
        cfg.gbp,
        cfg.window,
        InputPrior.parse(cfg.prior),
    )
    echo = {
        "topology": Topology.parse(cfg.topology).value,
        "alpha": float(cfg.alpha),
        "snr_db": float(cfg.snr_db),
        "prior": InputPrior.parse(cfg.prior).label,
        "window": cfg.window,
        "damping": cfg.damping,
        "tolerance": cfg.tolerance,
        "max_iters": cfg.max_iters,
        "master_seed": cfg.master_seed,
        "threshold_percent": cfg.threshold_percent,
    }
    records = [
        {**echo, **asdict(r), "passed": bool(r.rms_percent <= cfg.threshold_percent)} for r in rows
    ]
    _write(cfg, records, VALIDATE_FIELDS)
    return EXIT_OK if all(r["passed"] for r in records) else EXIT_THRESHOLD


def cmd_region_info(cfg: RunConfig) -> int:
    spec = LatticeSpec(cfg.topology, cfg.size_n, cfg.alpha)
    s = build_interference_matrix(spec)
    fg, _ = build_factor_graph(s, [0.0] * spec.n_vars, 1.0, InputPrior.parse(cfg.prior))
    g = build_region_graph(cfg.size_n, fg, cfg.window)
    report = validate_region_graph(g, fg)
    census = Counter((len(r.var_set), r.counting_number) for r in g.regions)
    info = {
        "topology": Topology.parse(cfg.topology).value,
        "size_n": cfg.size_n,
        "window": cfg.window,
        "regions": len(g.regions),
        "edges": len(g.edges),
        "outer_regions": sum(1 for r in g.regions if not g.parents(r.id)),
        "census": [
            {"size": size, "counting_number": c, "count": n} for (size, c), n in sorted(census.items(), reverse=True)
        ],
        "validation": report.to_dict(),
    }
    if cfg.format == "json":
        text = json.dumps(info, indent=2) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["size", "counting_number", "count"])
        for row in info["census"]:
            w.writerow([row["size"], row["counting_number"], row["count"]])
        text = buf.getvalue()
    _emit(cfg, text)
    return EXIT_OK if report.ok else EXIT_THRESHOLD


COMMANDS = {"rate": cmd_rate, "sweep": cmd_sweep, "validate": cmd_validate, "region-info": cmd_region_info}


_LIST_FLAGS = ("--alpha-grid", "--snr-grid", "--snr-db", "--alpha")


def _glue_negative_values(argv: list[str]) -> list[str]:
    # argparse takes "-10,0,8" for an option; bind it to its flag instead
    out: list[str] = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in _LIST_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-") and argv[i + 1][1:2].isdigit():
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv=None) -> int:
    argv = _glue_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        cfg = resolve_config(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_USAGE if exc.code else EXIT_OK
    except (UsageError, InvalidSpecError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[cfg.command](cfg)
    except OracleGuardError as exc:
        print(f"guard violation: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except (InvalidSpecError, RegionGraphError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
