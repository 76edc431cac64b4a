"""Command-line entry point: ``tfdma <command> [flags]``.

Commands
    simulate        run the event simulator, write trace and summary files
    predict-delay   analytic expected convergence delay
    analyze-matrix  transition matrix of the fluid model for one occupancy
    sweep           analytic (and optionally simulated) delay over a grid
    compare-table3  analytic and simulated delay for the five reference setups
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import delay as dm
from . import engine, stability
from .desync import DesyncParams, InvalidInput
from .protocol import ProtocolParams

log = logging.getLogger("tfdma")

COMMANDS = ("simulate", "predict-delay", "analyze-matrix", "sweep", "compare-table3")
MAX_GRID_CELLS = 10_000

# (W_tot, C, measured mean, measured spread, analytic value) as reported for the testbed
REFERENCE_SETUPS = (
    (16, 8, 4.7, 1.7, 4.9),
    (16, 4, 4.0, 1.0, 4.1),
    (16, 2, 3.2, 0.5, 2.7),
    (8, 4, 3.1, 0.7, 3.1),
    (8, 2, 2.9, 0.6, 2.3),
)

SWEEPABLE = {"p_sw0": float, "beta": float, "Z": int, "kss": int, "nodes": int, "channels": int, "period": float}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message)


def _fail(kind: str, message: str, code: int = 2):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


@dataclass
class ExperimentSpec:
    command: str
    config: engine.SimConfig | dm.DelayParams
    replications: int = 1
    output_dir: str = "out"
    formats: tuple[str, ...] = ("csv", "json")

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise InvalidInput(f"unknown command {self.command!r}")
        if self.replications < 1:
            raise InvalidInput("replications must be >= 1")
        bad = set(self.formats) - {"csv", "json"}
        if bad:
            raise InvalidInput(f"unknown formats {sorted(bad)}")

    def to_dict(self) -> dict[str, Any]:
        kind = "sim" if isinstance(self.config, engine.SimConfig) else "delay"
        return {
            "command": self.command,
            "config_kind": kind,
            "config": asdict(self.config),
            "replications": self.replications,
            "output_dir": self.output_dir,
            "formats": list(self.formats),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        d = json.loads(text)
        cfg = d["config"]
        if d["config_kind"] == "sim":
            config = _sim_config_from_dict(cfg)
        else:
            config = dm.DelayParams(**cfg)
        return cls(d["command"], config, d["replications"], d["output_dir"], tuple(d["formats"]))


def _tuple_or_none(x):
    return None if x is None else tuple(x)


def _sim_config_from_dict(cfg: dict[str, Any]) -> engine.SimConfig:
    proto = dict(cfg["protocol"])
    proto["desync"] = DesyncParams(**proto["desync"])
    cfg = dict(cfg)
    cfg["protocol"] = ProtocolParams(**proto)
    cfg["initial_assignment"] = _tuple_or_none(cfg.get("initial_assignment"))
    cfg["initial_phases"] = _tuple_or_none(cfg.get("initial_phases"))
    cfg["membership_events"] = tuple(engine.MembershipEvent(**e) for e in cfg.get("membership_events", ()))
    return engine.SimConfig(**cfg)


# -- argument handling -------------------------------------------------------


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model parameters")
    g.add_argument("--nodes", type=int, default=16, help="total nodes W_tot")
    g.add_argument("--channels", type=int, default=8, help="number of channels C")
    g.add_argument("--period", type=float, default=0.25, help="beacon period T in seconds")
    g.add_argument("--alpha", type=float, default=0.95)
    g.add_argument("--beta", type=float, default=1.25)
    g.add_argument("--p-sw0", type=float, default=0.33, dest="p_sw0", help="initial switch probability")
    g.add_argument("--Z", type=int, default=60, help="periods without switching before a forced attempt")
    g.add_argument("--qss", type=float, default=0.02, help="steady-state threshold as a fraction of T")
    g.add_argument("--kss", type=int, default=6, help="desync settling periods in the analytic delay")
    r = p.add_argument_group("run control")
    r.add_argument("--seed", type=int, default=None, help="master seed (fallback: $TFDMA_SEED, then 1)")
    r.add_argument("--replications", type=int, default=None)
    r.add_argument("--max-time", type=float, default=60.0, dest="max_time", help="simulated seconds per run")
    r.add_argument("--loss", type=float, default=0.0, help="per-receiver message loss probability")
    r.add_argument("--mode", choices=[m.value for m in dm.Mode], default=dm.Mode.EXACT_MULTINOMIAL.value)
    r.add_argument("--out", default="out", help="output directory")
    r.add_argument("--format", default="csv,json", help="comma-separated subset of csv,json")
    r.add_argument("--workers", type=int, default=1, help="worker processes for replications")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tfdma", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common_flags()
    sub.add_parser("simulate", parents=[common], help="run the event simulator")
    sub.add_parser("predict-delay", parents=[common], help="analytic expected delay")
    m = sub.add_parser("analyze-matrix", parents=[common], help="fluid-model transition matrix")
    m.add_argument("--occupancy", required=True, help="comma-separated node counts per channel")
    m.add_argument("--offsets", default=None, help="comma-separated offset per channel (default all +1)")
    m.add_argument("--iterate", action="store_true", help="also iterate the fluid model to rest")
    s = sub.add_parser("sweep", parents=[common], help="delay over a parameter grid")
    s.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="NAME=V1,V2,...",
        help=f"grid axis, repeatable; NAME in {sorted(SWEEPABLE)}",
    )
    s.add_argument("--simulate", action="store_true", help="add a simulated mean per grid point")
    sub.add_parser("compare-table3", parents=[common], help="five reference configurations")
    return parser


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("TFDMA_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InvalidInput(f"TFDMA_SEED must be an integer, got {env!r}") from None
    return 1


def _formats(text: str) -> tuple[str, ...]:
    out = tuple(f.strip() for f in text.split(",") if f.strip())
    bad = set(out) - {"csv", "json"}
    if bad or not out:
        raise InvalidInput(f"--format must be a subset of csv,json, got {text!r}")
    return out


def _protocol(args) -> ProtocolParams:
    return ProtocolParams(
        n_channels_C=args.channels,
        beta=args.beta,
        p_sw_initial=args.p_sw0,
        Z=args.Z,
        desync=DesyncParams(period_T=args.period, alpha=args.alpha, q_ss=args.qss),
    )


def sim_config(args, **overrides) -> engine.SimConfig:
    kw = dict(
        protocol=_protocol(args),
        n_nodes_W_tot=args.nodes,
        seed=_resolve_seed(args.seed),
        max_time=args.max_time,
        message_loss_prob=args.loss,
    )
    kw.update(overrides)
    return engine.SimConfig(**kw)


def delay_params(args) -> dm.DelayParams:
    return dm.DelayParams(
        W_tot=args.nodes, C=args.channels, T=args.period, p_sw_0=args.p_sw0, beta=args.beta, Z=args.Z, k_ss=args.kss
    )


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidInput(f"expected comma-separated integers, got {text!r}") from None


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


# -- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    reps = args.replications or 1
    cfg = sim_config(args)
    out = Path(args.out)
    formats = _formats(args.format)
    spec = ExperimentSpec("simulate", cfg, reps, str(out), formats)
    _write(out / "config.json", spec.to_json() + "\n")
    if reps == 1:
        configs = [cfg]
    else:
        configs = [dataclasses.replace(cfg, seed=s) for s in engine.replication_seeds(cfg.seed, reps)]
    for k, c in enumerate(configs):
        trace, summary = engine.run(c)
        run_dir = out if reps == 1 else out / f"run_{k:04d}"
        if "csv" in formats:
            _write(run_dir / "trace.csv", trace.to_csv())
        if "json" in formats:
            _write(run_dir / "trace.jsonl", trace.to_jsonl())
        _write(run_dir / "summary.json", summary.to_json() + "\n")
        if summary.converged:
            verdict = f"converged at {summary.convergence_time:.3f} s"
        else:
            verdict = f"not converged within {c.max_time:g} s"
        occ = ",".join(str(x) for x in summary.final_occupancy)
        print(
            f"seed={c.seed} {verdict}; occupancy={occ}; "
            f"switch attempts={summary.switch_attempts}, returns={summary.returns}"
        )
    return 0


def cmd_predict_delay(args) -> int:
    params = delay_params(args)
    mode = dm.Mode(args.mode)
    out = Path(args.out)
    formats = _formats(args.format)
    try:
        est = dm.expected_delay(params, mode, keep_terms="csv" in formats)
    except dm.CompositionLimitExceeded as e:
        log.warning("%s", e)
        est = dm.sampled_expected_delay(params, seed=_resolve_seed(args.seed))
    _write(out / "config.json", ExperimentSpec("predict-delay", params, 1, str(out), formats).to_json() + "\n")
    if "json" in formats:
        _write(out / "delay.json", est.to_json() + "\n")
    if "csv" in formats and est.per_composition:
        _write(out / "compositions.csv", est.to_csv())
    tag = " (sampled)" if est.sampled else ""
    print(
        f"W_tot={params.W_tot} C={params.C} mode={est.mode.value}: expected delay {est.total_seconds:.4f} s{tag}; "
        f"compositions={est.n_compositions}, probability sum={est.probability_sum:.12f}"
    )
    return 0


def cmd_analyze_matrix(args) -> int:
    w = _int_list(args.occupancy)
    C = len(w)
    if C < 1:
        raise InvalidInput("--occupancy needs at least one channel")
    s = _int_list(args.offsets) if args.offsets else [1] * C
    if len(s) != C:
        raise InvalidInput("--offsets must have one entry per channel")
    p = [args.p_sw0] * C
    rates = stability.SwitchRates.from_counts(w, p, s)
    G = stability.build_G(w, rates)
    W = sum(w)
    result = {
        "occupancy": w,
        "offsets": s,
        "p_sw": args.p_sw0,
        "G": G.tolist(),
        "column_sums": G.sum(axis=0).tolist(),
        "spectral_radius": stability.spectral_radius(G),
        "balanced": stability.is_fixed_point(w, W, C),
        "next_expected": stability.step_expected(w, rates).tolist(),
    }
    out = Path(args.out)
    formats = _formats(args.format)
    if args.iterate:
        traj = stability.iterate_expected(w, args.p_sw0)
        result["steps_to_rest"] = len(traj) - 1
        result["final"] = traj[-1].tolist()
        if "csv" in formats:
            buf = io.StringIO()
            wr = csv.writer(buf, lineterminator="\n")
            wr.writerow(["step"] + [f"W{c + 1}" for c in range(C)])
            for k, v in enumerate(traj):
                wr.writerow([k] + [repr(float(x)) for x in v])
            _write(out / "trajectory.csv", buf.getvalue())
    if "json" in formats:
        _write(out / "matrix.json", json.dumps(result, indent=2) + "\n")
    print(
        f"spectral radius {result['spectral_radius']:.12f}; balanced={result['balanced']}; "
        f"column sums all 1: {bool(np.allclose(G.sum(axis=0), 1.0))}"
    )
    return 0


def parse_grid(axes: Sequence[str]) -> list[tuple[str, list[Any]]]:
    grid = []
    for axis in axes:
        name, _, values = axis.partition("=")
        name = name.strip().replace("-", "_")
        if name not in SWEEPABLE:
            raise InvalidInput(f"unknown grid axis {name!r}; choose from {sorted(SWEEPABLE)}")
        conv = SWEEPABLE[name]
        try:
            vals = [conv(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise InvalidInput(f"bad values for grid axis {name!r}: {values!r}") from None
        grid.append((name, vals))
    return grid


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    names = [n for n, _ in grid]
    n_cells = math.prod(len(v) for _, v in grid) if grid else 0
    if n_cells > MAX_GRID_CELLS:
        raise InvalidInput(f"grid has {n_cells} cells, limit is {MAX_GRID_CELLS}")
    mode = dm.Mode(args.mode)
    reps = args.replications or 20
    header = names + ["delay_s"] + (["sim_mean_s", "sim_sem_s", "sim_nonconverged"] if args.simulate else [])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for point in itertools.product(*(v for _, v in grid)) if grid else ():
        cell = argparse.Namespace(**vars(args))
        for name, val in zip(names, point):
            setattr(cell, name, val)
        est = dm.expected_delay(delay_params(cell), mode)
        row = list(point) + [f"{est.total_seconds:.6f}"]
        if args.simulate:
            stats = engine.convergence_time_distribution(sim_config(cell), reps, workers=args.workers)
            row += [_fmt(stats.mean), _fmt(stats.sem), stats.n_nonconverged]
        wr.writerow(row)
    out = Path(args.out)
    _write(out / "sweep.csv", buf.getvalue())
    print(f"{n_cells} grid points written to {out / 'sweep.csv'}")
    return 0


def reference_rows(args, n_runs: int, workers: int = 1) -> list[dict[str, Any]]:
    rows = []
    for W, C, measured, spread, analytic in REFERENCE_SETUPS:
        cell = argparse.Namespace(**vars(args))
        cell.nodes, cell.channels = W, C
        printed = dm.expected_delay(delay_params(cell), dm.Mode.AS_PRINTED).total_seconds
        exact = dm.expected_delay(delay_params(cell), dm.Mode.EXACT_MULTINOMIAL).total_seconds
        stats = engine.convergence_time_distribution(sim_config(cell), n_runs, workers=workers)
        rows.append(
            {
                "nodes": W,
                "channels": C,
                "analytic_as_printed_s": printed,
                "analytic_multinomial_s": exact,
                "sim_mean_s": stats.mean,
                "sim_sem_s": stats.sem,
                "sim_sd_s": stats.sd,
                "sim_runs": n_runs,
                "sim_nonconverged": stats.n_nonconverged,
                "reference_measured_s": measured,
                "reference_measured_spread_s": spread,
                "reference_analytic_s": analytic,
            }
        )
    return rows


def cmd_compare_table3(args) -> int:
    n_runs = args.replications or 200
    rows = reference_rows(args, n_runs, args.workers)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    out = Path(args.out)
    _write(out / "reference_comparison.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "predict-delay": cmd_predict_delay,
    "analyze-matrix": cmd_analyze_matrix,
    "sweep": cmd_sweep,
    "compare-table3": cmd_compare_table3,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](args)
    except (InvalidInput, ValueError) as e:
        _fail("invalid-input", str(e))
    except OSError as e:
        _fail("io", str(e))
    return 1


if __name__ == "__main__":
    sys.exit(main())
