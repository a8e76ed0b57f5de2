"""Command-line front end: ``pnl-attrib {decompose,converge,stability,axioms,waterfall}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .closedform import ORACLES
from .config import ConfigError, ScenarioConfig, load, loads
from .decomposition import (
    check_additivity,
    check_normalization,
    check_order_invariance,
    check_stability,
    isu_approximate,
    stability_distances,
    su_decompose,
)
from .timepaths import make_refining_delays

log = logging.getLogger("pnl_attrib")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3

# harness thresholds shared by converge and axioms
ORDER_TOL = 1e-2
ORDER_FACTOR = 1.2
SEED_FRACTION = 0.9
RATIO_BAND = (1.3, 3.0)
ORACLE_RTOL = 2e-2


class InputError(ValueError):
    pass


def fmt_t(t: float) -> str:
    return format(float(t), ".12g")


def fmt_v(v: float) -> str:
    return format(float(v), ".17g")


def order_name(order) -> str:
    return "-".join(str(k + 1) for k in order)


def _eval_times(cfg: ScenarioConfig) -> np.ndarray:
    return np.unique(np.concatenate([[0.0], cfg.engine.eval_times]))


# ---------------------------------------------------------------------------
# per-seed workers (top level so that a process pool can pickle them)
# ---------------------------------------------------------------------------


def _run_seed(command: str, cfg_text: str, seed: int) -> dict:
    try:
        return WORKERS[command](loads(cfg_text), seed)
    except Exception as exc:  # a failing seed is recorded, the run goes on
        log.warning("seed %d failed: %s", seed, exc)
        return {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def _decompose_seed(cfg: ScenarioConfig, seed: int) -> dict:
    surface = cfg.surface(seed)
    times = _eval_times(cfg)
    rows = []
    for level, part in zip(cfg.engine.partition_levels, cfg.partitions()):
        for order in cfg.order_perms:
            dec = su_decompose(surface, part, order, times)
            for k, t in enumerate(dec.times):
                for i, lab in enumerate(dec.labels):
                    rows.append((seed, float(t), lab, float(dec.values[k, i]), float(dec.r_values[k]),
                                 level, order_name(order)))
    return {"seed": seed, "rows": rows}


def _converge_seed(cfg: ScenarioConfig, seed: int) -> dict:
    surface = cfg.surface(seed)
    parts = cfg.partitions()
    times = np.asarray(cfg.engine.eval_times, dtype=float)
    order = cfg.order_perms[0]
    T = min(cfg.model.T, cfg.grid.horizon)
    at_T = [su_decompose(surface, p, order, [T]).values[-1] for p in parts]
    _, rep = isu_approximate(surface, parts, times, cfg.engine.tol, order)
    inv = check_order_invariance(surface, parts, [T], ORDER_TOL, ORDER_FACTOR)
    out = {
        "seed": seed, "labels": list(su_decompose(surface, parts[0], order, [T]).labels),
        "d_T": np.array(at_T).tolist(), "distances": rep.distances.tolist(), "converged": rep.converged,
        "order_gaps": inv.gaps.tolist(), "order_rel_gaps": inv.relative_gaps.tolist(),
        "order_passed": inv.passed, "order_persistent": inv.persistent,
    }
    if cfg.is_closed_form:
        oracle = ORACLES[cfg.model.surface](surface.params, surface.realization)
        out["oracle_T"] = list(oracle.at(T))
    return out


def _stability_seed(cfg: ScenarioConfig, seed: int) -> dict:
    st = cfg.stability
    delays = make_refining_delays(st.delay_kind, st.delay_levels, cfg.grid.horizon, cfg.m)
    d = stability_distances(cfg.surface(seed), delays, cfg.partitions()[-1], cfg.engine.eval_times,
                            cfg.order_perms[0])
    return {"seed": seed, "distances": d.tolist(), "labels": [x.label for x in delays]}


def _axioms_seed(cfg: ScenarioConfig, seed: int) -> dict:
    surface = cfg.surface(seed)
    basis = surface.basis
    rows = []
    for level, part in zip(cfg.engine.partition_levels, cfg.partitions()):
        for order in cfg.order_perms:
            dec = su_decompose(surface, part, order)
            add = check_additivity(dec, surface)
            norm = check_normalization(dec, basis)
            rows.append((seed, level, order_name(order), add.residual, add.relative, add.passed,
                         norm.intervals_checked, len(norm.violations)))
    T = min(cfg.model.T, cfg.grid.horizon)
    inv = check_order_invariance(surface, cfg.partitions(), [T], ORDER_TOL, ORDER_FACTOR)
    return {"seed": seed, "rows": rows, "order_passed": inv.passed, "order_persistent": inv.persistent,
            "order_gaps": inv.gaps.tolist()}


WORKERS = {
    "decompose": _decompose_seed,
    "converge": _converge_seed,
    "stability": _stability_seed,
    "axioms": _axioms_seed,
}


def run_seeds(command: str, cfg: ScenarioConfig, jobs: int = 1) -> list[dict]:
    text = cfg.dumps()
    worker = partial(_run_seed, command, text)
    seeds = cfg.seeds()
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(worker, seeds, chunksize=max(1, len(seeds) // (4 * jobs))))
    return [worker(s) for s in seeds]


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


class Outputs:
    def __init__(self, cfg: ScenarioConfig, out_dir: str | None):
        self.dir = Path(out_dir or cfg.outputs.directory)
        self.formats = set(cfg.outputs.formats)
        self.written: list[str] = []

    def table(self, name, header, rows):
        if "csv" in self.formats:
            atomic_write(self.dir / name, csv_text(header, rows))
            self.written.append(name)

    def summary(self, name, obj):
        if "json" in self.formats:
            atomic_write(self.dir / name, _json(obj))
            self.written.append(name)


def write_manifest(out: Outputs, cfg: ScenarioConfig, command: str, wall: dict, checks: dict, code: int):
    manifest = {
        "command": command, "config_sha256": cfg.digest(), "code_version": __version__,
        "seeds": cfg.seeds(), "wall_time_seconds": wall, "checks": checks,
        "exit_code": code, "files": sorted(out.written),
    }
    atomic_write(out.dir / "manifest.json", _json(manifest))


def _errors(results) -> list[dict]:
    return [{"seed": r["seed"], "error": r["error"]} for r in results if "error" in r]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

DECOMP_HEADER = ["seed", "t", "component_label", "D_value", "R_value", "partition_level", "order"]


def cmd_decompose(cfg: ScenarioConfig, out: Outputs, jobs: int) -> tuple[dict, dict]:
    results = run_seeds("decompose", cfg, jobs)
    rows = [r for res in results if "rows" in res for r in res["rows"]]
    out.table("decomposition.csv", DECOMP_HEADER,
              [(s, fmt_t(t), lab, fmt_v(d), fmt_v(rv), lv, o) for s, t, lab, d, rv, lv, o in rows])
    groups: dict = {}
    for s, t, lab, d, rv, lv, o in rows:
        groups.setdefault((lv, o, t, lab), []).append((d, rv))
    agg = []
    for (lv, o, t, lab), vals in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2], kv[0][3])):
        arr = np.array(vals)
        n = arr.shape[0]
        se = arr[:, 0].std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        agg.append((fmt_t(t), lab, lv, o, n, fmt_v(arr[:, 0].mean()), fmt_v(se), fmt_v(arr[:, 1].mean())))
    out.table("decomposition_aggregate.csv",
              ["t", "component_label", "partition_level", "order", "n", "D_mean", "D_stderr", "R_mean"], agg)
    errs = _errors(results)
    checks = {"all_seeds_ok": not errs}
    out.summary("decompose_summary.json", {"n_rows": len(rows), "errors": errs, "checks": checks})
    return checks, {}


def summarize_converge(cfg: ScenarioConfig, results: list[dict]) -> dict:
    ok = [r for r in results if "error" not in r]
    levels = cfg.engine.partition_levels
    summary: dict = {"levels": levels, "n_seeds": len(ok), "errors": _errors(results)}
    if not ok:
        summary["checks"] = {"all_seeds_ok": False}
        return summary
    conv = np.array([r["converged"] for r in ok])
    order_pass = np.mean([r["order_passed"] for r in ok])
    checks = {
        "all_seeds_ok": not summary["errors"],
        "isu_converged": bool(conv.all()),
        "order_invariance": bool(order_pass >= SEED_FRACTION),
    }
    summary["converged_fraction"] = float(conv.mean())
    summary["order_pass_fraction"] = float(order_pass)
    summary["order_persistent_fraction"] = float(np.mean([r["order_persistent"] for r in ok]))
    summary["median_order_gap"] = np.median([r["order_gaps"] for r in ok], axis=0).tolist()
    if "oracle_T" in ok[0]:
        d_T = np.array([r["d_T"] for r in ok])  # (seeds, levels, m)
        orc = np.array([r["oracle_T"] for r in ok])  # (seeds, m)
        err = np.max(np.abs(d_T - orc[:, None, :]), axis=2)
        rel = err[:, -1] / np.maximum(np.max(np.abs(orc), axis=1), np.finfo(float).tiny)
        med = np.median(err, axis=0)
        ratios = (med[:-1] / med[1:]).tolist() if len(levels) > 1 else []
        summary.update(median_oracle_error=med.tolist(), ratios=ratios,
                       final_median_relative_error=float(np.median(rel)))
        checks["oracle_ratio"] = bool(all(RATIO_BAND[0] <= x <= RATIO_BAND[1] for x in ratios))
        checks["oracle_relative_error"] = bool(np.median(rel) < ORACLE_RTOL)
    summary["checks"] = checks
    return summary


def cmd_converge(cfg: ScenarioConfig, out: Outputs, jobs: int) -> tuple[dict, dict]:
    results = run_seeds("converge", cfg, jobs)
    rows = []
    for r in results:
        if "error" in r:
            continue
        for n, lv in enumerate(cfg.engine.partition_levels):
            dist = r["distances"][n] if n < len(r["distances"]) else float("nan")
            for i, lab in enumerate(r["labels"]):
                orc = r["oracle_T"][i] if "oracle_T" in r else float("nan")
                rows.append((r["seed"], lv, fmt_t(2.0**-lv * cfg.grid.horizon), lab, fmt_v(r["d_T"][n][i]),
                             fmt_v(orc), fmt_v(abs(r["d_T"][n][i] - orc)), fmt_v(dist), fmt_v(r["order_gaps"][n])))
    out.table("converge.csv", ["seed", "partition_level", "mesh", "component_label", "D_T", "oracle_D_T",
                               "abs_error", "distance_to_next", "order_gap"], rows)
    summary = summarize_converge(cfg, results)
    out.summary("converge_summary.json", summary)
    return summary["checks"], summary


def cmd_stability(cfg: ScenarioConfig, out: Outputs, jobs: int) -> tuple[dict, dict]:
    if cfg.stability is None:
        raise ConfigError([("stability", "section required by the stability command")])
    results = run_seeds("stability", cfg, jobs)
    ok = [r for r in results if "error" not in r]
    rows = [(r["seed"], n + 1, lab, fmt_v(d)) for r in ok for n, (lab, d) in enumerate(zip(r["labels"], r["distances"]))]
    out.table("stability.csv", ["seed", "delay_level", "delay_label", "distance"], rows)
    summary: dict = {"errors": _errors(results)}
    checks = {"all_seeds_ok": not summary["errors"]}
    if ok:
        st = cfg.stability
        delays = make_refining_delays(st.delay_kind, st.delay_levels, cfg.grid.horizon, cfg.m)
        rep = check_stability([], delays, cfg.partitions()[-1], cfg.engine.eval_times, st.eps, st.max_fraction,
                              distances=np.array([r["distances"] for r in ok]))
        summary.update(eps=st.eps, exceedance=rep.exceedance.tolist(), non_increasing=rep.non_increasing,
                       median_distance=np.median(rep.distances, axis=0).tolist())
        checks["stability"] = rep.passed
    summary["checks"] = checks
    out.summary("stability_summary.json", summary)
    return checks, summary


def cmd_axioms(cfg: ScenarioConfig, out: Outputs, jobs: int) -> tuple[dict, dict]:
    results = run_seeds("axioms", cfg, jobs)
    ok = [r for r in results if "error" not in r]
    rows = [r for res in ok for r in res["rows"]]
    out.table("axioms.csv", ["seed", "partition_level", "order", "additivity_residual", "additivity_relative",
                             "additivity_passed", "normalization_intervals", "normalization_violations"],
              [(s, lv, o, fmt_v(a), fmt_v(ar), int(ap), ni, nv) for s, lv, o, a, ar, ap, ni, nv in rows])
    checks = {
        "all_seeds_ok": not _errors(results),
        "additivity": bool(rows) and all(r[5] for r in rows),
        "normalization": bool(rows) and all(r[7] == 0 for r in rows),
        "order_invariance": bool(ok) and float(np.mean([r["order_passed"] for r in ok])) >= SEED_FRACTION,
    }
    summary = {
        "errors": _errors(results), "checks": checks,
        "max_additivity_relative": max((r[4] for r in rows), default=float("nan")),
        "normalization_violations": sum(r[7] for r in rows),
        "order_persistent_fraction": float(np.mean([r["order_persistent"] for r in ok])) if ok else float("nan"),
        "median_order_gap": np.median([r["order_gaps"] for r in ok], axis=0).tolist() if ok else [],
    }
    out.summary("axioms_summary.json", summary)
    return checks, summary


def waterfall(path: str | Path, a: float, b: float, seed=None, level=None, order=None) -> dict:
    """Bars from ``R(a)`` through each ``Delta D_i`` over ``(a, b]`` to ``R(b)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError("decomposition file is empty")
    missing = [c for c in DECOMP_HEADER if c not in rows[0]]
    if missing:
        raise InputError(f"decomposition file lacks columns {missing}")
    seed = rows[0]["seed"] if seed is None else str(seed)
    level = max(int(r["partition_level"]) for r in rows) if level is None else int(level)
    order = rows[0]["order"] if order is None else str(order)
    sel = [r for r in rows if r["seed"] == seed and int(r["partition_level"]) == level and r["order"] == order]
    if not sel:
        raise InputError(f"no rows for seed={seed}, partition_level={level}, order={order}")
    labels = list(dict.fromkeys(r["component_label"] for r in sel))
    table = {(float(r["t"]), r["component_label"]): (float(r["D_value"]), float(r["R_value"])) for r in sel}
    times = sorted({k[0] for k in table})

    def find(t):
        for s in times:
            if abs(s - t) <= 1e-12 * max(1.0, abs(t)):
                return s
        raise InputError(f"time {t} not among evaluation times {[fmt_t(s) for s in times]}")

    if b < a:
        raise InputError("period end precedes its start")
    ta, tb = find(a), find(b)
    ra, rb = table[(ta, labels[0])][1], table[(tb, labels[0])][1]
    bars = [{"label": "R(a)", "kind": "start", "value": ra}]
    total = 0.0
    for lab in labels:
        delta = table[(tb, lab)][0] - table[(ta, lab)][0]
        total += delta
        bars.append({"label": lab, "kind": "component", "value": delta})
    bars.append({"label": "R(b)", "kind": "end", "value": rb})
    return {"seed": int(seed), "partition_level": level, "order": order, "period": [ta, tb],
            "bars": bars, "reconciliation_residual": total - (rb - ra)}


COMMANDS = {"decompose": cmd_decompose, "converge": cmd_converge, "stability": cmd_stability, "axioms": cmd_axioms}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnl-attrib", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="scenario TOML file")
        sp.add_argument("--out", help="output directory (overrides outputs.directory)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes across seeds")
        sp.add_argument("--seed-override", type=int, help="replace mc.seed")
    wf = sub.add_parser("waterfall")
    wf.add_argument("decomposition", help="decomposition.csv written by 'decompose'")
    wf.add_argument("--period", nargs=2, type=float, required=True, metavar=("A", "B"))
    wf.add_argument("--seed", type=int)
    wf.add_argument("--level", type=int)
    wf.add_argument("--order")
    wf.add_argument("--out", help="directory for waterfall.json (stdout otherwise)")
    return p


def _setup_logging():
    level = os.environ.get("PNL_ATTRIB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "waterfall":
            try:
                res = waterfall(args.decomposition, args.period[0], args.period[1], args.seed, args.level, args.order)
            except (InputError, OSError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            text = _json(res)
            if args.out:
                atomic_write(Path(args.out) / "waterfall.json", text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = load(args.config)
        if args.seed_override is not None:
            if args.seed_override < 0:
                raise ConfigError([("--seed-override", "must be non-negative")])
            cfg.mc.seed = args.seed_override
        if args.jobs < 1:
            raise ConfigError([("--jobs", "must be >= 1")])
        out = Outputs(cfg, args.out)
        t0 = time.perf_counter()
        checks, _ = COMMANDS[args.command](cfg, out, args.jobs)
        wall = {"total": time.perf_counter() - t0}
        passed = all(checks.values())
        code = EXIT_OK if passed else EXIT_CHECK
        write_manifest(out, cfg, args.command, wall, checks, code)
        for k, v in checks.items():
            log.info("check %s: %s", k, "pass" if v else "FAIL")
        if not passed:
            print("checks failed: " + ", ".join(k for k, v in checks.items() if not v), file=sys.stderr)
        return code
    except ConfigError as exc:
        for key, msg in exc.errors:
            print(f"config error: {key}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
