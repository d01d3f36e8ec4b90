"""Command line front end: ``worstdep run|curve|cost|validate <config.json>``."""
from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import os
import sys
import threading
import time
from importlib import resources

import jsonschema
import numpy as np

from .margins import Margin, MarginError
from .models import Model, ModelError, format_float
from .search import (Problem, SearchSpace, estimate_cost, fixed_copulas, greedy_search, grid_search_min, pair_label,
                     permuted_restarts, record_row, tau_curve)
from .vine import build_vine_from_pairs

DEFAULTS = {
    "seed": 0,
    "algorithm": "grid",
    "search": {
        "strategy": "regular",
        "grid_size": 21,
        "schedule": None,
        "families": ["gaussian"],
        "bounds": [],
        "fixed": [],
    },
    "greedy": {"k_max": None, "budget": None, "prune": False},
    "restarts": 1,
    "bootstrap": {"replicates": 500, "level": 0.95},
    "threads": 1,
    "output": "worstdep-out",
}


class ConfigError(ValueError):
    """Configuration rejected before any computation."""


def load_schema(name):
    return json.loads(resources.files("worstdep").joinpath("schemas", name).read_text("utf-8"))


def _path(err):
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)


def _all_pairs(d):
    return [list(p) for p in itertools.combinations(range(1, d + 1), 2)]


def _materialize(raw):
    cfg = copy.deepcopy(raw)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            sub = cfg.setdefault(key, {})
            for k2, v2 in val.items():
                sub.setdefault(k2, copy.deepcopy(v2))
        else:
            cfg.setdefault(key, val)
    d = len(cfg["margins"])
    srch = cfg["search"]
    if "pairs" not in srch:
        fixed = {tuple(sorted(f["pair"])) for f in srch["fixed"]}
        if cfg["algorithm"] == "greedy":
            srch["pairs"] = [p for p in _all_pairs(d) if tuple(p) not in fixed]
        else:
            srch["pairs"] = [[1, 2]] if d == 2 and (1, 2) not in fixed else []
    if "curve" in cfg:
        cur = cfg["curve"]
        if "pair" not in cur and len(srch["pairs"]) == 1:
            cur["pair"] = list(srch["pairs"][0])
        cur.setdefault("families", list(srch["families"]))
        if "taus" not in cur:
            cur["taus"] = [float(t) for t in np.linspace(-1.0, 1.0, cur.pop("points", 41))]
        else:
            cur.pop("points", None)
    return cfg


def _check(cfg):
    d = len(cfg["margins"])
    for k, m in enumerate(cfg["margins"]):
        try:
            Margin.from_dict(m)
        except (MarginError, ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"$.margins[{k}]: {exc}") from None
    try:
        Model(cfg["model"], d)
    except ModelError as exc:
        raise ConfigError(f"$.model: {exc}") from None

    def pair_ok(p, where):
        i, j = p
        if i == j or not (1 <= i <= d and 1 <= j <= d):
            raise ConfigError(f"{where}: pair {p} is not a pair of distinct variables in 1..{d}")

    srch = cfg["search"]
    for k, p in enumerate(srch["pairs"]):
        pair_ok(p, f"$.search.pairs[{k}]")
    seen = set()
    for k, p in enumerate(srch["pairs"]):
        key = tuple(sorted(p))
        if key in seen:
            raise ConfigError(f"$.search.pairs[{k}]: pair {p} is listed twice")
        seen.add(key)
    for k, b in enumerate(srch["bounds"]):
        pair_ok(b["pair"], f"$.search.bounds[{k}].pair")
        if not b["lower"] < b["upper"]:
            raise ConfigError(f"$.search.bounds[{k}]: lower must be below upper")
    for k, f in enumerate(srch["fixed"]):
        pair_ok(f["pair"], f"$.search.fixed[{k}].pair")
        if tuple(sorted(f["pair"])) in seen:
            raise ConfigError(f"$.search.fixed[{k}]: pair {f['pair']} is also free")
        try:
            fixed_copulas([f])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"$.search.fixed[{k}]: {exc}") from None
    if cfg["algorithm"] in ("grid", "permuted-grid") and not srch["pairs"] and "curve" not in cfg:
        raise ConfigError("$.search.pairs: grid search needs at least one free pair")
    k_max = cfg["greedy"]["k_max"]
    if k_max is not None and k_max > d * (d - 1) // 2:
        raise ConfigError(f"$.greedy.k_max: at most {d * (d - 1) // 2} pairs exist for {d} inputs")
    if "curve" in cfg:
        cur = cfg["curve"]
        if "pair" not in cur:
            raise ConfigError("$.curve.pair: a curve needs exactly one free pair")
        pair_ok(cur["pair"], "$.curve.pair")


def parse_config(source):
    """Validate a configuration and fill in every default.

    Parameters
    ----------
    source : str, path, file object or dict

    Returns
    -------
    dict
        The effective configuration.

    Raises
    ------
    ConfigError
        With the JSON path of the first problem found.
    """
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        if hasattr(source, "read"):
            text = source.read()
        else:
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(load_schema("config.schema.json"))
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e)}: {e.message}")
    cfg = _materialize(raw)
    _check(cfg)
    return cfg


def dump_config(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)


# --------------------------------------------------------------------------


def _build(cfg, on_event=None):
    margins = [Margin.from_dict(m) for m in cfg["margins"]]
    d = len(margins)
    model = Model(cfg["model"], d)
    boot = cfg["bootstrap"]
    problem = Problem(model=model, margins=margins, alpha=cfg["alpha"], n=cfg["n"], seed=cfg["seed"],
                      replicates=boot["replicates"], level=boot["level"], threads=cfg["threads"],
                      on_event=on_event)
    srch = cfg["search"]
    space = SearchSpace(
        pairs=[tuple(p) for p in srch["pairs"]],
        bounds={tuple(b["pair"]): (b["lower"], b["upper"]) for b in srch["bounds"]},
        strategy=srch["strategy"],
        grid_size=srch["grid_size"],
        schedule=srch["schedule"],
        families=list(srch["families"]),
        fixed=fixed_copulas(srch["fixed"]),
    )
    return problem, space


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def records_csv(rows, pairs):
    """CSV text of record rows with one tau and theta column per pair."""
    labels = [pair_label(p) for p in pairs]
    head = (["index", "restart", "iteration", "candidate", "family"] + [f"tau_{q}" for q in labels]
            + [f"theta_{q}" for q in labels] + ["quantile", "ci_lo", "ci_hi", "evaluations"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    for r in rows:
        w.writerow([_fmt(r["index"]), _fmt(r["restart"]), _fmt(r["iteration"]), _fmt(r["candidate"]), r["family"]]
                   + [_fmt(r["taus"].get(q)) for q in labels] + [_fmt(r["thetas"].get(q)) for q in labels]
                   + [_fmt(r["quantile"]), _fmt(r["ci_lo"]), _fmt(r["ci_hi"]), _fmt(r["evaluations"])])
    return buf.getvalue()


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json(obj):
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


class _Events:
    """Collects point records and appends every event to ``events.jsonl``."""

    def __init__(self, path):
        self.rows = []
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, event):
        with self._lock:
            if event.get("event") == "point":
                self.rows.append(event["record"])
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        self._fh.close()


def _trace_rows(trace):
    return [{"iteration": t["iteration"], "pair": list(t["pair"]), "family": t["family"], "quantile": t["quantile"],
             "ci_lo": t["ci_lo"], "ci_hi": t["ci_hi"], "taus": {pair_label(q): v for q, v in t["taus"].items()}}
            for t in trace]


def trace_csv(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "pair", "family", "quantile", "ci_lo", "ci_hi"])
    for t in trace:
        w.writerow([t["iteration"], pair_label(t["pair"]), t["family"], _fmt(t["quantile"]), _fmt(t["ci_lo"]),
                    _fmt(t["ci_hi"])])
    return buf.getvalue()


def curve_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "tau", "quantile", "ci_lo", "ci_hi"])
    for r in records:
        (tau,) = r.taus.values()
        w.writerow([r.family, _fmt(tau), _fmt(r.quantile), _fmt(r.ci_lo), _fmt(r.ci_hi)])
    return buf.getvalue()


def _column_pairs(cfg):
    d = len(cfg["margins"])
    return list(itertools.combinations(range(1, d + 1), 2))


def execute(cfg, out=None, mode="run"):
    """Run a validated configuration and write its output files.

    Returns the result document (also written to ``result.json``).
    """
    out = out or cfg["output"]
    os.makedirs(out, exist_ok=True)
    for stale in ("FAILED", "result.json", "records.csv", "vine.json", "trace.csv", "curve.csv"):
        p = os.path.join(out, stale)
        if os.path.exists(p):
            os.remove(p)
    events = _Events(os.path.join(out, "events.jsonl"))
    pairs = _column_pairs(cfg)
    algorithm = "curve" if mode == "curve" else cfg["algorithm"]
    t0 = time.perf_counter()
    doc = {"status": "ok", "config": cfg, "algorithm": algorithm}
    try:
        problem, space = _build(cfg, events)
        if mode == "curve":
            cur = cfg["curve"]
            if len(space.pairs) > 1:
                raise ConfigError("curve: more than one free pair is configured")
            res = tau_curve(problem, tuple(cur["pair"]), cur["families"], cur["taus"], fixed=space.fixed)
        elif cfg["algorithm"] == "grid":
            structure = build_vine_from_pairs(list(space.fixed) + list(space.pairs), problem.d)
            res = grid_search_min(problem, structure, space)
        elif cfg["algorithm"] == "permuted-grid":
            res = permuted_restarts(problem, space, cfg["restarts"])
        else:
            g = cfg["greedy"]
            res = greedy_search(problem, space, k_max=g["k_max"], budget=g["budget"], prune=g["prune"])
    except Exception as exc:
        events({"event": "failed", "error": str(exc)})
        events.close()
        doc.update(status="failed", error=f"{type(exc).__name__}: {exc}", records=events.rows, best=None,
                   evaluations=sum(1 for _ in events.rows) * cfg["n"], wall_clock_s=time.perf_counter() - t0)
        _write(os.path.join(out, "records.csv"), records_csv(events.rows, pairs))
        _write(os.path.join(out, "result.json"), _json(doc))
        _write(os.path.join(out, "FAILED"), doc["error"] + "\n")
        raise
    events({"event": "done", "evaluations": res.evaluations})
    events.close()
    rows = [record_row(r) for r in res.records]
    vine = res.best.model().to_dict()
    doc.update(records=rows, best=record_row(res.best), evaluations=res.evaluations, vine=vine,
               stop_reason=res.stop_reason, trace=_trace_rows(res.trace),
               permutation=res.extra.get("permutation"), baseline_quantile=res.extra.get("baseline"),
               wall_clock_s=time.perf_counter() - t0)
    _write(os.path.join(out, "records.csv"), records_csv(rows, pairs))
    _write(os.path.join(out, "vine.json"), _json(vine))
    if res.algorithm == "greedy":
        _write(os.path.join(out, "trace.csv"), trace_csv(res.trace))
    if mode == "curve":
        _write(os.path.join(out, "curve.csv"), curve_csv(res.records))
    _write(os.path.join(out, "result.json"), _json(doc))
    return doc


def cost_of(cfg, K=None):
    """Greedy evaluation count for a configuration."""
    d = len(cfg["margins"])
    p = d * (d - 1) // 2
    if K is None:
        k_max = cfg["greedy"]["k_max"]
        K = (k_max if k_max is not None else p) - 1
    return estimate_cost(len(cfg["search"]["families"]), cfg["n"], cfg["search"]["schedule"], K, d)


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("WORSTDEP_THREADS")
    if env:
        try:
            val = int(env)
        except ValueError:
            raise ConfigError(f"WORSTDEP_THREADS must be a positive integer, got {env!r}") from None
        if val < 1:
            raise ConfigError(f"WORSTDEP_THREADS must be a positive integer, got {env!r}")
        return val
    return None


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _parser():
    ap = argparse.ArgumentParser(prog="worstdep", description="Search for worst-case input dependence.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run the configured search"), ("curve", "quantile along one pair's tau")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n", type=_positive)
        sp.add_argument("--threads", type=_positive)
        sp.add_argument("--out")
    sp = sub.add_parser("cost", help="print the greedy evaluation count")
    sp.add_argument("config")
    sp.add_argument("--K", type=int, help="last iteration index (default: k_max - 1, or p - 1)")
    sp = sub.add_parser("validate", help="check a configuration and print it with defaults")
    sp.add_argument("config")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.command == "validate":
            print(dump_config(cfg))
            return 0
        if args.command == "cost":
            print(cost_of(cfg, args.K))
            return 0
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.n is not None:
            cfg["n"] = args.n
        threads = _threads(args.threads)
        if threads is not None:
            cfg["threads"] = threads
        if args.out is not None:
            cfg["output"] = args.out
        if args.command == "curve":
            cfg.setdefault("curve", {})
        cfg = parse_config(cfg)
        doc = execute(cfg, mode=args.command)
    except ConfigError as exc:
        print(f"worstdep: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"worstdep: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"worstdep: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    best = doc["best"]
    print(f"best quantile {format_float(best['quantile'])} "
          f"[{format_float(best['ci_lo'])}, {format_float(best['ci_hi'])}] "
          f"after {doc['evaluations']} evaluations; outputs in {cfg['output']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
