"""Command-line entry point: ``prdarts {gen-data,search,prune,theory}``.

Exit codes: 0 success, 2 configuration or schema error, 3 numeric divergence.
Config precedence is CLI flag, then config file, then built-in default.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cell import CellGraph, THEORY_OPS, build_multi_cell
from .conv import ConfigError
from .dataio import DataFormatError, Dataset, generate_synthetic, load_binary, save_binary
from .export import SchemaError, export_dot, export_json, import_json, prune
from .search import TRACE_HEADER, DivergenceError, SearchConfig, run_search

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
THEORY_MODES = ("lambda", "gram", "contraction", "shallow-deep", "sensitivity", "skipfrac")


class UsageError(Exception):
    """Bad config file, unknown key, or unreadable input; maps to exit code 2."""


# -- file helpers ---------------------------------------------------------------
def atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
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
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return doc


def write_manifest(out: Path, command: str, config: dict, inputs: dict[str, bytes], outputs: list[str]) -> str:
    """Manifest with a content hash over the config snapshot and input bytes."""
    h = hashlib.sha256()
    h.update(dump_json({"command": command, "config": config}).encode())
    for name in sorted(inputs):
        h.update(name.encode())
        h.update(hashlib.sha256(inputs[name]).digest())
    digest = h.hexdigest()
    files = {}
    for name in sorted(outputs):
        files[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    manifest = {
        "run_id": f"{command}-{digest[:12]}",
        "command": command,
        "version": __version__,
        "config": config,
        "content_hash": digest,
        "outputs": files,
    }
    atomic_write(out / "manifest.json", dump_json(manifest))
    return digest


def max_workers(n: int) -> int:
    cap = os.environ.get("PRDK_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError as exc:
            raise UsageError(f"PRDK_THREADS must be an integer, got {cap!r}") from exc
    return max(1, min(n, limit))


def fan_out(fn, jobs: list):
    """Run independent jobs, results returned in job order regardless of completion order."""
    workers = max_workers(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# -- gen-data ------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = {"n": 64, "m": 3, "p": 8, "seed": 0, "label_noise": 0.0}
    file_cfg = read_config(args.config)
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise UsageError(f"unknown gen-data keys: {sorted(unknown)}")
    cfg.update(file_cfg)
    for key in ("n", "m", "p", "seed"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(int(cfg["n"]), int(cfg["m"]), int(cfg["p"]), int(cfg["seed"]),
                            label_noise=float(cfg["label_noise"]))
    save_binary(ds, out / "data.prdk")
    write_manifest(out, "gen-data", cfg, {}, ["data.prdk"])
    print(f"wrote {len(ds)} samples of shape {ds.shape} to {out / 'data.prdk'}")
    return EXIT_OK


# -- search -------------------------------------------------------------------------
def _search_setup(args) -> tuple[SearchConfig, dict]:
    raw = read_config(args.config)
    data_cfg = dict(raw.pop("data", {}) or {})
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.mode is not None:
        raw["mode"] = args.mode
    try:
        cfg = SearchConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid search config: {exc}") from exc
    if args.data is not None:
        data_cfg["path"] = args.data
    bad = set(data_cfg) - {"path", "n", "seed", "label_noise"}
    if bad:
        raise UsageError(f"unknown data keys: {sorted(bad)}")
    return cfg, data_cfg


def _load_search_data(cfg: SearchConfig, data_cfg: dict) -> tuple[Dataset, bytes]:
    shape = (cfg.network.in_channels, cfg.network.length)
    if "path" in data_cfg:
        p = Path(data_cfg["path"])
        if not p.is_file():
            raise UsageError(f"data file not found: {p}")
        raw = p.read_bytes()
        return load_binary(p, expect_shape=shape), raw
    ds = generate_synthetic(int(data_cfg.get("n", 64)), *shape, seed=int(data_cfg.get("seed", cfg.seed)),
                            label_noise=float(data_cfg.get("label_noise", 0.0)))
    return ds, b""


def search_once(job: tuple[dict, dict, str]) -> tuple[str, int, str]:
    """Worker body: one seeded search writing trace.csv, state.json and the manifest."""
    cfg_dict, data_cfg, out = job
    cfg = SearchConfig.from_dict(cfg_dict)
    out_dir = Path(out)
    try:
        ds, raw = _load_search_data(cfg, data_cfg)
        result = run_search(cfg, ds)
    except DivergenceError as exc:
        return out, EXIT_DIVERGED, str(exc)
    atomic_write(out_dir / "trace.csv", csv_text(TRACE_HEADER, (r.row() for r in result.trace)))
    meta = {
        "tau_g": result.final_temperature,
        "search": cfg.to_dict(),
        "steps": len(result.trace),
    }
    atomic_write(out_dir / "state.json", export_json(result.net, meta))
    snapshot = {"search": cfg.to_dict(), "data": data_cfg}
    write_manifest(out_dir, "search", snapshot, {"data": raw}, ["trace.csv", "state.json"])
    last = result.trace[-1] if result.trace else None
    msg = f"{len(result.trace)} steps" + (f", final f_val {last.f_val:.6g}" if last else "")
    return out, EXIT_OK, msg


def cmd_search(args) -> int:
    cfg, data_cfg = _search_setup(args)
    out = Path(args.out)
    trials = args.trials or 1
    if trials == 1:
        jobs = [(cfg.to_dict(), data_cfg, str(out))]
    else:
        jobs = [
            ({**cfg.to_dict(), "seed": cfg.seed + i}, data_cfg, str(out / f"trial_{i:03d}"))
            for i in range(trials)
        ]
    code = EXIT_OK
    for path, rc, msg in fan_out(search_once, jobs):
        print(f"{path}: {msg}")
        code = max(code, rc)
    return code


# -- prune --------------------------------------------------------------------------
def cmd_prune(args) -> int:
    state = Path(args.state)
    if not state.is_file():
        raise UsageError(f"state file not found: {state}")
    raw = state.read_bytes()
    net, meta = import_json(raw.decode("utf-8", errors="replace"))
    if isinstance(net, list):
        raise SchemaError("expected a supernet state, found discrete cells")
    tau_g = meta.get("tau_g")
    tau_g = 1.0 if tau_g is None else float(tau_g)
    out = Path(args.out)
    cells = [prune(net, kind, tau_g) for kind in sorted(net.betas)]
    atomic_write(out / "cell.json", export_json(cells, {"tau_g": tau_g, "source": state.name}))
    written = ["cell.json"]
    for cell in cells:
        name = "cell.dot" if cell.cell_type == "normal" else f"cell_{cell.cell_type}.dot"
        atomic_write(out / name, export_dot(cell))
        written.append(name)
    write_manifest(out, "prune", {"tau_g": tau_g}, {"state": raw}, written)
    print(f"pruned {len(cells)} cell type(s) into {out}")
    return EXIT_OK


# -- theory -------------------------------------------------------------------------
def _theory_config(args):
    from .theory import TheoryConfig

    raw = read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.trials is not None:
        raw["trials"] = args.trials
    try:
        return TheoryConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid theory config: {exc}") from exc


def _weights_from_config(cfg, h: int, rng) -> np.ndarray:
    from .theory import random_weighting

    graph = CellGraph(h, THEORY_OPS)
    if cfg.weights is None:
        return random_weighting(graph, rng, cfg.weighting_kind)
    w = np.asarray(cfg.weights, dtype=np.float64)
    if w.shape != (graph.num_edges, graph.r):
        raise UsageError(f"weights must have shape {(graph.num_edges, graph.r)}, got {w.shape}")
    return w


def theory_lambda(cfg):
    from .theory import lambda_min_K, lambda_theorem1, theory_dataset

    ds = theory_dataset(cfg)
    k_printed = lambda_min_K(ds.inputs, "printed")
    k_sym = lambda_min_K(ds.inputs, "symmetric")
    rng = np.random.default_rng(cfg.seed)
    count = 1 if cfg.weights is not None else cfg.weightings
    rows = []
    for i in range(count):
        w = _weights_from_config(cfg, cfg.h, rng)
        rows.append((i, lambda_theorem1(w, cfg.h, k_printed, cfg.c_sigma), lambda_theorem1(w, cfg.h, k_sym, cfg.c_sigma)))
    report = dict(lambda_formula=rows[0][1], lambda_min_k=k_printed, lambda_min_k_symmetric=k_sym,
                  values={"lambda_symmetric": [r[2] for r in rows]})
    return ("weighting", "lambda", "lambda_symmetric"), rows, report


def theory_gram(cfg):
    from .theory import gram_matrix, theory_dataset

    ds = theory_dataset(cfg)
    net = build_multi_cell(cfg.network(), np.random.default_rng(cfg.seed))
    w = _weights_from_config(cfg, cfg.h, np.random.default_rng(cfg.seed + 1))
    g, min_eig = gram_matrix(net, ds.inputs, ds.targets, {"normal": w})
    rows = [(i, j, g[i, j]) for i in range(len(g)) for j in range(len(g))]
    asym = float(np.max(np.abs(g - g.T)))
    tr = float(np.trace(g))
    report = dict(
        gram_min_eig=min_eig,
        verdicts={"symmetric": asym < 1e-10, "psd": min_eig >= -1e-8 * tr / len(g)},
        values={"eigenvalues": np.linalg.eigvalsh(0.5 * (g + g.T)).tolist(), "max_asymmetry": asym},
    )
    return ("i", "j", "g"), rows, report


def theory_contraction(cfg):
    from .theory import lambda_contraction_study

    study = lambda_contraction_study(cfg)
    rows = [(r["weighting"], r["lambda"], r["geo_mean_ratio"], r["max_ratio"], r["rate"], int(r["diverged"]))
            for r in study["rows"]]
    report = dict(
        lambda_min_k_symmetric=study["lambda_min_k"],
        empirical_contraction=[r["geo_mean_ratio"] for r in study["rows"]],
        verdicts={"spearman_at_least_0.6": study["spearman"] >= 0.6},
        values={"spearman": study["spearman"]},
    )
    return ("weighting", "lambda", "geo_mean_ratio", "max_ratio", "rate", "diverged"), rows, report


def theory_shallow_deep(cfg):
    from .theory import compare_shallow_deep

    h = cfg.h_compare
    graph = CellGraph(h, THEORY_OPS)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for i in range(cfg.draws):
        g = rng.random((graph.num_edges, graph.r))
        lam_a, lam_b, ok = compare_shallow_deep(g, h, 1.0, cfg.c_sigma)
        rows.append((i, lam_a, lam_b, int(ok)))
    report = dict(verdicts={"lambda_b_ge_lambda_a": all(r[3] for r in rows)}, values={"h": h})
    return ("draw", "lambda_a", "lambda_b", "verdict"), rows, report


def theory_sensitivity(cfg):
    from .theory import gate_sensitivity, theory_dataset

    rows = []
    negative_skip = 0
    for t in range(cfg.trials):
        seed = cfg.seed + t
        ds = theory_dataset(cfg, seed)
        net = build_multi_cell(cfg.network(), np.random.default_rng(seed))
        gates = _weights_from_config(cfg, cfg.h, np.random.default_rng(seed + 1))
        res = gate_sensitivity(net, ds.inputs, ds.targets, gates, cfg.epsilon)
        for (e, op), val in np.ndenumerate(res.analytic):
            rows.append((t, e, net.graph.ops[op].label, val, res.forward_difference[e, op], res.central_difference[e, op]))
        negative_skip += res.by_kind["skip"]["mean"] <= 0
    report = dict(
        verdicts={"skip_mean_nonpositive_majority": negative_skip >= math.ceil(0.8 * cfg.trials)},
        values={"trials_with_nonpositive_skip_mean": negative_skip},
    )
    return ("trial", "edge", "op", "analytic", "forward_difference", "central_difference"), rows, report


def theory_skipfrac(cfg):
    from .theory import skip_fraction_experiment

    curves = skip_fraction_experiment(cfg.fractions, cfg.trials, cfg, h=5)
    means = {f: c.mean(axis=0) for f, c in curves.items()}
    header = ("step",) + tuple(f"fraction_{f:g}" for f in cfg.fractions)
    steps = len(next(iter(means.values())))
    rows = [(k,) + tuple(means[f][k] for f in cfg.fractions) for k in range(steps)]
    finals = [float(means[f][-1]) for f in cfg.fractions]
    report = dict(
        verdicts={"final_loss_strictly_decreasing": all(b < a for a, b in zip(finals, finals[1:]))},
        values={"final_mean_loss": dict(zip(map(str, cfg.fractions), finals))},
    )
    return header, rows, report


THEORY_DISPATCH = {
    "lambda": theory_lambda,
    "gram": theory_gram,
    "contraction": theory_contraction,
    "shallow-deep": theory_shallow_deep,
    "sensitivity": theory_sensitivity,
    "skipfrac": theory_skipfrac,
}


def cmd_theory(args) -> int:
    from .theory import TheoryReport

    mode = args.mode
    if mode not in THEORY_DISPATCH:
        raise UsageError(f"unknown theory mode {mode!r}; choose from {', '.join(THEORY_MODES)}")
    cfg = _theory_config(args)
    header, rows, fields = THEORY_DISPATCH[mode](cfg)
    report = TheoryReport(mode=mode, config=cfg.to_dict(), metadata={"c_sigma_note": "fixed at c_sigma, orderings only",
                                                                        "mu": cfg.mu, "rho": cfg.rho}, **fields)
    out = Path(args.out)
    stem = mode.replace("-", "_")
    atomic_write(out / f"{stem}.csv", csv_text(header, rows))
    atomic_write(out / f"{stem}_report.json", dump_json(report.to_dict()))
    write_manifest(out, f"theory-{mode}", cfg.to_dict(), {}, [f"{stem}.csv", f"{stem}_report.json"])
    for k, v in report.verdicts.items():
        print(f"{k}: {v}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prdarts", description="Toy-scale architecture search and theory probes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic PRDK dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--m", type=int)
    g.add_argument("--p", type=int)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("search", help="run an architecture search")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=("darts", "prdarts"))
    s.add_argument("--data", help="PRDK dataset; synthetic data is generated when omitted")
    s.add_argument("--trials", type=int, help="independent runs with consecutive seeds")
    s.set_defaults(func=cmd_search)

    p = sub.add_parser("prune", help="discretize a searched state into cell.json and DOT files")
    p.add_argument("--state", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    t = sub.add_parser("theory", help="closed-form factors and empirical probes")
    t.add_argument("--mode", required=True, help=f"one of: {', '.join(THEORY_MODES)}")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--trials", type=int)
    t.set_defaults(func=cmd_theory)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, SchemaError, DataFormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
