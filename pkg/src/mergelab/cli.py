"""``mergelab`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation or format error,
3 numeric or degenerate error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import __version__
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .errors import ArgumentError, DegenerateError, FormatError, MergeLabError, ValidationError, SchemaError
from .merge import DareConfig, TiesConfig, dare_ties_merge, linear_merge, ties_merge
from .similarity import (
    DEFAULT_LAYER_PATTERN,
    LayerGrouping,
    cka_profile,
    load_activations,
    report_to_csv,
    similarity_report,
)
from .stats import bootstrap_ci, correlate_measures, correlation_rows_to_csv, merge_delta, read_score_table
from .toy import plots
from .toy.experiment import (
    MEASURES,
    RECORD_COLUMNS,
    SPECTRUM_COLUMNS,
    TRAJECTORY_COLUMNS,
    ExperimentConfig,
    read_spectrum_csv,
)
from .toy.pipeline import run_spectrum, run_toy, spectrum_svg

log = logging.getLogger("mergelab")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_DEGENERATE = 0, 1, 2, 3

RECIPE_KEYS = {"method", "inputs", "weights", "base", "density", "lambda", "drop_prob", "seed", "output"}
RECIPE_METHOD_KEYS = {
    "linear": {"weights"},
    "ties": {"base", "density", "lambda"},
    "dare_ties": {"base", "density", "lambda", "drop_prob", "seed"},
}


class UsageError(Exception):
    """Bad command-line usage detected after argument parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- output helpers ---------------------------------------------------------------

def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".provenance.json")


def _write_sidecar(path: Path, payload: dict[str, Any]) -> None:
    payload = dict(payload)
    payload["output"] = {"path": path.name, "sha256": file_digest(path)}
    _sidecar_path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _emit_text(args: argparse.Namespace, text: str, provenance: dict[str, Any]) -> None:
    """Write ``text`` to --output (with sidecar) and/or to stdout."""
    if args.output is None and not args.stdout:
        raise UsageError("give --output PATH or --stdout")
    if args.output is not None:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_sidecar(out, provenance)
        log.info("wrote %s", out)
    if args.stdout:
        sys.stdout.write(text)


def _inputs_provenance(paths: dict[str, str | None]) -> dict[str, Any]:
    return {k: {"path": str(p), "sha256": file_digest(p)} for k, p in paths.items() if p is not None}


# -- merge ------------------------------------------------------------------------

def load_recipe(path: str | Path) -> tuple[dict[str, Any], bytes]:
    """Parse and validate a merge recipe; paths are resolved against its directory."""
    path = Path(path)
    raw_bytes = path.read_bytes()
    try:
        recipe = json.loads(raw_bytes)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(recipe, dict):
        raise SchemaError(f"{path}: recipe must be a JSON object")
    unknown = sorted(set(recipe) - RECIPE_KEYS)
    if unknown:
        raise SchemaError(f"{path}: unknown recipe keys: {', '.join(unknown)}")
    method = recipe.get("method")
    if method not in RECIPE_METHOD_KEYS:
        raise SchemaError(f"{path}: field 'method' must be one of {sorted(RECIPE_METHOD_KEYS)}, got {method!r}")
    inputs = recipe.get("inputs")
    if not isinstance(inputs, list) or not inputs or not all(isinstance(p, str) for p in inputs):
        raise SchemaError(f"{path}: field 'inputs' must be a non-empty list of paths")
    if method != "linear" and not isinstance(recipe.get("base"), str):
        raise SchemaError(f"{path}: field 'base' is required for method {method!r}")
    misplaced = sorted((set(recipe) - {"method", "inputs", "output"}) - RECIPE_METHOD_KEYS[method])
    if misplaced:
        raise SchemaError(f"{path}: method {method!r} does not use {', '.join(misplaced)}")
    for key in ("density", "lambda", "drop_prob"):
        if key in recipe and (isinstance(recipe[key], bool) or not isinstance(recipe[key], (int, float))):
            raise SchemaError(f"{path}: field {key!r} must be a number")
    if "seed" in recipe and (isinstance(recipe["seed"], bool) or not isinstance(recipe["seed"], int)):
        raise SchemaError(f"{path}: field 'seed' must be an integer")
    if "weights" in recipe:
        w = recipe["weights"]
        if not isinstance(w, list) or len(w) != len(inputs) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in w):
            raise SchemaError(f"{path}: field 'weights' must list one number per input")
    if "output" in recipe and not isinstance(recipe["output"], str):
        raise SchemaError(f"{path}: field 'output' must be a path")

    here = path.parent
    resolved = dict(recipe)
    resolved["inputs"] = [str(here / p) for p in inputs]
    for key in ("base", "output"):
        if key in recipe:
            resolved[key] = str(here / recipe[key])
    return resolved, raw_bytes


def cmd_merge(args: argparse.Namespace) -> int:
    recipe, raw = load_recipe(args.recipe)
    out = args.output or recipe.get("output")
    if out is None:
        raise UsageError("no output path: set 'output' in the recipe or pass --output")
    method = recipe["method"]
    inputs = [load_checkpoint(p) for p in recipe["inputs"]]
    params: dict[str, Any] = {"method": method}
    if method == "linear":
        merged = linear_merge(inputs, recipe.get("weights"))
        params["weights"] = recipe.get("weights")
    else:
        base = load_checkpoint(recipe["base"])
        ties = TiesConfig(recipe.get("density", TiesConfig.density), recipe.get("lambda", TiesConfig.lam))
        params.update(density=ties.density, **{"lambda": ties.lam})
        if method == "ties":
            merged = ties_merge(base, inputs, ties)
        else:
            seed = args.seed if args.seed is not None else recipe.get("seed", DareConfig.seed)
            dare = DareConfig(recipe.get("drop_prob", DareConfig.drop_prob), seed)
            params.update(drop_prob=dare.drop_prob, seed=dare.seed)
            merged = dare_ties_merge(base, inputs, dare, ties)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, out_path)
    provenance = {
        "command": "merge",
        "recipe": {"path": str(args.recipe), "sha256": _sha256_bytes(raw)},
        "inputs": [{"path": p, "sha256": file_digest(p)} for p in recipe["inputs"]],
        "parameters": params,
    }
    if "base" in recipe:
        provenance["base"] = {"path": recipe["base"], "sha256": file_digest(recipe["base"])}
    _write_sidecar(out_path, provenance)
    log.info("wrote %s", out_path)
    if args.stdout:
        sys.stdout.write(json.dumps({"output": str(out_path), "sha256": file_digest(out_path)}) + "\n")
    return EXIT_OK


# -- diff / cka -----------------------------------------------------------------------

def _activation_pair(args: argparse.Namespace):
    a, b = args.activations_a, args.activations_b
    if (a is None) != (b is None):
        raise UsageError("--activations-a and --activations-b go together")
    if a is None:
        return None
    return load_activations(a), load_activations(b)


def cmd_diff(args: argparse.Namespace) -> int:
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    grouping = LayerGrouping(args.grouping)
    acts = _activation_pair(args)
    report = similarity_report(a, b, grouping, acts)
    if acts is not None and any(r.cka is None for r in report.per_layer if r.layer != "other"):
        log.warning("CKA is undefined for some layers (constant activations); cells left empty")
    text = report_to_csv(report, include_cka=acts is not None)
    prov = {
        "command": "diff",
        "inputs": _inputs_provenance({"a": args.a, "b": args.b, "activations_a": args.activations_a, "activations_b": args.activations_b}),
        "parameters": {"grouping": args.grouping},
    }
    _emit_text(args, text, prov)
    return EXIT_OK


def cmd_cka(args: argparse.Namespace) -> int:
    acts = _activation_pair(args)
    if acts is None:
        raise UsageError("cka needs --activations-a and --activations-b")
    prof = cka_profile(*acts, seed=args.seed if args.seed is not None else 0)
    if any(v is None for v in prof.per_layer):
        log.warning("CKA is undefined for some layers (constant activations); cells left empty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "cka"])
    for i, v in enumerate(prof.per_layer):
        w.writerow([i, "" if v is None else repr(v)])
    w.writerow(["mean", "" if prof.mean is None else repr(prof.mean)])
    prov = {"command": "cka", "inputs": _inputs_provenance({"activations_a": args.activations_a, "activations_b": args.activations_b})}
    _emit_text(args, buf.getvalue(), prov)
    return EXIT_OK


# -- delta / correlate ------------------------------------------------------------------

DELTA_COLUMNS = (
    "expert_a", "task_a", "expert_b", "task_b", "merged",
    "expert_acc_a", "expert_acc_b", "merged_acc_a", "merged_acc_b", "delta", "delta_pp",
    "merged_se_a", "merged_se_b",
)


def _model_task(spec: str) -> tuple[str, str]:
    model, sep, task = spec.partition(":")
    if not sep or not model or not task:
        raise UsageError(f"expected MODEL:TASK, got {spec!r}")
    return model, task


def cmd_delta(args: argparse.Namespace) -> int:
    table = read_score_table(args.scores)
    (ea, ta), (eb, tb) = _model_task(args.expert_a), _model_task(args.expert_b)
    seed = args.seed if args.seed is not None else 0
    expert = (table.accuracy(ea, ta), table.accuracy(eb, tb))
    merged = (table.accuracy(args.merged, ta), table.accuracy(args.merged, tb))
    rec = merge_delta(expert, merged, pair=(ea, eb))
    se_a = bootstrap_ci(table.items(args.merged, ta), seed=seed).se
    se_b = bootstrap_ci(table.items(args.merged, tb), seed=seed).se
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DELTA_COLUMNS)
    w.writerow([ea, ta, eb, tb, args.merged, *map(repr, expert), *map(repr, merged),
                repr(rec.delta), repr(100.0 * rec.delta), repr(se_a), repr(se_b)])
    prov = {"command": "delta", "inputs": _inputs_provenance({"scores": args.scores}),
            "parameters": {"expert_a": args.expert_a, "expert_b": args.expert_b, "merged": args.merged, "seed": seed}}
    _emit_text(args, buf.getvalue(), prov)
    return EXIT_OK


def read_measure_table(path: str, method: str | None) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = list(reader.fieldnames or [])
        rows = list(reader)
    if "delta" not in cols:
        raise SchemaError(f"{path}: needs a 'delta' column")
    if method is not None:
        if "method" not in cols:
            raise SchemaError(f"{path}: --method given but the table has no 'method' column")
        rows = [r for r in rows if r["method"] == method]
    return cols, rows


def cmd_correlate(args: argparse.Namespace) -> int:
    cols, rows = read_measure_table(args.table, args.method)
    if "method" in cols and args.method is None and len({r["method"] for r in rows}) > 1:
        raise UsageError("the table mixes merge methods; pick one with --method")
    if args.measures:
        measures = args.measures.split(",")
    else:  # known measures first, in the toy-run order, then any other mean_* columns
        extra = sorted(c for c in cols if c.startswith("mean_") and c not in MEASURES)
        measures = [m for m in MEASURES if m in cols] + extra
    if not measures:
        raise UsageError("no measure columns found; pass --measures")
    missing = [m for m in measures if m not in cols]
    if missing:
        raise SchemaError(f"{args.table}: missing columns {', '.join(missing)}")
    seed = args.seed if args.seed is not None else 0
    reports = {}
    for m in measures:
        pairs = []
        for r in rows:
            if r[m] == "":
                continue
            try:
                pairs.append((float(r[m]), -float(r["delta"])))
            except ValueError:
                raise SchemaError(f"{args.table}: non-numeric value in column {m!r} or 'delta'") from None
        if len(pairs) < 3:
            raise ArgumentError(f"measure {m!r}: need at least 3 rows, have {len(pairs)}")
        reports[m] = correlate_measures(pairs, permutation=args.permutation_p, seed=seed)
    prov = {"command": "correlate", "inputs": _inputs_provenance({"table": args.table}),
            "parameters": {"method": args.method, "measures": measures, "permutation_p": args.permutation_p, "seed": seed,
                           "target": "-delta"}}
    _emit_text(args, correlation_rows_to_csv(reports), prov)
    return EXIT_OK


# -- toy lab ----------------------------------------------------------------------------

def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        raise UsageError("--config is required")
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def cmd_toy_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = Path(args.output or cfg.output_dir)
    res = run_toy(cfg, out, threads=args.threads, permutation=args.permutation_p)
    if args.stdout:
        sys.stdout.write((out / "records.csv").read_text())
    log.info("wrote %d files to %s", len(res.files), out)
    return EXIT_OK


def cmd_toy_spectrum(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = Path(args.output or cfg.output_dir)
    res = run_spectrum(cfg, out, threads=args.threads)
    if args.stdout:
        sys.stdout.write((out / "spectrum.csv").read_text())
    log.info("wrote %d files to %s", len(res.files), out)
    return EXIT_OK


# -- report -------------------------------------------------------------------------------

def _report_one(path: Path, out_dir: Path, measure: str, method: str | None, chance: float) -> list[Path]:
    text = path.read_text()
    header = next(csv.reader(io.StringIO(text)), None)
    header = tuple(header or ())
    stem = path.stem
    written: list[Path] = []
    if header == SPECTRUM_COLUMNS:
        rows = read_spectrum_csv(text)
        if not rows:
            raise SchemaError(f"{path}: no rows to plot")
        svg = spectrum_svg(rows, chance, f"per-task accuracy vs merged experts ({stem})")
        written.append(_write_svg(out_dir / f"{stem}.svg", svg))
    elif header == RECORD_COLUMNS:
        if measure not in RECORD_COLUMNS or not measure.startswith("mean_"):
            raise UsageError(f"--measure must be one of the mean_* columns, got {measure!r}")
        rows = list(csv.DictReader(io.StringIO(text)))
        methods = sorted({r["method"] for r in rows})
        if not rows:
            raise SchemaError(f"{path}: no rows to plot")
        chosen = method or ("linear" if "linear" in methods else methods[0])
        pts = [r for r in rows if r["method"] == chosen and r[measure] != ""]
        if len(pts) < 3:
            raise SchemaError(f"{path}: fewer than 3 {chosen} rows with {measure}")
        svg = plots.scatter_fit(
            [float(r[measure]) for r in pts], [-float(r["delta"]) for r in pts],
            title=f"{measure} vs -delta ({chosen} merge)", xlabel=measure, ylabel="-delta",
            groups=[r["init_mode"] for r in pts],
        )
        written.append(_write_svg(out_dir / f"{stem}_{measure}.svg", svg))
    elif header == TRAJECTORY_COLUMNS:
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise SchemaError(f"{path}: no rows to plot")
        series: dict[str, tuple[list[float], list[float]]] = {}
        for r in rows:
            xs, ys = series.setdefault(f"{r['model']} task {r['task']}", ([], []))
            xs.append(float(r["epoch"]))
            ys.append(float(r["accuracy"]))
        svg = plots.line_chart(dict(sorted(series.items())), f"accuracy over training ({stem})", "epoch", "accuracy", ylim=(0.0, 1.05))
        written.append(_write_svg(out_dir / f"{stem}.svg", svg))
    else:
        raise SchemaError(f"{path}: header {', '.join(header) or '(empty)'} matches no known CSV schema")
    return written


def _write_svg(path: Path, svg: str) -> Path:
    path.write_text(svg)
    return path


def cmd_report(args: argparse.Namespace) -> int:
    if args.output is None:
        raise UsageError("report needs --output DIR")
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for p in args.inputs:
        written.extend(_report_one(Path(p), out_dir, args.measure, args.method, args.chance))
    for svg in written:
        _write_sidecar(svg, {"command": "report", "inputs": _inputs_provenance({str(i): p for i, p in enumerate(args.inputs)}),
                             "parameters": {"measure": args.measure, "method": args.method}})
    if args.stdout:
        sys.stdout.write("".join(f"{w}\n" for w in written))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", "-o", help="output file (or directory for toy-run, toy-spectrum, report)")
    common.add_argument("--stdout", action="store_true", help="also write the machine-readable result to standard output")
    common.add_argument("--seed", type=int, help="seed override for any randomness the command uses")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more progress output on standard error")

    p = _Parser(prog="mergelab", description="Model merging, similarity diagnostics, statistics, and a toy merge lab.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("merge", parents=[common], help="merge checkpoints from a JSON recipe")
    m.add_argument("--recipe", required=True)
    m.set_defaults(func=cmd_merge)

    d = sub.add_parser("diff", parents=[common], help="layer-wise similarity of two checkpoints as CSV")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--grouping", default=DEFAULT_LAYER_PATTERN, help="regex whose first group is the layer index")
    d.add_argument("--activations-a")
    d.add_argument("--activations-b")
    d.set_defaults(func=cmd_diff)

    c = sub.add_parser("cka", parents=[common], help="layer-wise linear CKA of two activation files")
    c.add_argument("--activations-a")
    c.add_argument("--activations-b")
    c.set_defaults(func=cmd_cka)

    dl = sub.add_parser("delta", parents=[common], help="merge delta from a per-item score table")
    dl.add_argument("scores")
    dl.add_argument("--expert-a", required=True, metavar="MODEL:TASK")
    dl.add_argument("--expert-b", required=True, metavar="MODEL:TASK")
    dl.add_argument("--merged", required=True, metavar="MODEL")
    dl.set_defaults(func=cmd_delta)

    co = sub.add_parser("correlate", parents=[common], help="Spearman and Pearson of measures against -delta")
    co.add_argument("table", help="CSV with a delta column and measure columns (e.g. records.csv)")
    co.add_argument("--measures", help="comma-separated columns (default: every mean_* column)")
    co.add_argument("--method", help="keep only rows for this merge method")
    co.add_argument("--permutation-p", action="store_true", help="10,000-draw permutation p-values instead of the t approximation")
    co.set_defaults(func=cmd_correlate)

    for name, func, helptext in (
        ("toy-run", cmd_toy_run, "pairwise toy merge experiment"),
        ("toy-spectrum", cmd_toy_spectrum, "cumulative k-expert toy merges"),
    ):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--config", required=True)
        t.add_argument("--threads", type=int, default=1, help="worker threads (speed only; results are identical)")
        if name == "toy-run":
            t.add_argument("--permutation-p", action="store_true")
        t.set_defaults(func=func)

    r = sub.add_parser("report", parents=[common], help="SVG plots from spectrum, records, or trajectory CSVs")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--measure", default="mean_cka", help="records CSV column to plot against -delta")
    r.add_argument("--method", help="merge method to plot from a records CSV")
    r.add_argument("--chance", type=float, default=0.25, help="chance accuracy drawn on spectrum plots (1/n_classes)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (FormatError, ValidationError, ArgumentError, OSError) as exc:
        print(f"mergelab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DegenerateError as exc:
        print(f"mergelab: numeric error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except MergeLabError as exc:
        print(f"mergelab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
