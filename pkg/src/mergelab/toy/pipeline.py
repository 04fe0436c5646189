"""Run toy experiments from a config and write CSVs, SVGs, and a manifest."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from ..stats import correlation_rows_to_csv
from . import plots
from .experiment import (
    ExperimentConfig,
    ExperimentRecord,
    SpectrumRow,
    cka_delta_study,
    pairwise_records,
    records_to_csv,
    spectrum_from_experts,
    spectrum_summary,
    spectrum_to_csv,
    train_experts,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass
class RunOutputs:
    files: dict[str, str]  # relative name -> sha256
    records: list[ExperimentRecord] | None = None
    spectrum: list[SpectrumRow] | None = None


def _write(out: Path, name: str, text: str, files: dict[str, str]) -> None:
    data = text.encode()
    (out / name).write_bytes(data)
    files[name] = hashlib.sha256(data).hexdigest()


def _write_manifest(out: Path, kind: str, config: ExperimentConfig, files: dict[str, str], extra: dict | None = None) -> None:
    manifest = {"kind": kind, "config": config.to_dict(), "files": dict(sorted(files.items()))}
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def correlation_method(config: ExperimentConfig) -> str:
    names = [m.name for m in config.methods]
    return "linear" if "linear" in names else names[0]


def scatter_svg(records: list[ExperimentRecord], method: str, measure: str = "mean_cka") -> str:
    pts = [(r.measure(measure), -r.deltas[method].delta, r.init_mode) for r in records if r.measure(measure) is not None]
    return plots.scatter_fit(
        [p[0] for p in pts], [p[1] for p in pts],
        title=f"{measure} vs -delta ({method} merge)", xlabel=measure, ylabel="-delta",
        groups=[p[2] for p in pts],
    )


def spectrum_svg(rows: list[SpectrumRow], chance: float, title: str) -> str:
    by_task: dict[int, tuple[list[float], list[float]]] = {}
    for r in rows:
        xs, ys = by_task.setdefault(r.task, ([], []))
        xs.append(r.k)
        ys.append(r.accuracy)
    series = {f"task {t}": v for t, v in sorted(by_task.items())}
    summary = spectrum_summary(rows)
    series["mean (in merge)"] = (list(summary), list(summary.values()))
    return plots.line_chart(series, title, "experts merged (k)", "accuracy", hline=chance, ylim=(0.0, 1.05))


def run_toy(config: ExperimentConfig, output_dir: str | Path | None = None, threads: int = 1,
            permutation: bool = False) -> RunOutputs:
    """Pairwise merges for every configured init mode, then the similarity/delta study."""
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = config.tasks()
    records: list[ExperimentRecord] = []
    for mode in config.modes:
        log.info("training %d %s-init experts", len(tasks), mode)
        es = train_experts(tasks, mode, config, threads)
        log.info("merging %d pairs", len(tasks) * (len(tasks) - 1) // 2)
        records.extend(pairwise_records(es, config, threads))
    files: dict[str, str] = {}
    _write(out, "records.csv", records_to_csv(records), files)
    method = correlation_method(config)
    if len(records) >= 3:
        study = cka_delta_study(records, method, permutation=permutation, seed=config.seed)
        _write(out, "correlation.csv", correlation_rows_to_csv(study), files)
        if config.plots:
            _write(out, "cka_vs_delta.svg", scatter_svg(records, method), files)
    else:
        log.warning("only %d records; skipping the correlation study", len(records))
    _write_manifest(out, "toy-run", config, files, {"correlation_method": method, "permutation_p": permutation})
    return RunOutputs(files, records=records)


def run_spectrum(config: ExperimentConfig, output_dir: str | Path | None = None, threads: int = 1) -> RunOutputs:
    """Cumulative merges k = 1..n for the first configured init mode."""
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = config.tasks()
    mode = config.modes[-1]  # "both" -> independent, the collapse setting
    es = train_experts(tasks, mode, config, threads)
    rows = spectrum_from_experts(es, config.order_seed, config.method(config.spectrum_method), config.seed)
    files: dict[str, str] = {}
    _write(out, "spectrum.csv", spectrum_to_csv(rows), files)
    if config.plots:
        title = f"{config.spectrum_method} merges, {mode} init"
        _write(out, "spectrum.svg", spectrum_svg(rows, tasks[0].chance, title), files)
    _write_manifest(out, "toy-spectrum", config, files, {"init_mode": mode})
    return RunOutputs(files, spectrum=rows)
