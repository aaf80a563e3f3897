"""Run directories, pretrain/probe orchestration and the toggle experiment matrix.

Run directory layout::

    config.echo            config text exactly as given
    config.resolved.json   fully-defaulted config and its fingerprint
    metrics.jsonl          one line per pretraining epoch
    checkpoints/           epoch_XXXX.ckpt per checkpoint policy, plus last.ckpt
    reports/               EvalReport JSON per downstream task
    traces.jsonl           augmentation traces (only with trace_augs)
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import AugConfig, dataset_stats
from .config import ConfigError, RunConfig, build_config, dump_config, fingerprint, merge
from .data import DatasetManifest, EvalReport, Task, load_image, load_manifest
from .evaluate import (
    DownstreamConfig,
    Mode,
    knn_face_verification,
    run_downstream,
    split_by_identity,
    verification_pairs,
)
from .models import Encoder, load_checkpoint, read_checkpoint_header
from .pretrain import STRATEGIES, EpochStats, Pretrainer
from .synthetic import generate_corpus, generate_labeled_set, load_labels

log = logging.getLogger(__name__)


@dataclass
class ExperimentData:
    manifest: DatasetManifest
    labels: dict
    probe_train: tuple[DatasetManifest, dict]
    probe_test: tuple[DatasetManifest, dict]
    fr_pairs: list
    aug: AugConfig


_DATA_CACHE: dict[str, ExperimentData] = {}


def prepare_data(cfg: RunConfig, labels_path: str | Path | None = None) -> ExperimentData:
    """Pretraining corpus, identity-disjoint probe splits and FR pairs.

    Synthetic data is derived from the top-level seed; results are memoized
    per (data section, seed, augmentation section).
    """
    d = cfg.data
    key = fingerprint({"data": cfg.to_dict()["data"], "aug": cfg.to_dict()["augmentation"],
                       "seed": cfg.seed, "labels": str(labels_path)})
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    seed = cfg.seed
    if d.manifest is None:
        manifest, labels = generate_corpus(d.n_identities, d.videos_per_id, d.duration_s, d.fps, d.drift, seed,
                                           size=d.image_size)
        probe, probe_labels = generate_labeled_set(d.probe_identities, d.probe_per_identity, seed + 1000,
                                                   size=d.image_size)
        fr_manifest, _ = generate_labeled_set(d.fr_identities, d.fr_per_identity, seed + 2000,
                                              size=d.image_size, id_prefix="fr")
    else:
        manifest = load_manifest(d.manifest)
        labels_path = labels_path or Path(d.manifest).with_suffix(".labels.jsonl")
        labels = load_labels(labels_path) if Path(labels_path).exists() else {}
        probe, probe_labels = manifest, labels
        fr_manifest = manifest
    train, test = split_by_identity(probe, d.probe_test_frac, seed)
    aug = cfg.augmentation
    if d.norm_stats == "auto":
        mean, std = dataset_stats([load_image(r) for r in manifest.records])
        aug = replace(aug, mean=mean, std=std)
    pairs = verification_pairs(fr_manifest, d.fr_pairs, seed)
    data = ExperimentData(manifest, labels, (train, probe_labels), (test, probe_labels), pairs, aug)
    _DATA_CACHE[key] = data
    return data


def _write_config(out: Path, cfg: RunConfig, source_text: str | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(source_text if source_text is not None else dump_config(cfg))
    resolved = {"config": cfg.to_dict(), "fingerprint": cfg.fingerprint}
    (out / "config.resolved.json").write_text(json.dumps(resolved, sort_keys=True, indent=2))


def run_pretrain(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    *,
    source_text: str | None = None,
    trace_augs: bool = False,
    data: ExperimentData | None = None,
) -> tuple[Encoder, list[EpochStats]]:
    data = data or prepare_data(cfg)
    fp = cfg.fingerprint
    sink = trace_fh = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        _write_config(out, cfg, source_text)
        if trace_augs:
            trace_fh = (out / "traces.jsonl").open("w")

            def sink(rec: dict) -> None:
                trace_fh.write(json.dumps({**rec, "config_fingerprint": fp}, sort_keys=True) + "\n")
    try:
        trainer = Pretrainer(data.manifest, cfg.pretrain, cfg.temporal, data.aug, cfg.loss, cfg.model,
                             trace_sink=sink)
        history = trainer.fit(out, meta={"config_fingerprint": fp})
    finally:
        if trace_fh is not None:
            trace_fh.close()
    return trainer.encoder, history


def _save_report(out: Path | None, report: EvalReport, name: str) -> None:
    if out is None:
        return
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / f"{name}.json").write_text(report.to_json())


def run_probe(
    cfg: RunConfig,
    encoder: Encoder,
    *,
    mode: Mode | None = None,
    task: Task | None = None,
    data: ExperimentData | None = None,
    out_dir: str | Path | None = None,
) -> EvalReport:
    data = data or prepare_data(cfg)
    ds: DownstreamConfig = cfg.downstream
    if mode is not None:
        ds = replace(ds, mode=mode)
    if task is not None:
        ds = replace(ds, task=task)
    report = run_downstream(encoder, data.probe_train, data.probe_test, ds, data.aug, fingerprint=cfg.fingerprint)
    _save_report(Path(out_dir) if out_dir else None, report, f"{ds.task.value.lower()}_{ds.mode.value.lower()}")
    return report


def run_fr(
    cfg: RunConfig,
    encoder: Encoder,
    *,
    data: ExperimentData | None = None,
    out_dir: str | Path | None = None,
    k: int = 1,
) -> EvalReport:
    data = data or prepare_data(cfg)
    acc = knn_face_verification(encoder, data.fr_pairs, k, aug=data.aug, seed=cfg.seed)
    report = EvalReport(Task.FR_KNN, {"fr_acc": acc}, cfg.fingerprint, cfg.seed, {"n_pairs": len(data.fr_pairs)})
    _save_report(Path(out_dir) if out_dir else None, report, "fr_knn")
    return report


# ---------------------------------------------------------------------------
# Experiment matrix


@dataclass
class MatrixRow:
    label: str
    config: RunConfig
    tasks: tuple[Task, ...]


def load_matrix(spec: Mapping[str, Any] | str | Path, base_dir: Path | None = None) -> list[MatrixRow]:
    """Validate a matrix description into fully-resolved rows.

    Matrix YAML::

        base: base.yaml            # path (relative to the matrix file) or inline mapping
        tasks: [EXPR_CLS, FR_KNN]
        rows:
          - {label: a, toggles: {timeaug: false, hardneg: false, faceswap: false, maskfn: false}}
          - {label: g, toggles: {}, overrides: {loss: {n_fn: 2}}}

    Every row is validated before anything runs.
    """
    if not isinstance(spec, Mapping):
        path = Path(spec)
        base_dir = path.parent
        spec = yaml.safe_load(path.read_text()) or {}
    unknown = set(spec) - {"base", "rows", "tasks"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown matrix key")
    base = spec.get("base") or {}
    if isinstance(base, str):
        base_path = (base_dir or Path.cwd()) / base
        base = yaml.safe_load(base_path.read_text()) or {}
    try:
        tasks = tuple(Task(t) for t in spec.get("tasks", ["EXPR_CLS", "FR_KNN"]))
    except ValueError as exc:
        raise ConfigError("tasks", str(exc)) from None
    rows = spec.get("rows") or []
    if not rows:
        raise ConfigError("rows", "matrix has no rows")
    out, seen = [], set()
    for i, row in enumerate(rows):
        label = str(row.get("label", chr(ord("a") + i)))
        if label in seen:
            raise ConfigError(f"rows[{i}].label", f"duplicate label {label!r}")
        seen.add(label)
        extra = set(row) - {"label", "toggles", "overrides"}
        if extra:
            raise ConfigError(f"rows[{i}].{sorted(extra)[0]}", "unknown row key")
        toggles = row.get("toggles") or {}
        for name in toggles:
            if name not in STRATEGIES:
                raise ConfigError(f"rows[{i}].toggles.{name}", f"undefined toggle (known: {', '.join(STRATEGIES)})")
        raw = merge(base, row.get("overrides") or {})
        raw = merge(raw, {"pretrain": dict(toggles)})
        try:
            cfg = build_config(raw)
        except ConfigError as exc:
            raise ConfigError(f"rows[{i}].{exc.key}", exc.message) from None
        out.append(MatrixRow(label, cfg, tasks))
    return out


REPORT_COLUMNS = ("label", "status", "fingerprint", "seed", *STRATEGIES, "n_fn", "task", "metric", "value")


def run_experiment_matrix(
    matrix: Mapping[str, Any] | str | Path,
    out_dir: str | Path,
) -> list[EvalReport]:
    """Pretrain and evaluate each row in order; a failing row is recorded and
    the remaining rows still run. Writes comparison.csv and comparison.json."""
    rows = load_matrix(matrix)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: list[EvalReport] = []
    table: list[dict[str, Any]] = []
    for row in rows:
        cfg = row.config
        run_dir = out / "rows" / row.label
        info = {"label": row.label, "fingerprint": cfg.fingerprint, "seed": cfg.seed,
                **cfg.pretrain.toggles, "n_fn": cfg.loss.n_fn}
        try:
            data = prepare_data(cfg)
            encoder, _ = run_pretrain(cfg, run_dir, data=data)
            row_reports = []
            for task in row.tasks:
                if task is Task.FR_KNN:
                    row_reports.append(run_fr(cfg, encoder, data=data, out_dir=run_dir))
                else:
                    row_reports.append(run_probe(cfg, encoder, task=task, data=data, out_dir=run_dir))
            for rep in row_reports:
                rep.extra["label"] = row.label
                reports.append(rep)
                table.append({**info, "status": "ok", "task": rep.task.value, "metrics": rep.metrics})
        except Exception as exc:  # a failed row must not stop the matrix
            log.error("row %s failed: %s", row.label, exc)
            table.append({**info, "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                          "traceback": traceback.format_exc()})
    (out / "comparison.json").write_text(json.dumps(table, sort_keys=True, indent=2))
    with (out / "comparison.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for entry in table:
            base = {k: entry.get(k) for k in REPORT_COLUMNS if k in entry}
            if entry["status"] != "ok":
                writer.writerow({**base, "metric": "error", "value": entry["error"]})
                continue
            for metric, value in sorted(entry["metrics"].items()):
                writer.writerow({**base, "metric": metric, "value": value})
    return reports


# ---------------------------------------------------------------------------
# Verification


def verify_run(run_dir: str | Path) -> list[str]:
    """Recompute the config fingerprint and check every artifact embeds it.

    Returns a list of problems (empty when the run directory is consistent).
    """
    run = Path(run_dir)
    problems = []
    resolved_path = run / "config.resolved.json"
    if not resolved_path.exists():
        return [f"{resolved_path}: missing"]
    resolved = json.loads(resolved_path.read_text())
    try:
        cfg = build_config(resolved["config"])
    except ConfigError as exc:
        return [f"config.resolved.json: {exc}"]
    fp = cfg.fingerprint
    if fp != resolved.get("fingerprint"):
        problems.append(f"config.resolved.json: recorded fingerprint {resolved.get('fingerprint')} != recomputed {fp}")
    if not (run / "config.echo").exists():
        problems.append("config.echo: missing")
    metrics = run / "metrics.jsonl"
    if metrics.exists():
        for n, line in enumerate(metrics.read_text().splitlines(), 1):
            if json.loads(line).get("config_fingerprint") != fp:
                problems.append(f"metrics.jsonl:{n}: fingerprint mismatch")
    for ckpt in sorted((run / "checkpoints").glob("*.ckpt")):
        if read_checkpoint_header(ckpt)["meta"].get("config_fingerprint") != fp:
            problems.append(f"{ckpt.relative_to(run)}: fingerprint mismatch")
    for rep in sorted((run / "reports").glob("*.json")):
        if json.loads(rep.read_text()).get("config_fingerprint") != fp:
            problems.append(f"{rep.relative_to(run)}: fingerprint mismatch")
    traces = run / "traces.jsonl"
    if traces.exists():
        for n, line in enumerate(traces.read_text().splitlines(), 1):
            if json.loads(line).get("config_fingerprint") != fp:
                problems.append(f"traces.jsonl:{n}: fingerprint mismatch")
                break
    return problems


def load_encoder(path: str | Path) -> Encoder:
    encoder, _ = load_checkpoint(path)
    return encoder
