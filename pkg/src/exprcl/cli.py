"""Command-line entry point.

Exit codes: 0 success, 1 validation error (config, manifest, labels),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, build_config, parse_config
from .data import ManifestError, save_manifest
from .evaluate import LabelError, Mode
from .experiments import load_encoder, prepare_data, run_experiment_matrix, run_fr, run_pretrain, run_probe, verify_run
from .synthetic import export_images, generate_corpus, save_labels

log = logging.getLogger("exprcl")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ManifestError, LabelError)


def _config(path: str | None) -> RunConfig:
    return parse_config(path) if path else build_config({})


def cmd_gen_synthetic(args) -> int:
    cfg = _config(args.config)
    d = cfg.data
    manifest, labels = generate_corpus(d.n_identities, d.videos_per_id, d.duration_s, d.fps, d.drift, cfg.seed,
                                       size=d.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exported = export_images(manifest, out / "images")
    # keys do not depend on image_ref, so the sidecar applies to the exported manifest as is
    save_manifest(exported, out / "manifest.csv")
    save_labels(labels, out / "manifest.labels.jsonl")
    print(f"wrote {len(exported)} frames, {len(exported.identities)} identities to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    text = Path(args.config).read_text() if args.config else None
    _, history = run_pretrain(cfg, args.out, source_text=text, trace_augs=args.trace_augs)
    last = history[-1]
    print(f"epoch {last.epoch}: loss {last.loss:.4f} top1 {last.top1:.3f}  ->  {args.out}")
    return EXIT_OK


def _report_out(args, report) -> None:
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)


def _downstream(args, mode: Mode) -> int:
    cfg = _config(args.config)
    data = prepare_data(cfg, args.labels)
    report = run_probe(cfg, load_encoder(args.checkpoint), mode=mode, data=data)
    _report_out(args, report)
    return EXIT_OK


def cmd_probe(args) -> int:
    return _downstream(args, Mode.FREEZE)


def cmd_finetune(args) -> int:
    return _downstream(args, Mode.FINETUNE)


def cmd_eval_fr(args) -> int:
    cfg = _config(args.config)
    data = prepare_data(cfg, args.labels)
    report = run_fr(cfg, load_encoder(args.checkpoint), data=data, k=args.k)
    _report_out(args, report)
    return EXIT_OK


def cmd_matrix(args) -> int:
    reports = run_experiment_matrix(args.matrix, args.out)
    table = json.loads((Path(args.out) / "comparison.json").read_text())
    failed = [row["label"] for row in table if row["status"] != "ok"]
    for rep in reports:
        print(rep.extra.get("label"), rep.task.value, json.dumps(rep.metrics, sort_keys=True))
    if failed:
        print(f"failed rows: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_verify_run(args) -> int:
    problems = verify_run(args.run_dir)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return EXIT_VALIDATION
    print(f"{args.run_dir}: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exprcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render a synthetic video corpus to disk")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pretrain", help="self-supervised pretraining into a run directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--trace-augs", action="store_true", help="write per-view augmentation traces")
    p.set_defaults(func=cmd_pretrain)

    for name, func, help_text in (
        ("probe", cmd_probe, "train a head on the frozen backbone"),
        ("finetune", cmd_finetune, "train head and backbone"),
        ("eval-fr", cmd_eval_fr, "L2-distance face verification"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config")
        p.add_argument("--labels", help="label sidecar for data.manifest")
        p.add_argument("--out", help="write the report JSON here")
        if name == "eval-fr":
            p.add_argument("-k", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("matrix", help="run a toggle experiment matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("verify-run", help="check config fingerprints across a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_verify_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
