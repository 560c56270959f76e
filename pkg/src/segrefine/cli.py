"""``segrefine`` command line: gen-data, train, evaluate, report.

Exit codes: 0 success, 1 configuration or I/O problem, 2 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigFileError, RunConfig, load_config
from .data import CLASS_NAMES, FormatError, make_corpus, read_dataset, read_overlay, write_dataset
from .metrics import DEFAULT_CLASS_NAMES, aggregate_report
from .pipeline import DivergenceError, evaluate_labels, execute_run, mean_dsc

log = logging.getLogger("segrefine")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2
CALIBRATION_BAND = (0.60, 0.85)


class CommandError(Exception):
    pass


def thread_limit():
    """Honour SEGREFINE_THREADS; 0 means one BLAS thread for deterministic runs."""
    raw = os.environ.get("SEGREFINE_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"SEGREFINE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CommandError("SEGREFINE_THREADS must be >= 0")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def _path(args, cfg: RunConfig, key: str) -> Path:
    """Command-line flag first, then the config's paths section."""
    value = getattr(args, key, None) or getattr(cfg.paths, key)
    if value is None:
        raise CommandError(f"--{key} is required (or set paths.{key} in the config)")
    return Path(value)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    corpus = make_corpus(data.n_samples, data.n_strong, data.n_validation, data.size, data.seed, cfg.corruption)
    corpus.meta["config_digest"] = replace(cfg, data=data).digest()
    out = _path(args, cfg, "out")
    write_dataset(corpus, out)
    weak = corpus.weak
    dsc = mean_dsc({s.id: s.label for s in weak}, weak, corpus.num_classes)
    print(f"wrote {len(corpus.samples)} samples to {out}")
    print(f"pools: strong-train={len(corpus.strong)} weak-train={len(weak)} validation={len(corpus.validation)}")
    lo, hi = CALIBRATION_BAND
    cells = " ".join(f"{CLASS_NAMES[int(c)]}={v:.3f}" for c, v in dsc.items())
    ok = all(lo <= v <= hi for v in dsc.values())
    print(f"calibration: initial weak DSC {cells} (band [{lo:.2f}, {hi:.2f}]: {'ok' if ok else 'OUTSIDE'})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = read_dataset(_path(args, cfg, "data"))
    train = cfg.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
        cfg = replace(cfg, train=train)
    model = replace(cfg.model_config(), num_classes=corpus.num_classes, input_size=corpus.height)
    out = _path(args, cfg, "out")
    tr = execute_run(
        corpus,
        args.variant,
        out,
        train,
        cfg.losses,
        model,
        config_digest=cfg.digest(),
        resume_from=args.resume,
        stop_after=args.stop_after,
    )
    if tr.epoch < train.total_epochs:
        print(f"stopped after epoch {tr.epoch}; resume with --resume {tr.last_checkpoint}")
        return EXIT_OK
    print(f"{args.variant}: {tr.epoch} epochs, {len(tr.history.replacements)} replacement events, outputs in {out}")
    if tr.history.replacements:
        last = tr.history.replacements[-1]["weak_dsc"]
        print("final weak DSC " + " ".join(f"{CLASS_NAMES[int(c)]}={v:.3f}" for c, v in last.items()))
    return EXIT_OK


def _labels_for(corpus, spec: str) -> tuple[dict, str]:
    if spec == "initial":
        return {s.id: s.initial_label for s in corpus.weak}, "initial"
    if spec == "gt":
        return {s.id: s.hidden_truth for s in corpus.weak}, "ground-truth"
    labels, doc = read_overlay(spec)
    extra = sorted(set(labels) - set(corpus.by_id()))
    if extra:
        raise CommandError(f"overlay has ids not in the dataset: {', '.join(extra[:20])}")
    missing = sorted(s.id for s in corpus.weak if s.id not in labels)
    if missing:
        raise CommandError(f"overlay is missing weak-train ids: {', '.join(missing[:20])}")
    return labels, doc.get("meta", {}).get("variant", "overlay")


def cmd_evaluate(args) -> int:
    corpus = read_dataset(args.data)
    labels, variant = _labels_for(corpus, args.labels)
    out = evaluate_labels(corpus, labels, variant)
    _write_json(Path(args.out), out)
    print(
        f"{variant}: mean DSC "
        + " ".join(f"{CLASS_NAMES[int(c)]}={v['dsc']:.3f}" for c, v in out["summary"].items())
    )
    return EXIT_OK


def _load_metrics(path: Path) -> dict:
    f = path / "metrics.json" if path.is_dir() else path
    try:
        doc = json.loads(f.read_text())
    except OSError as e:
        raise CommandError(f"cannot read metrics from {path}: {e}") from e
    if "samples" not in doc or "variant" not in doc:
        raise CommandError(f"{f} is not a metrics file")
    return doc


def _average_runs(docs: list[dict]) -> dict:
    """Per-sample mean over runs of one variant (e.g. several seeds)."""
    ids = sorted(docs[0]["samples"])
    for d in docs[1:]:
        if sorted(d["samples"]) != ids:
            raise CommandError(f"runs of variant {docs[0]['variant']!r} cover different samples")
    out = {}
    for i in ids:
        out[i] = {}
        for c in docs[0]["samples"][i]:
            out[i][c] = {}
            for m in ("iou", "dsc", "rvd"):
                vals = [d["samples"][i][c][m] for d in docs]
                out[i][c][m] = None if any(v is None for v in vals) else float(np.mean(vals))
    return out


def cmd_report(args) -> int:
    by_variant: dict[str, list[dict]] = {}
    for p in args.runs:
        doc = _load_metrics(Path(p))
        by_variant.setdefault(doc["variant"], []).append(doc)
    per_sample = {v: _average_runs(docs) for v, docs in by_variant.items()}
    try:
        report = aggregate_report(per_sample, DEFAULT_CLASS_NAMES)
    except ValueError as e:
        raise CommandError(str(e)) from e
    text = report.render_table()
    doc = report.to_dict()
    doc["runs"] = {v: len(d) for v, d in by_variant.items()}
    out = Path(args.out)
    text_path = out.with_suffix(".txt") if out.suffix == ".json" else out
    out.parent.mkdir(parents=True, exist_ok=True)
    text_path.write_text(text + "\n")
    _write_json(out.with_suffix(".json"), doc)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segrefine", description="Weak-label refinement with a dual-branch network.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic phantom corpus")
    g.add_argument("--out", help="dataset directory (default: paths.out)")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, help="overrides data.seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant and refine the weak labels")
    t.add_argument("--data", help="dataset directory (default: paths.data)")
    t.add_argument("--out", help="run directory (default: paths.out)")
    t.add_argument("--variant", choices=("transfer", "baseline"), default="transfer")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this global epoch (checkpoint is kept)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score labels against hidden ground truth on the weak pool")
    e.add_argument("--data", required=True)
    e.add_argument("--labels", required=True, help="overlay directory, or 'initial' / 'gt'")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="tabulate evaluated runs with paired tests")
    r.add_argument("--runs", nargs="+", required=True, help="run directories or metrics JSON files")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CommandError, ConfigFileError, FormatError, OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
