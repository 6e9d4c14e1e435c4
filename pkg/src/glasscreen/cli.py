"""Command-line entry point wiring the pipeline end to end.

Subcommands: clean, train, eval, screen, enumerate. Every command validates
its inputs before any side effect and writes output files atomically
(temp file + rename), so failed runs leave nothing partial behind.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import baseline_knn, evaluation
from .data_pipeline import (
    CandidateCapError,
    ComponentSchema,
    DataFormatError,
    EmptyClassError,
    GridConfig,
    TgBand,
    clean_with_counts,
    enumerate_candidates,
    load_candidates,
    load_dataset,
    normalize,
    schema_from_csv,
    split,
    transform_labels,
    write_dataset,
)
from .deepglassnet import (
    ArchConfig,
    CheckpointError,
    eval_features,
    load_checkpoint,
    save_checkpoint,
)
from .training import NumericFailure, TrainConfig, train

log = logging.getLogger("glasscreen")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Bad config file contents (unknown key, wrong type, invalid value)."""


@dataclass
class RunConfig:
    """Flat key-value run configuration; unknown keys are rejected."""

    # architecture
    embed_dim: int = 16
    adjacency_rank: int = 5
    attention_dim: int = 16
    hidden_dim: int = 64
    feature_dim: int = 8
    dropout: float = 0.0
    # training
    epochs: int = 100
    batch_size: int = 256
    sigma: float = 0.01
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    eval_every: int = 1
    precision_k: int = 50
    # data handling
    train_fraction: float = 0.8
    min_sum: float = 0.95
    max_sum: float = 1.05
    band_low: float | None = None
    band_high: float | None = None
    # baseline
    k_neighbors: int = 5
    # global
    seed: int = 0

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values: dict = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                try:
                    raw = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: config must be a flat JSON object")
            unknown = sorted(set(raw) - known)
            if unknown:
                raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
            values.update(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            # n_components comes from the data later; use a size that cannot
            # trip the low-rank advisory warning during field validation
            self.arch_config(n_components=max(2, self.adjacency_rank))
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0,1), got {self.train_fraction}")
        if self.min_sum > self.max_sum:
            raise ConfigError("min_sum exceeds max_sum")
        if self.k_neighbors < 1:
            raise ConfigError("k_neighbors must be >= 1")
        if (self.band_low is None) != (self.band_high is None):
            raise ConfigError("band_low and band_high must be given together")
        if self.band_low is not None and not self.band_low < self.band_high:
            raise ConfigError("band_low must be < band_high")

    def arch_config(self, n_components: int) -> ArchConfig:
        return ArchConfig(
            n_components=n_components,
            embed_dim=self.embed_dim,
            adjacency_rank=self.adjacency_rank,
            attention_dim=self.attention_dim,
            hidden_dim=self.hidden_dim,
            feature_dim=self.feature_dim,
            dropout=self.dropout,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            sigma=self.sigma,
            seed=self.seed,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            weight_decay=self.weight_decay,
            eval_every=self.eval_every,
            precision_k=self.precision_k,
        )

    def fingerprint(self) -> str:
        payload = json.dumps({f.name: getattr(self, f.name) for f in fields(self)},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@contextmanager
def atomic_path(path):
    """Yield a temp path in the target directory; rename over the target on
    success, delete on failure. Failed runs leave no partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp_name
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


@contextmanager
def atomic_write(path, mode: str = "w"):
    """Open-for-write variant of atomic_path."""
    with atomic_path(path) as tmp_name:
        encoding = None if "b" in mode else "utf-8"
        with open(tmp_name, mode, encoding=encoding) as fh:
            yield fh


def _parse_band(text: str) -> TgBand:
    try:
        low_text, high_text = text.split(":")
        return TgBand(float(low_text), float(high_text))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"band must look like LOW:HIGH, got {text!r}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_clean(args) -> int:
    run = RunConfig.load(args.config, {"seed": args.seed})
    min_sum = args.min_sum if args.min_sum is not None else run.min_sum
    max_sum = args.max_sum if args.max_sum is not None else run.max_sum
    schema = schema_from_csv(args.input)
    raw = load_dataset(args.input, schema)
    kept, counts = clean_with_counts(raw, min_sum, max_sum)
    with atomic_path(args.output) as tmp:
        write_dataset(tmp, schema, kept)
    log.info(
        "clean: read=%d kept=%d dropped_by_sum=%d dropped_missing_tg=%d dropped_negative=%d",
        counts.read, counts.kept, counts.dropped_sum,
        counts.dropped_missing_tg, counts.dropped_negative,
    )
    return EXIT_OK


def _load_labeled(data_path, band: TgBand, run: RunConfig):
    schema = schema_from_csv(data_path)
    raw = load_dataset(data_path, schema)
    cleaned, counts = clean_with_counts(raw, run.min_sum, run.max_sum)
    log.info("loaded %d rows, %d kept after cleaning", counts.read, counts.kept)
    labeled = transform_labels(cleaned, band)
    n_target = sum(s.y for s in labeled)
    log.info("band [%g, %g): %d targets / %d samples", band.low, band.high,
             n_target, len(labeled))
    return schema, labeled


def cmd_train(args) -> int:
    run = RunConfig.load(args.config, {"seed": args.seed})
    if args.band is not None:
        band = _parse_band(args.band)
    elif run.band_low is not None:
        band = TgBand(run.band_low, run.band_high)
    else:
        raise ConfigError("no Tg band given (use --band LOW:HIGH or band_low/band_high)")

    schema, labeled = _load_labeled(args.data, band, run)
    train_part, val_part = split(labeled, run.train_fraction, run.seed)
    arch = run.arch_config(n_components=schema.n)
    params, stats, history = train(train_part, val_part, arch, run.train_config())

    targets = [s for s in train_part if s.y == 1]
    center = evaluation.class_center(targets, params, stats)

    with atomic_path(args.out) as tmp:
        save_checkpoint(params, arch, stats, band, tmp, center=center.vector)
    history_path = args.history or (str(args.out) + ".history.csv")
    with atomic_path(history_path) as tmp:
        history.write_csv(tmp)

    best = max(r.val_auc for r in history.records)
    log.info("training done: %d epochs, best val AUC %.4f, checkpoint %s",
             len(history.records), best, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = RunConfig.load(args.config, {"seed": args.seed})
    log.info("checkpoint band [%g, %g)", ckpt.band.low, ckpt.band.high)

    schema = schema_from_csv(args.data)
    if schema.n != ckpt.arch.n_components:
        raise DataFormatError(
            f"{args.data} has {schema.n} components but the checkpoint "
            f"expects {ckpt.arch.n_components}"
        )
    _, labeled = _load_labeled(args.data, ckpt.band, run)
    train_part, val_part = split(labeled, run.train_fraction, run.seed)

    targets = [s for s in train_part if s.y == 1]
    center = evaluation.class_center(targets, ckpt.params, ckpt.stats)
    report = evaluation.evaluate(val_part, ckpt.params, ckpt.stats, center, args.k)

    report_dir = Path(args.report_dir)
    fingerprint = run.fingerprint()
    _write_report(report_dir, "", report, ckpt.band, fingerprint)
    log.info("eval: auc=%.4f precision@%d=%.4f reports in %s",
             report.auc, args.k, report.precision_at_k, report_dir)

    if args.with_knn_baseline:
        knn_report = baseline_knn.knn_evaluate(
            train_part, val_part, ckpt.stats,
            baseline_knn.KnnConfig(run.k_neighbors), args.k,
        )
        _write_report(report_dir, "baseline_knn_", knn_report, ckpt.band, fingerprint)
        log.info("knn baseline: auc=%.4f precision@%d=%.4f",
                 knn_report.auc, args.k, knn_report.precision_at_k)
    return EXIT_OK


def _write_report(report_dir: Path, prefix: str, report, band: TgBand, fingerprint: str):
    report_dir.mkdir(parents=True, exist_ok=True)
    with atomic_path(report_dir / f"{prefix}scores.csv") as tmp:
        evaluation.write_scores_csv(report.scores, tmp)
    with atomic_path(report_dir / f"{prefix}roc.csv") as tmp:
        evaluation.write_roc_csv(report.roc, tmp)
    with atomic_path(report_dir / f"{prefix}summary.json") as tmp:
        evaluation.write_summary_json(report, band, fingerprint, tmp)


def cmd_screen(args) -> int:
    RunConfig.load(args.config, {"seed": args.seed})  # validate-only (no randomness here)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.center is None:
        raise DataFormatError(
            f"{args.checkpoint} carries no class center; retrain to enable screening"
        )
    with open(args.candidates, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise DataFormatError(f"{args.candidates}: empty file, expected a header row")
    if len(header) != ckpt.arch.n_components:
        raise DataFormatError(
            f"{args.candidates} has {len(header)} component columns but the "
            f"checkpoint expects {ckpt.arch.n_components}"
        )
    schema = ComponentSchema(tuple(header))
    candidates = load_candidates(args.candidates, schema)
    if not 1 <= args.top_k <= candidates.shape[0]:
        raise DataFormatError(
            f"top_k={args.top_k} out of range for {candidates.shape[0]} candidates"
        )

    normalized = normalize(candidates, ckpt.stats)
    features = eval_features(normalized, ckpt.params)
    scores = features @ ckpt.center
    order = np.lexsort((np.arange(scores.size), -scores))[: args.top_k]

    with atomic_write(args.out) as fh:
        fh.write(",".join(schema.names) + ",score\n")
        for i in order:
            row = ",".join(repr(float(v)) for v in candidates[i])
            fh.write(f"{row},{float(scores[i])!r}\n")
    log.info("screen: scored %d candidates, wrote top %d to %s",
             candidates.shape[0], args.top_k, args.out)
    return EXIT_OK


def cmd_enumerate(args) -> int:
    RunConfig.load(args.config, {"seed": args.seed})  # validate-only (no randomness here)
    names = tuple(name.strip() for name in args.components.split(","))
    schema = ComponentSchema(names)
    bounds = None
    if args.bound:
        bounds = [(0.0, 1.0)] * schema.n
        index = {name: i for i, name in enumerate(schema.names)}
        for name, lo, hi in args.bound:
            if name not in index:
                raise ConfigError(f"--bound names unknown component {name!r}")
            bounds[index[name]] = (float(lo), float(hi))
    grid = GridConfig(step=args.step, max_nonzero=args.max_nonzero or schema.n,
                      bounds=bounds, cap=args.cap)
    candidates = enumerate_candidates(schema, grid)
    with atomic_write(args.out) as fh:
        fh.write(",".join(schema.names) + "\n")
        for row in candidates:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    log.info("enumerate: wrote %d candidates to %s", candidates.shape[0], args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glasscreen",
        description="Train and apply a contrastive composition-screening model.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (overrides the config file)")
        p.add_argument("--config", default=None, help="JSON config file")
        # SUPPRESS keeps a pre-subcommand --verbose from being reset to False
        p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="debug logging")

    p = sub.add_parser("clean", help="sum-filter a raw composition table")
    add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--min-sum", type=float, default=None, dest="min_sum",
                   help="default 0.95 (or the config file's min_sum)")
    p.add_argument("--max-sum", type=float, default=None, dest="max_sum",
                   help="default 1.05 (or the config file's max_sum)")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("train", help="train the encoder and write a checkpoint")
    add_common(p)
    p.add_argument("--data", required=True, help="composition/Tg table")
    p.add_argument("--band", default=None, help="target Tg band as LOW:HIGH")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", default=None, help="history CSV (default <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled data")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-dir", required=True, dest="report_dir")
    p.add_argument("--k", type=int, default=50, help="k for Precision@k")
    p.add_argument("--with-knn-baseline", action="store_true", dest="with_knn_baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("screen", help="rank candidate compositions by a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--candidates", required=True, help="candidate CSV (no Tg column)")
    p.add_argument("--top-k", type=int, default=5, dest="top_k")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("enumerate", help="write a lattice of candidate compositions")
    add_common(p)
    p.add_argument("--components", required=True, help="comma-separated component names")
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--max-nonzero", type=int, default=None, dest="max_nonzero")
    p.add_argument("--bound", action="append", nargs=3, metavar=("NAME", "LO", "HI"),
                   help="per-component fraction bounds (repeatable)")
    p.add_argument("--cap", type=int, default=10_000_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enumerate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except (DataFormatError, EmptyClassError, CandidateCapError, CheckpointError,
            FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericFailure as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
