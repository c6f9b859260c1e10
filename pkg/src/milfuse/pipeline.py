"""Two-stage training (per-modality branches, then a branch on fused embeddings) and Monte-Carlo CV."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .branch import (BranchConfig, BranchParams, DivergenceError, TrainResult, extract_bag_embeddings,
                     forward, opt_path, save_params, save_train_state, train_branch, write_history)
from .errors import MilfuseError, ValidationError
from .features import Manifest, Modality, PairedSample, SplitSpec, stratified_split, write_split
from .fusion import FusedBag, PoolingSpec, build_fused_bag
from .metrics import MetricsReport, evaluate_scores

log = logging.getLogger(__name__)

MODELS = ("HE", "IHC", "FUSED")

# branch seeds = split seed + offset
HE_SEED_OFFSET = 1000
IHC_SEED_OFFSET = 2000
FUSED_SEED_OFFSET = 3000


@dataclass
class TwoStageConfig:
    he: BranchConfig = field(default_factory=BranchConfig)
    ihc: BranchConfig = field(default_factory=BranchConfig)
    fused: BranchConfig = field(default_factory=lambda: BranchConfig(c2=0.0))
    pooling: PoolingSpec = field(default_factory=PoolingSpec)
    l2_normalize: bool = False
    num_classes: int = 4
    seed: int = 0
    folds: int = 5

    def validate(self) -> "TwoStageConfig":
        if self.folds < 1:
            raise ValidationError(f"folds must be >= 1, got {self.folds}")
        for name in ("he", "ihc", "fused"):
            cfg = getattr(self, name).validate()
            if cfg.num_classes != self.num_classes:
                raise ValidationError(f"{name} branch has {cfg.num_classes} classes, pipeline has {self.num_classes}")
        for name in ("he", "ihc"):
            if getattr(self, name).hidden_dim != self.pooling.in_dim:
                raise ValidationError(f"{name} hidden_dim {getattr(self, name).hidden_dim} must equal "
                                      f"pooling in_dim {self.pooling.in_dim}")
        if self.fused.in_dim != self.pooling.fused_dim:
            raise ValidationError(f"stage-2 in_dim {self.fused.in_dim} must equal pooled_dim^2 = "
                                  f"{self.pooling.fused_dim}")
        return self


@dataclass
class TwoStageResult:
    he: BranchParams
    ihc: BranchParams
    fused: BranchParams
    reports: dict[str, MetricsReport]
    fused_bags: dict[str, FusedBag]
    histories: dict[str, list]


def _branch_seeds(cfg: TwoStageConfig, split_seed: int) -> TwoStageConfig:
    return replace(cfg,
                   he=replace(cfg.he, seed=split_seed + HE_SEED_OFFSET),
                   ihc=replace(cfg.ihc, seed=split_seed + IHC_SEED_OFFSET),
                   fused=replace(cfg.fused, seed=split_seed + FUSED_SEED_OFFSET))


def _save_branch(out_dir: Path | None, name: str, result: TrainResult):
    if out_dir is None:
        return
    ckpt = out_dir / f"{name}.ckpt"
    save_params(ckpt, result.params)
    save_train_state(opt_path(ckpt), result.state)
    write_history(out_dir / f"{name}_history.tsv", result.history)


def _train_stage(name: str, train, val, cfg: BranchConfig, out_dir: Path | None) -> TrainResult:
    try:
        result = train_branch(train, val, cfg, stage=name)
    except DivergenceError as exc:
        if out_dir is not None and exc.params is not None:
            save_params(out_dir / f"{name}.partial.ckpt", exc.params)
        raise
    _save_branch(out_dir, name, result)
    return result


def run_two_stage(samples: list[PairedSample], split: SplitSpec, cfg: TwoStageConfig,
                  out_dir=None, fold_id: int = 0) -> TwoStageResult:
    """Train HE and IHC branches, fuse their frozen embeddings, train the fused branch.

    Branch seeds are derived from ``split.seed``. Test-set metrics are reported
    for the two unimodal branches (their own slide scores) and the fused branch.
    """
    cfg = _branch_seeds(cfg.validate(), split.seed)
    by_id = {s.slide_id: s for s in samples}
    missing = split.all_ids() - by_id.keys()
    if missing:
        raise ValidationError(f"split references {len(missing)} unknown slides, e.g. {sorted(missing)[0]!r}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_split(split, out / "split.txt")

    def subset(name, modality):
        return [(by_id[i].bag(modality), by_id[i].label) for i in split.subset(name)]

    stage1 = {}
    for name, modality, bcfg in (("he", Modality.HE, cfg.he), ("ihc", Modality.IHC, cfg.ihc)):
        stage1[name] = _train_stage(name, subset("train", modality), subset("val", modality), bcfg, out)

    # stage-1 checkpoints are frozen from here on
    ids = split.train_ids + split.val_ids + split.test_ids
    z_he = extract_bag_embeddings(stage1["he"].params, [by_id[i].he for i in ids])
    z_ihc = extract_bag_embeddings(stage1["ihc"].params, [by_id[i].ihc for i in ids])
    fused = {i: build_fused_bag(a, b, by_id[i].label, cfg.pooling, cfg.l2_normalize)
             for i, a, b in zip(ids, z_he, z_ihc)}

    def fused_subset(name):
        return [(fused[i].features, fused[i].label) for i in split.subset(name)]

    stage2 = _train_stage("fused", fused_subset("train"), fused_subset("val"), cfg.fused, out)

    test = split.test_ids
    labels = np.array([by_id[i].label for i in test])
    traces = {
        "HE": [forward(stage1["he"].params, by_id[i].he) for i in test],
        "IHC": [forward(stage1["ihc"].params, by_id[i].ihc) for i in test],
        "FUSED": [forward(stage2.params, fused[i].features) for i in test],
    }
    reports = {m: evaluate_scores(np.vstack([t.p for t in traces[m]]), labels, cfg.num_classes, fold_id, m)
               for m in MODELS}
    if out is not None:
        write_metrics(out / "metrics.tsv", reports)
        for j, sid in enumerate(test):
            write_attention(out / f"attention_{sid}.tsv", {m: traces[m][j] for m in ("HE", "IHC")})
    return TwoStageResult(stage1["he"].params, stage1["ihc"].params, stage2.params, reports, fused,
                          {"he": stage1["he"].history, "ihc": stage1["ihc"].history, "fused": stage2.history})


# ---------------------------------------------------------------------------
# report files


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def write_metrics(path, reports: dict[str, MetricsReport]) -> None:
    n = next(iter(reports.values())).confusion.shape[0]
    header = ["model", "acc", "auc_macro"] + [f"auc_{c}" for c in range(n)] + ["n_test", "confusion"]
    lines = ["\t".join(header)]
    for m, r in reports.items():
        cm = ";".join(",".join(str(int(v)) for v in row) for row in r.confusion)
        lines.append("\t".join([m, _fmt(r.acc), _fmt(r.auc_macro), *map(_fmt, r.per_class_auc),
                                str(r.total), cm]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_attention(path, traces) -> None:
    """Per-instance attention of the predicted class, one block per modality."""
    lines = ["modality\tinstance\tpredicted_class\tattention"]
    for modality, trace in traces.items():
        pred = int(np.argmax(trace.p))
        lines += [f"{modality}\t{k}\t{pred}\t{a:.8e}" for k, a in enumerate(trace.A[pred])]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class SummaryRow:
    model: str
    acc_mean: float
    acc_std: float
    auc_mean: float
    auc_std: float


def summarize(fold_reports: list[dict[str, MetricsReport]]) -> list[SummaryRow]:
    """Mean and sample standard deviation (0 for a single fold) per model."""
    rows = []
    for m in MODELS:
        acc = np.array([f[m].acc for f in fold_reports])
        auc = np.array([f[m].auc_macro for f in fold_reports])
        ddof = 1 if len(acc) > 1 else 0
        rows.append(SummaryRow(m, float(np.mean(acc)), float(np.std(acc, ddof=ddof)),
                               float(np.mean(auc)), float(np.std(auc, ddof=ddof))))
    return rows


def write_summary(path, rows: list[SummaryRow]) -> None:
    lines = ["model\tacc_mean\tacc_std\tauc_mean\tauc_std"]
    lines += [f"{r.model}\t{_fmt(r.acc_mean)}\t{_fmt(r.acc_std)}\t{_fmt(r.auc_mean)}\t{_fmt(r.auc_std)}"
              for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_fold_table(path, fold_reports: list[dict[str, MetricsReport]]) -> None:
    lines = ["fold\tmodel\tacc\tauc_macro"]
    for f in fold_reports:
        lines += [f"{r.fold_id}\t{m}\t{_fmt(r.acc)}\t{_fmt(r.auc_macro)}" for m, r in f.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    fold_reports: list[dict[str, MetricsReport]]
    summary: list[SummaryRow]

    def row(self, model: str) -> SummaryRow:
        return next(r for r in self.summary if r.model == model)


def _run_fold(samples, manifest, cfg: TwoStageConfig, fold: int, out_dir):
    split = stratified_split(manifest, (0.8, 0.1, 0.1), seed=cfg.seed + fold)
    fold_dir = None if out_dir is None else Path(out_dir) / f"fold_{fold}"
    try:
        return run_two_stage(samples, split, cfg, fold_dir, fold_id=fold).reports
    except MilfuseError as exc:
        exc.fold_id = fold
        exc.args = (f"fold {fold}: {exc.args[0] if exc.args else exc}", *exc.args[1:])
        raise


def monte_carlo_cv(samples: list[PairedSample], cfg: TwoStageConfig, out_dir=None,
                   jobs: int = 1) -> CVResult:
    """Repeated stratified 80/10/10 splits; fold ``i`` uses split seed ``cfg.seed + i``."""
    cfg.validate()
    manifest = Manifest.from_samples(samples, cfg.num_classes)
    manifest.validate()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    if jobs > 1 and cfg.folds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, samples, manifest, cfg, i, out_dir) for i in range(cfg.folds)]
            fold_reports = [f.result() for f in futures]
    else:
        fold_reports = [_run_fold(samples, manifest, cfg, i, out_dir) for i in range(cfg.folds)]
    summary = summarize(fold_reports)
    if out_dir is not None:
        write_summary(Path(out_dir) / "summary.tsv", summary)
        write_fold_table(Path(out_dir) / "folds.tsv", fold_reports)
    return CVResult(fold_reports, summary)
