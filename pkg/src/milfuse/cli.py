"""``milfuse`` command-line entry point.

Exit codes: 0 success, 1 check failure, 2 validation or usage error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import branch, config
from .checkpoint import read_tensors, write_tensors
from .errors import DivergenceError, FormatError, MilfuseError, ValidationError
from .features import (Modality, generate_synthetic_dataset, load_fused_manifest,
                       load_manifest, read_manifest, read_split, stratified_split, write_bag,
                       write_fused_manifest, write_split)
from .fusion import build_fused_bag
from .gradcheck import run_gradcheck
from .metrics import evaluate_scores
from .pipeline import (FUSED_SEED_OFFSET, HE_SEED_OFFSET, IHC_SEED_OFFSET, monte_carlo_cv, write_metrics)

log = logging.getLogger("milfuse")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

SEED_OFFSETS = {Modality.HE: HE_SEED_OFFSET, Modality.IHC: IHC_SEED_OFFSET, Modality.FUSED: FUSED_SEED_OFFSET}

TRAIN_KEYS = ["in_dim", "hidden_dim", "attn_dim", "num_classes", "lr", "weight_decay", "beta1", "beta2",
              "eps", "c1", "c2", "k_sample", "tau", "patch_reduction", "max_epochs", "min_epochs",
              "patience", "min_delta"]
STAGE2_KEYS = ["stage2_c2", "stage2_hidden_dim", "stage2_attn_dim", "pooled_dim", "l2_normalize"]
DATA_KEYS = ["manifest", "features"]
SYNTH_KEYS = ["samples_per_class", "dim", "min_bag", "max_bag", "signal_fraction", "signal_scale",
              "noise_scale"]

FLAG_ALIASES = {"num_classes": ["--classes"]}


class UsageError(MilfuseError):
    pass


def _add_keys(p: argparse.ArgumentParser, keys, required=()):
    for name in keys:
        key = config.KEYS[name]
        flags = [f"--{name.replace('_', '-')}"] + FLAG_ALIASES.get(name, [])
        typ = key.type if key.type is not str else None
        default = "" if key.default is None else f" (default: {key.default})"
        req = " [required]" if name in required else ""
        kw = {"type": typ} if typ is not None else {}
        p.add_argument(*flags, dest=name, default=None, help=f"{key.help}{default}{req}",
                       metavar=name.upper(), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milfuse", description="Two-stage H&E/IHC attention-MIL fusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, keys, required=()):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="plain-text 'key = value' config file (flags override it)")
        _add_keys(p, keys, required)
        p.set_defaults(required_keys=tuple(required))
        return p

    p = command("synth", "generate the synthetic paired-modality dataset", ["out", "seed", "num_classes"]
                + SYNTH_KEYS, required=["out"])
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    command("split", "write a stratified 80/10/10 split file", ["manifest", "num_classes", "seed", "out"],
            required=["manifest", "out"])

    for name, help_text in (("train-branch", "train one attention-MIL branch"),
                            ("train-fused", "train the stage-2 branch on fused bags")):
        keys = DATA_KEYS + ["split", "out", "seed"] + TRAIN_KEYS + (STAGE2_KEYS if name == "train-fused" else [])
        p = command(name, help_text, keys, required=["manifest", "split", "out"])
        if name == "train-branch":
            p.add_argument("--modality", choices=["he", "ihc", "fused"], required=True,
                           help="which bags to train on; 'fused' expects a fused manifest")
        p.add_argument("--resume", action="store_true",
                       help="continue from OUT and OUT.opt until max_epochs")

    p = command("extract-embeddings", "write per-class bag embeddings for every manifest slide",
                DATA_KEYS + ["out", "num_classes"], required=["manifest", "out"])
    p.add_argument("--ckpt", required=True, help="branch checkpoint")
    p.add_argument("--modality", choices=["he", "ihc"], required=True, help="which bag of each pair to embed")

    p = command("fuse", "build fused bags from HE and IHC embedding directories",
                ["manifest", "out", "num_classes", "hidden_dim", "pooled_dim", "l2_normalize"],
                required=["manifest", "out"])
    p.add_argument("--he-embeddings", required=True, help="directory written by extract-embeddings")
    p.add_argument("--ihc-embeddings", required=True, help="directory written by extract-embeddings")

    p = command("evaluate", "report ACC/AUC of a checkpoint on one split subset",
                DATA_KEYS + ["split", "out", "num_classes"], required=["manifest", "split"])
    p.add_argument("--ckpt", required=True, help="branch checkpoint")
    p.add_argument("--modality", choices=["he", "ihc", "fused"], required=True, help="bags to score")
    p.add_argument("--subset", choices=["train", "val", "test"], default="test",
                   help="split subset to score (default: test)")

    p = command("crossval", "Monte-Carlo cross-validation of the full two-stage pipeline",
                DATA_KEYS + ["out", "seed", "folds", "jobs"] + TRAIN_KEYS + STAGE2_KEYS,
                required=["manifest", "out"])
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences",
                       description="compare analytic gradients with finite differences")
    p.add_argument("--seed", type=int, default=0, help="suite seed (default: 0)")
    p.add_argument("--configs", type=int, default=100, help="random configurations (default: 100)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default: 0.0001)")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step (default: 0.0001)")
    return parser


def _resolve(args) -> dict:
    file_values = config.load_config(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k) for k in config.KEYS if hasattr(args, k)}
    cfg = config.effective(file_values, flags)
    missing = [k for k in getattr(args, "required_keys", ()) if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join(f"--{m.replace('_', '-')}" for m in missing))
    return cfg


def _feature_root(cfg) -> Path:
    return Path(cfg["features"]) if cfg["features"] else Path(cfg["manifest"]).parent


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _prepare_dir(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _echo_config(directory: Path, cfg: dict):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "effective_config.txt").write_text(config.format_config(cfg), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg) -> int:
    sc = config.synth_config(cfg)
    out = Path(cfg["out"])
    _prepare_dir(out, args.force)
    ds = generate_synthetic_dataset(sc, cfg["seed"], out)
    write_split(stratified_split(ds.manifest, seed=cfg["seed"]), out / "split.txt")
    _echo_config(out, cfg)
    print(f"manifest: {ds.manifest_path}")
    for c, n in sorted(ds.class_counts.items()):
        print(f"class {c}: {n}")
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    manifest = read_manifest(_need_file(cfg["manifest"], "manifest"), cfg["num_classes"])
    split = stratified_split(manifest, seed=cfg["seed"])
    write_split(split, cfg["out"])
    print(f"train {len(split.train_ids)}  val {len(split.val_ids)}  test {len(split.test_ids)}")
    return EXIT_OK


def _load_bags(cfg, modality: Modality) -> tuple[dict, dict]:
    """Bags and labels by slide id for one modality."""
    manifest = _need_file(cfg["manifest"], "manifest")
    if modality is Modality.FUSED:
        pairs = load_fused_manifest(manifest, _feature_root(cfg), cfg["num_classes"])
        return {b.slide_id: b for b, _ in pairs}, {b.slide_id: y for b, y in pairs}
    samples = load_manifest(manifest, _feature_root(cfg), cfg["num_classes"])
    return {s.slide_id: s.bag(modality) for s in samples}, {s.slide_id: s.label for s in samples}


def _subset(ids, bags, labels):
    return [(bags[i], labels[i]) for i in ids if i in bags]


def _train(args, cfg, modality: Modality, stage2: bool) -> int:
    split = read_split(_need_file(cfg["split"], "split file"))
    base_seed = cfg["seed"] if args.seed is not None or "seed" in _file_keys(args) else split.seed
    bcfg = config.branch_config(cfg, stage2=stage2, seed=base_seed + SEED_OFFSETS[modality])
    bags, labels = _load_bags(cfg, modality)
    train, val = _subset(split.train_ids, bags, labels), _subset(split.val_ids, bags, labels)
    ckpt = Path(cfg["out"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        best = branch.load_params(_need_file(ckpt, "checkpoint"))
        resume = branch.load_train_state(_need_file(branch.opt_path(ckpt), "optimizer state"), best)
    stage = f"train-{modality.value.lower()}"
    try:
        result = branch.train_branch(train, val, bcfg, resume=resume, stage=stage)
    except DivergenceError as exc:
        if exc.params is not None:
            branch.save_params(ckpt.with_name(ckpt.name + ".partial"), exc.params)
        raise
    branch.save_params(ckpt, result.params)
    branch.save_train_state(branch.opt_path(ckpt), result.state)
    branch.write_history(ckpt.with_name(ckpt.name + ".history.tsv"), result.history)
    _echo_config(ckpt.parent, cfg)
    print(f"best val loss {result.best_val:.6f} at epoch {result.best_epoch} "
          f"({len(result.history)} epochs run)")
    return EXIT_OK


def _file_keys(args) -> set:
    return set(config.load_config(args.config)) if getattr(args, "config", None) else set()


def cmd_train_branch(args, cfg) -> int:
    modality = Modality.parse(args.modality)
    return _train(args, cfg, modality, stage2=modality is Modality.FUSED)


def cmd_train_fused(args, cfg) -> int:
    return _train(args, cfg, Modality.FUSED, stage2=True)


def cmd_extract(args, cfg) -> int:
    params = branch.load_params(_need_file(args.ckpt, "checkpoint"))
    bags, _ = _load_bags(cfg, Modality.parse(args.modality))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for emb in branch.extract_bag_embeddings(params, bags.values()):
        write_tensors(out / f"{emb.slide_id}.emb", {"Z": emb.Z})
    print(f"wrote {len(bags)} embeddings to {out}")
    return EXIT_OK


def cmd_fuse(args, cfg) -> int:
    manifest = read_manifest(_need_file(cfg["manifest"], "manifest"), cfg["num_classes"])
    spec = config.pooling_spec(cfg)
    out = Path(cfg["out"])
    (out / "bags").mkdir(parents=True, exist_ok=True)
    rows = []
    for e in manifest.entries:
        paths = [Path(d) / f"{e.slide_id}.emb" for d in (args.he_embeddings, args.ihc_embeddings)]
        if not all(p.is_file() for p in paths):
            log.warning("skipping %s: missing embedding", e.slide_id)
            continue
        z_he, z_ihc = (branch.BagEmbeddings(e.slide_id, read_tensors(p)["Z"]) for p in paths)
        fb = build_fused_bag(z_he, z_ihc, e.label, spec, cfg["l2_normalize"])
        rel = f"bags/{e.slide_id}.milf"
        write_bag(fb.as_feature_bag(), out / rel)
        rows.append((e.slide_id, e.label, rel))
    if not rows:
        raise ValidationError("no slide had both embeddings")
    write_fused_manifest(rows, out / "fused_manifest.tsv")
    _echo_config(out, cfg)
    print(f"fused manifest: {out / 'fused_manifest.tsv'} ({len(rows)} bags)")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    params = branch.load_params(_need_file(args.ckpt, "checkpoint"))
    split = read_split(_need_file(cfg["split"], "split file"))
    bags, labels = _load_bags(cfg, Modality.parse(args.modality))
    ids = [i for i in split.subset(args.subset) if i in bags]
    if not ids:
        raise ValidationError(f"no {args.subset} slides found in the manifest")
    scores = branch.predict_proba(params, [bags[i] for i in ids])
    report = evaluate_scores(scores, np.array([labels[i] for i in ids]), params.num_classes,
                             model=args.modality.upper())
    if cfg["out"]:
        write_metrics(cfg["out"], {report.model: report})
    print(f"{report.model}\tACC {report.acc:.4f}\tAUC {report.auc_macro:.4f}\t(n={report.total})")
    return EXIT_OK


def cmd_crossval(args, cfg) -> int:
    tcfg = config.two_stage_config(cfg)
    samples = load_manifest(_need_file(cfg["manifest"], "manifest"), _feature_root(cfg), cfg["num_classes"])
    out = Path(cfg["out"])
    _prepare_dir(out, args.force)
    _echo_config(out, cfg)
    result = monte_carlo_cv(samples, tcfg, out, jobs=cfg["jobs"])
    print("model\tACC mean\tACC std\tAUC mean\tAUC std")
    for r in result.summary:
        print(f"{r.model}\t{r.acc_mean:.4f}\t{r.acc_std:.4f}\t{r.auc_mean:.4f}\t{r.auc_std:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg=None) -> int:
    report = run_gradcheck(args.configs, args.seed, args.tolerance, args.step)
    print(report.table())
    print(f"max relative error {report.max_error:.3e} over {len(report.cases)} configurations "
          f"({report.seconds:.1f}s), tolerance {args.tolerance:g}")
    if not report.passed:
        worst = max(report.failures(), key=lambda c: c.max_error)
        print(f"FAIL: {len(report.failures())} configuration(s) exceed tolerance; worst seed {worst.seed} "
              f"(K={worst.K}, N={worst.N}, dims={worst.dims})")
        return EXIT_CHECK
    print("PASS")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train-branch": cmd_train_branch,
            "train-fused": cmd_train_fused, "extract-embeddings": cmd_extract, "fuse": cmd_fuse,
            "evaluate": cmd_evaluate, "crossval": cmd_crossval, "gradcheck": cmd_gradcheck}


def _setup_logging():
    level = os.environ.get("MILFUSE_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        return COMMANDS[args.command](args, _resolve(args))
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MilfuseError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
