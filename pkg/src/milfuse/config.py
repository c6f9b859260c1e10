"""Flat ``key = value`` run configuration shared by every CLI command.

Precedence: built-in defaults < config file < command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .branch import BranchConfig
from .errors import ValidationError
from .features import SynthConfig
from .fusion import PoolingSpec
from .pipeline import TwoStageConfig


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str


_B = BranchConfig()
_S = SynthConfig()

KEYS: dict[str, Key] = {k.name: k for k in [
    Key("in_dim", int, _B.in_dim, "stage-1 input feature dimension"),
    Key("hidden_dim", int, _B.hidden_dim, "stage-1 compressed embedding dimension"),
    Key("attn_dim", int, _B.attn_dim, "stage-1 gated-attention dimension"),
    Key("num_classes", int, _B.num_classes, "number of grade classes"),
    Key("lr", float, _B.lr, "Adam learning rate"),
    Key("weight_decay", float, _B.weight_decay, "L2 weight decay added to gradients"),
    Key("beta1", float, _B.beta1, "Adam first-moment decay"),
    Key("beta2", float, _B.beta2, "Adam second-moment decay"),
    Key("eps", float, _B.eps, "Adam epsilon"),
    Key("c1", float, _B.c1, "slide-loss weight"),
    Key("c2", float, _B.c2, "instance-loss weight (stage 1)"),
    Key("k_sample", int, _B.k_sample, "top/bottom instances pseudo-labelled per bag"),
    Key("tau", float, _B.tau, "smooth-SVM temperature"),
    Key("patch_reduction", str, _B.patch_reduction, "instance-loss reduction: mean or sum"),
    Key("max_epochs", int, _B.max_epochs, "maximum training epochs"),
    Key("min_epochs", int, _B.min_epochs, "epochs before early stopping may trigger"),
    Key("patience", int, _B.patience, "epochs without val improvement before stopping"),
    Key("min_delta", float, _B.min_delta, "minimum val-loss decrease counted as improvement"),
    Key("stage2_c2", float, 0.0, "instance-loss weight for the fused branch"),
    Key("stage2_hidden_dim", int, _B.hidden_dim, "fused-branch embedding dimension"),
    Key("stage2_attn_dim", int, _B.attn_dim, "fused-branch attention dimension"),
    Key("pooled_dim", int, 32, "average-pooled embedding length before the Kronecker product"),
    Key("l2_normalize", _bool, False, "l2-normalise fused rows"),
    Key("folds", int, 5, "Monte-Carlo cross-validation folds"),
    Key("seed", int, 0, "base random seed"),
    Key("jobs", int, 1, "worker processes for crossval folds"),
    Key("samples_per_class", int, _S.samples_per_class, "synthetic pairs per class"),
    Key("dim", int, _S.dim, "synthetic feature dimension"),
    Key("min_bag", int, _S.min_bag, "smallest synthetic bag"),
    Key("max_bag", int, _S.max_bag, "largest synthetic bag"),
    Key("signal_fraction", float, _S.signal_fraction, "fraction of signal instances per synthetic bag"),
    Key("signal_scale", float, _S.signal_scale, "per-dimension std of synthetic prototypes"),
    Key("noise_scale", float, _S.noise_scale, "std of synthetic instance noise"),
    Key("manifest", str, None, "manifest TSV path"),
    Key("features", str, None, "feature root for manifest paths (default: manifest directory)"),
    Key("split", str, None, "split file path"),
    Key("out", str, None, "output path"),
]}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = KEYS[key].type(value)
        except ValueError as exc:
            raise ValidationError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def load_config(path) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def effective(file_values: dict[str, Any], flag_values: dict[str, Any]) -> dict[str, Any]:
    cfg = {k.name: k.default for k in KEYS.values()}
    cfg.update(file_values)
    cfg.update({k: v for k, v in flag_values.items() if v is not None})
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg) if cfg[k] is not None)


def branch_config(cfg: dict[str, Any], stage2: bool = False, seed: int | None = None) -> BranchConfig:
    common = dict(num_classes=cfg["num_classes"], c1=cfg["c1"], k_sample=cfg["k_sample"], tau=cfg["tau"],
                  patch_reduction=cfg["patch_reduction"], lr=cfg["lr"], beta1=cfg["beta1"],
                  beta2=cfg["beta2"], eps=cfg["eps"], weight_decay=cfg["weight_decay"],
                  max_epochs=cfg["max_epochs"], min_epochs=cfg["min_epochs"], patience=cfg["patience"],
                  min_delta=cfg["min_delta"], seed=cfg["seed"] if seed is None else seed)
    if stage2:
        bc = BranchConfig(in_dim=cfg["pooled_dim"] ** 2, hidden_dim=cfg["stage2_hidden_dim"],
                          attn_dim=cfg["stage2_attn_dim"], c2=cfg["stage2_c2"], **common)
    else:
        bc = BranchConfig(in_dim=cfg["in_dim"], hidden_dim=cfg["hidden_dim"], attn_dim=cfg["attn_dim"],
                          c2=cfg["c2"], **common)
    return bc.validate()


def pooling_spec(cfg: dict[str, Any]) -> PoolingSpec:
    return PoolingSpec(cfg["hidden_dim"], cfg["pooled_dim"])


def two_stage_config(cfg: dict[str, Any]) -> TwoStageConfig:
    stage1 = branch_config(cfg)
    return TwoStageConfig(he=stage1, ihc=stage1, fused=branch_config(cfg, stage2=True),
                          pooling=pooling_spec(cfg), l2_normalize=cfg["l2_normalize"],
                          num_classes=cfg["num_classes"], seed=cfg["seed"], folds=cfg["folds"]).validate()


def synth_config(cfg: dict[str, Any]) -> SynthConfig:
    sc = SynthConfig(num_classes=cfg["num_classes"], samples_per_class=cfg["samples_per_class"],
                     dim=cfg["dim"], min_bag=cfg["min_bag"], max_bag=cfg["max_bag"],
                     signal_fraction=cfg["signal_fraction"], signal_scale=cfg["signal_scale"],
                     noise_scale=cfg["noise_scale"])
    sc.validate()
    return sc
