"""Single-modality gated-attention MIL branch with hand-written gradients.

For a bag ``R`` (K x D) and N classes the forward pass is::

    H       = R W_fc^T                          K x Dh
    G       = tanh(H V^T) * sigmoid(H U^T)      K x Da
    A[n]    = softmax_k(W_atten[n] . G[k])      N x K   (one attention head per class)
    Z[n]    = sum_k A[n, k] H[k]                N x Dh
    s[n]    = W_c[n] . Z[n]
    p       = softmax(s)

The training objective is ``c1 * CE(p, y) + c2 * L_patch`` where ``L_patch`` is a
binary smoothed top-1 SVM loss on the top/bottom attended instances of the
ground-truth class, scored by that class's instance classifier.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ._kernels import adam_update
from .checkpoint import read_tensors, write_tensors
from .errors import ContractError, DivergenceError, NumericError, ShapeError, ValidationError
from .features import FeatureBag
from .numerics import DTYPE, glorot_uniform, make_rng, sigmoid, softmax

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class BranchConfig:
    in_dim: int = 1024
    hidden_dim: int = 512
    attn_dim: int = 256
    num_classes: int = 4
    c1: float = 0.7
    c2: float = 0.3
    k_sample: int = 8
    tau: float = 1.0
    patch_reduction: str = "mean"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    max_epochs: int = 200
    min_epochs: int = 50
    patience: int = 20
    min_delta: float = 1e-5
    seed: int = 0

    def validate(self) -> "BranchConfig":
        for name in ("in_dim", "hidden_dim", "attn_dim", "k_sample", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.c1 < 0 or self.c2 < 0:
            raise ValidationError(f"loss weights must be non-negative, got c1={self.c1}, c2={self.c2}")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.patch_reduction not in ("mean", "sum"):
            raise ValidationError(f"patch_reduction must be 'mean' or 'sum', got {self.patch_reduction!r}")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValidationError("need lr > 0, eps > 0, weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.min_epochs < 0 or self.patience < 0 or self.min_delta < 0:
            raise ValidationError("min_epochs, patience and min_delta must be non-negative")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")
        return self


@dataclass
class BranchParams:
    W_fc: np.ndarray     # Dh x D
    V: np.ndarray        # Da x Dh, tanh branch
    U: np.ndarray        # Da x Dh, sigmoid gate
    W_atten: np.ndarray  # N x Da, one attention head per class
    W_c: np.ndarray      # N x Dh, slide classifiers
    W_inst: np.ndarray   # N x 2 x Dh, instance classifiers
    b_inst: np.ndarray   # N x 2

    @property
    def in_dim(self) -> int:
        return self.W_fc.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_fc.shape[0]

    @property
    def attn_dim(self) -> int:
        return self.V.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W_c.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "BranchParams":
        return BranchParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "BranchParams":
        return BranchParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def check(self):
        dh, d = self.W_fc.shape
        da, n = self.V.shape[0], self.W_c.shape[0]
        expected = {"W_fc": (dh, d), "V": (da, dh), "U": (da, dh), "W_atten": (n, da),
                    "W_c": (n, dh), "W_inst": (n, 2, dh), "b_inst": (n, 2)}
        for name, arr in self.arrays().items():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.isfinite(arr).all():
                raise NumericError(f"{name} contains non-finite values")
        return self

    def to_tensors(self) -> dict[str, np.ndarray]:
        """Flatten to checkpoint tensor names (``W_atten.2``, ``W_inst.0.bias``, ...)."""
        out = {"W_fc": self.W_fc, "V": self.V, "U": self.U}
        n = self.num_classes
        out.update({f"W_atten.{i}": self.W_atten[i:i + 1] for i in range(n)})
        out.update({f"W_c.{i}": self.W_c[i:i + 1] for i in range(n)})
        for i in range(n):
            out[f"W_inst.{i}"] = self.W_inst[i]
            out[f"W_inst.{i}.bias"] = self.b_inst[i:i + 1]
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray], prefix: str = "") -> "BranchParams":
        try:
            n = sum(1 for k in t if k.startswith(prefix + "W_c."))
            if n == 0:
                raise KeyError(prefix + "W_c.0")
            g = lambda name: t[prefix + name]  # noqa: E731
            params = cls(
                W_fc=g("W_fc").copy(), V=g("V").copy(), U=g("U").copy(),
                W_atten=np.vstack([g(f"W_atten.{i}") for i in range(n)]),
                W_c=np.vstack([g(f"W_c.{i}") for i in range(n)]),
                W_inst=np.stack([g(f"W_inst.{i}") for i in range(n)]),
                b_inst=np.vstack([g(f"W_inst.{i}.bias") for i in range(n)]),
            )
        except KeyError as exc:
            raise ValidationError(f"checkpoint is missing tensor {exc.args[0]!r}") from None
        return params.check()


def init_params(cfg: BranchConfig, rng: np.random.Generator | None = None) -> BranchParams:
    """Glorot-uniform weights, zero instance-classifier biases."""
    if rng is None:
        rng = make_rng(cfg.seed, 0)
    d, dh, da, n = cfg.in_dim, cfg.hidden_dim, cfg.attn_dim, cfg.num_classes
    return BranchParams(
        W_fc=glorot_uniform(rng, dh, d),
        V=glorot_uniform(rng, da, dh),
        U=glorot_uniform(rng, da, dh),
        W_atten=np.vstack([glorot_uniform(rng, 1, da) for _ in range(n)]),
        W_c=np.vstack([glorot_uniform(rng, 1, dh) for _ in range(n)]),
        W_inst=np.stack([glorot_uniform(rng, 2, dh) for _ in range(n)]),
        b_inst=np.zeros((n, 2)),
    )


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardTrace:
    H: np.ndarray            # K x Dh
    gate_t: np.ndarray       # K x Da
    gate_s: np.ndarray       # K x Da
    logits_attn: np.ndarray  # N x K
    A: np.ndarray            # N x K
    Z: np.ndarray            # N x Dh
    s: np.ndarray            # N
    p: np.ndarray            # N


def _features(bag) -> np.ndarray:
    x = bag.features if isinstance(bag, FeatureBag) else np.asarray(bag, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"bag must be K x D with K >= 1, got shape {x.shape}")
    return x


def forward(params: BranchParams, bag) -> ForwardTrace:
    R = _features(bag)
    if R.shape[1] != params.in_dim:
        raise ShapeError(f"bag has {R.shape[1]} feature dims, branch expects {params.in_dim}")
    H = R @ params.W_fc.T
    T = np.tanh(H @ params.V.T)
    S = sigmoid(H @ params.U.T)
    logits = params.W_atten @ (T * S).T
    A = softmax(logits, axis=1)
    Z = A @ H
    s = np.einsum("nd,nd->n", params.W_c, Z)
    return ForwardTrace(H, T, S, logits, A, Z, s, softmax(s))


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossReport:
    l_slide: float
    l_patch: float
    l_total: float
    c1: float
    c2: float


def slide_loss(p, y: int) -> float:
    p = np.asarray(p, dtype=DTYPE)
    if not 0 <= y < p.shape[0]:
        raise ContractError(f"class {y} outside [0, {p.shape[0]})")
    py = float(p[y])
    if py < PROB_FLOOR:
        warnings.warn(f"p[{y}]={py:.3g} clamped to {PROB_FLOOR} before log", RuntimeWarning, stacklevel=2)
        py = PROB_FLOOR
    return -math.log(py)


def smooth_svm_loss(scores, targets, tau: float = 1.0) -> np.ndarray:
    """Per-row ``tau * log sum_j exp((margin(j, t) + s_j - s_t) / tau)`` with unit margin."""
    scores = np.atleast_2d(np.asarray(scores, dtype=DTYPE))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    rows = np.arange(scores.shape[0])
    u = scores + 1.0
    u[rows, targets] -= 1.0
    u = (u - scores[rows, targets][:, None]) / tau
    m = u.max(axis=1)
    return tau * (m + np.log(np.exp(u - m[:, None]).sum(axis=1)))


def _smooth_svm_grad(scores: np.ndarray, targets: np.ndarray, tau: float) -> np.ndarray:
    # d/ds_m of tau*LSE(u) reduces to softmax(u)_m - [m == target]
    rows = np.arange(scores.shape[0])
    u = scores + 1.0
    u[rows, targets] -= 1.0
    u = (u - scores[rows, targets][:, None]) / tau
    g = softmax(u, axis=1)
    g[rows, targets] -= 1.0
    return g


def select_instances(attention_row: np.ndarray, k_sample: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the top-k and bottom-k attended instances and their pseudo-labels (1, 0).

    ``k = min(k_sample, ceil(K / 2))``; for K = 1 the single instance is both.
    """
    K = attention_row.shape[0]
    k = min(k_sample, -(-K // 2))
    if K == 1:
        warnings.warn("single-instance bag: the same instance is used as positive and negative",
                      RuntimeWarning, stacklevel=2)
    top = np.argsort(-attention_row, kind="stable")[:k]
    bottom = np.argsort(attention_row, kind="stable")[:k]
    idx = np.concatenate([top, bottom])
    targets = np.concatenate([np.ones(k, dtype=np.intp), np.zeros(k, dtype=np.intp)])
    return idx, targets


def instance_loss(trace: ForwardTrace, params: BranchParams, y: int, k_sample: int = 8,
                  tau: float = 1.0, reduction: str = "mean") -> float:
    if k_sample < 1 or tau <= 0:
        raise ContractError(f"need k_sample >= 1 and tau > 0, got {k_sample}, {tau}")
    idx, targets = select_instances(trace.A[y], k_sample)
    q = trace.H[idx] @ params.W_inst[y].T + params.b_inst[y]
    per = smooth_svm_loss(q, targets, tau)
    return float(per.mean() if reduction == "mean" else per.sum())


def compute_losses(trace: ForwardTrace, params: BranchParams, y: int, cfg: BranchConfig) -> LossReport:
    l_slide = slide_loss(trace.p, y)
    l_patch = 0.0
    if cfg.c2 != 0:
        l_patch = instance_loss(trace, params, y, cfg.k_sample, cfg.tau, cfg.patch_reduction)
    return LossReport(l_slide, l_patch, cfg.c1 * l_slide + cfg.c2 * l_patch, cfg.c1, cfg.c2)


def total_loss(params: BranchParams, bag, y: int, cfg: BranchConfig) -> float:
    return compute_losses(forward(params, bag), params, y, cfg).l_total


# ---------------------------------------------------------------------------
# backward


def backward(params: BranchParams, trace: ForwardTrace, bag, y: int, cfg: BranchConfig) -> BranchParams:
    """Analytic gradient of ``c1 * L_slide + c2 * L_patch``.

    The top/bottom-k selection in the instance loss is piecewise constant and
    gets no gradient; gradients still reach W_inst, b_inst and the selected H rows.
    """
    R = _features(bag)
    K, N = R.shape[0], params.num_classes
    if trace.H.shape != (K, params.hidden_dim) or trace.A.shape != (N, K) or R.shape[1] != params.in_dim:
        raise ContractError("trace does not belong to this (params, bag) pair")
    H, T, S, A = trace.H, trace.gate_t, trace.gate_s, trace.A
    grads = BranchParams(W_fc=None, V=None, U=None, W_atten=None, W_c=None,
                         W_inst=np.zeros_like(params.W_inst), b_inst=np.zeros_like(params.b_inst))

    ds = trace.p.copy()
    ds[y] -= 1.0
    if trace.p[y] < PROB_FLOOR:
        ds[:] = 0.0  # clamped log is flat
    ds *= cfg.c1
    grads.W_c = ds[:, None] * trace.Z
    dZ = ds[:, None] * params.W_c
    dA = dZ @ H.T
    dH = A.T @ dZ
    dlogits = A * (dA - (dA * A).sum(axis=1, keepdims=True))
    G = T * S
    grads.W_atten = dlogits @ G
    dG = dlogits.T @ params.W_atten
    dPt = dG * S * (1.0 - T * T)
    dPs = dG * T * S * (1.0 - S)
    grads.V = dPt.T @ H
    grads.U = dPs.T @ H
    dH += dPt @ params.V + dPs @ params.U

    if cfg.c2 != 0:
        idx, targets = select_instances(A[y], cfg.k_sample)
        Hs = H[idx]
        q = Hs @ params.W_inst[y].T + params.b_inst[y]
        dq = _smooth_svm_grad(q, targets, cfg.tau)
        dq *= cfg.c2 / len(idx) if cfg.patch_reduction == "mean" else cfg.c2
        grads.W_inst[y] = dq.T @ Hs
        grads.b_inst[y] = dq.sum(axis=0)
        np.add.at(dH, idx, dq @ params.W_inst[y])

    grads.W_fc = dH.T @ R
    return grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: BranchParams
    v: BranchParams
    t: int = 0

    @classmethod
    def zeros(cls, params: BranchParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(params: BranchParams, grads: BranchParams, state: AdamState,
              hyper: BranchConfig) -> tuple[BranchParams, AdamState]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    ``params`` and ``state`` are updated in place and returned.
    """
    p_arr, g_arr = params.arrays(), grads.arrays()
    for name, g in g_arr.items():
        if g.shape != p_arr[name].shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, parameter has {p_arr[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2, wd = hyper.beta1, hyper.beta2, hyper.weight_decay
    step = hyper.lr / (1.0 - b1 ** state.t)
    inv_bc2 = 1.0 / (1.0 - b2 ** state.t)
    m_arr, v_arr = state.m.arrays(), state.v.arrays()
    for name, p in p_arr.items():
        adam_update(p, g_arr[name], m_arr[name], v_arr[name], step, b1, b2, hyper.eps, wd, inv_bc2)
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    params: BranchParams
    adam: AdamState
    epoch: int = 0
    best_params: BranchParams | None = None
    best_val: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    stopped: bool = False
    history: list[EpochRecord] = field(default_factory=list)


@dataclass
class TrainResult:
    params: BranchParams
    history: list[EpochRecord]
    state: TrainState

    @property
    def best_epoch(self) -> int:
        return self.state.best_epoch

    @property
    def best_val(self) -> float:
        return self.state.best_val


def _as_pairs(data) -> list[tuple[np.ndarray, int]]:
    out = []
    for bag, y in data:
        out.append((_features(bag), int(y)))
    return out


def evaluate_loss(params: BranchParams, data, cfg: BranchConfig) -> tuple[float, float]:
    """Mean total loss and accuracy over ``(bag, label)`` pairs."""
    losses, correct = [], 0
    for R, y in _as_pairs(data):
        trace = forward(params, R)
        losses.append(compute_losses(trace, params, y, cfg).l_total)
        correct += int(np.argmax(trace.p) == y)
    return float(np.mean(losses)), correct / len(losses)


def train_branch(train, val, cfg: BranchConfig, resume: TrainState | None = None,
                 stage: str | None = None) -> TrainResult:
    """Early-stopped training, one bag per Adam step.

    ``train`` and ``val`` are sequences of ``(bag, label)`` where a bag is a
    FeatureBag or a K x D array. Epoch ``e`` visits the training bags in the order
    drawn from stream ``(seed, 1, e)``, so resuming from a saved state replays
    the exact same trajectory. Returns the parameters with the lowest mean
    validation loss.
    """
    cfg.validate()
    train_pairs, val_pairs = _as_pairs(train), _as_pairs(val)
    if not train_pairs or not val_pairs:
        raise ValidationError("train_branch needs non-empty train and val sets")
    for R, y in train_pairs + val_pairs:
        if R.shape[1] != cfg.in_dim:
            raise ShapeError(f"bag has {R.shape[1]} feature dims, config expects {cfg.in_dim}")
        if not 0 <= y < cfg.num_classes:
            raise ValidationError(f"label {y} outside [0, {cfg.num_classes})")

    if resume is None:
        params = init_params(cfg)
        state = TrainState(params=params, adam=AdamState.zeros(params), best_params=params.copy())
    else:
        state = resume
        if state.params.in_dim != cfg.in_dim or state.params.num_classes != cfg.num_classes:
            raise ShapeError("resume state does not match the branch configuration")
    params = state.params

    n = len(train_pairs)
    for epoch in range(state.epoch + 1, cfg.max_epochs + 1):
        if state.stopped:
            break
        order = make_rng(cfg.seed, 1, epoch).permutation(n)
        running = 0.0
        for i in order:
            R, y = train_pairs[i]
            trace = forward(params, R)
            rep = compute_losses(trace, params, y, cfg)
            if not math.isfinite(rep.l_total):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}",
                                      state.best_params, stage, state.history)
            try:
                adam_step(params, backward(params, trace, R, y, cfg), state.adam, cfg)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", state.best_params, stage,
                                      state.history) from exc
            running += rep.l_total
        val_loss, val_acc = evaluate_loss(params, val_pairs, cfg)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}",
                                  state.best_params, stage, state.history)
        state.history.append(EpochRecord(epoch, running / n, val_loss, val_acc))
        state.epoch = epoch
        log.debug("%sepoch %d train %.5f val %.5f acc %.3f", f"[{stage}] " if stage else "",
                  epoch, running / n, val_loss, val_acc)
        if val_loss < state.best_val - cfg.min_delta:
            state.best_val, state.best_epoch, state.bad_epochs = val_loss, epoch, 0
            state.best_params = params.copy()
        else:
            state.bad_epochs += 1
        if epoch > cfg.min_epochs and state.bad_epochs >= cfg.patience:
            state.stopped = True
            log.info("%searly stop at epoch %d (best %d, val %.5f)", f"[{stage}] " if stage else "",
                     epoch, state.best_epoch, state.best_val)
            break
    return TrainResult(state.best_params, state.history, state)


# ---------------------------------------------------------------------------
# inference


@dataclass
class BagEmbeddings:
    slide_id: str
    Z: np.ndarray  # N x Dh


def extract_bag_embeddings(params: BranchParams, bags) -> list[BagEmbeddings]:
    out = []
    for bag in bags:
        sid = bag.slide_id if isinstance(bag, FeatureBag) else ""
        out.append(BagEmbeddings(sid, forward(params, bag).Z))
    return out


def predict_proba(params: BranchParams, bags) -> np.ndarray:
    return np.vstack([forward(params, b).p for b in bags])


# ---------------------------------------------------------------------------
# persistence


def save_params(path, params: BranchParams) -> None:
    write_tensors(path, params.to_tensors())


def load_params(path) -> BranchParams:
    return BranchParams.from_tensors(read_tensors(path))


def opt_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".opt")


def save_train_state(path, state: TrainState) -> None:
    """Optimizer sidecar: Adam moments, latest params and early-stopping counters."""
    t: dict[str, np.ndarray] = {}
    for prefix, bp in (("m.", state.adam.m), ("v.", state.adam.v), ("last.", state.params)):
        t.update({prefix + k: v for k, v in bp.to_tensors().items()})
    scalars = {"t": state.adam.t, "epoch": state.epoch, "best_val": state.best_val,
               "best_epoch": state.best_epoch, "bad_epochs": state.bad_epochs,
               "stopped": float(state.stopped)}
    t.update({k: np.array([[float(v)]]) for k, v in scalars.items()})
    if state.history:
        t["history"] = np.array([[r.epoch, r.train_loss, r.val_loss, r.val_acc] for r in state.history])
    write_tensors(path, t)


def load_train_state(path, best_params: BranchParams) -> TrainState:
    t = read_tensors(path)
    try:
        s = {k: float(t[k][0, 0]) for k in ("t", "epoch", "best_val", "best_epoch", "bad_epochs", "stopped")}
    except KeyError as exc:
        raise ValidationError(f"{path}: optimizer state is missing {exc.args[0]!r}") from None
    history = [EpochRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in t.get("history", [])]
    return TrainState(
        params=BranchParams.from_tensors(t, "last."),
        adam=AdamState(BranchParams.from_tensors(t, "m."), BranchParams.from_tensors(t, "v."), int(s["t"])),
        epoch=int(s["epoch"]), best_params=best_params, best_val=s["best_val"],
        best_epoch=int(s["best_epoch"]), bad_epochs=int(s["bad_epochs"]), stopped=bool(s["stopped"]),
        history=history,
    )


def write_history(path, history: list[EpochRecord]) -> None:
    lines = ["epoch\ttrain_loss\tval_loss\tval_acc"]
    lines += [f"{r.epoch}\t{r.train_loss:.10g}\t{r.val_loss:.10g}\t{r.val_acc:.6f}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def with_overrides(cfg: BranchConfig, **kw) -> BranchConfig:
    return replace(cfg, **kw)
