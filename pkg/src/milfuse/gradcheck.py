"""Randomized comparison of ``branch.backward`` against central finite differences."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field


from .branch import BranchConfig, backward, forward, init_params, total_loss
from .numerics import finite_diff_grad, make_rng, relative_error

BAG_SIZES = (1, 2, 5, 17)
CLASS_COUNTS = (2, 3, 4)
REDUCED_DIMS = ((16, 8, 4), (12, 6, 3), (10, 8, 5), (8, 4, 2))

# Denominator floor for the per-tensor relative error. Central differences at
# h=1e-4 carry ~1e-12 roundoff, which would dominate tensors whose true gradient
# is near zero (saturated softmax, K=1 attention).
GRAD_FLOOR = 1e-6


@dataclass
class CaseResult:
    seed: int
    K: int
    N: int
    dims: tuple[int, int, int]
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


@dataclass
class GradcheckReport:
    cases: list[CaseResult]
    tolerance: float
    seconds: float = 0.0
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(c.max_error for c in self.cases)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failures(self) -> list[CaseResult]:
        return [c for c in self.cases if c.max_error > self.tolerance]

    def table(self) -> str:
        lines = ["tensor\tmax_rel_err"]
        lines += [f"{k}\t{v:.3e}" for k, v in self.per_tensor.items()]
        return "\n".join(lines)


def random_case(seed: int):
    """A reproducible small branch, bag and label for gradient checking."""
    rng = make_rng(seed, 0x6C)
    K = BAG_SIZES[int(rng.integers(len(BAG_SIZES)))]
    N = CLASS_COUNTS[int(rng.integers(len(CLASS_COUNTS)))]
    d, dh, da = REDUCED_DIMS[int(rng.integers(len(REDUCED_DIMS)))]
    cfg = BranchConfig(in_dim=d, hidden_dim=dh, attn_dim=da, num_classes=N,
                       c1=float(rng.uniform(0.2, 1.0)), c2=float(rng.uniform(0.2, 1.0)),
                       k_sample=int(rng.integers(1, 5)), tau=float(rng.uniform(0.5, 2.0)),
                       patch_reduction="mean" if rng.random() < 0.75 else "sum")
    params = init_params(cfg, rng)
    for arr in params.arrays().values():
        arr *= 1.5
    params.b_inst[:] = rng.normal(0.0, 0.5, params.b_inst.shape)
    bag = rng.standard_normal((K, d))
    y = int(rng.integers(N))
    return cfg, params, bag, y


def check_case(seed: int, h: float = 1e-4) -> CaseResult:
    cfg, params, bag, y = random_case(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        grads = backward(params, forward(params, bag), bag, y, cfg)
        errors = {}
        for name, value in params.arrays().items():
            def f(x, name=name):
                trial = params.copy()
                setattr(trial, name, x)
                return total_loss(trial, bag, y, cfg)

            numeric = finite_diff_grad(f, value, h)
            errors[name] = relative_error(getattr(grads, name), numeric, floor=GRAD_FLOOR)
    return CaseResult(seed, bag.shape[0], cfg.num_classes, (cfg.in_dim, cfg.hidden_dim, cfg.attn_dim), errors)


def run_gradcheck(num_configs: int = 100, seed: int = 0, tolerance: float = 1e-4,
                  h: float = 1e-4) -> GradcheckReport:
    start = time.perf_counter()
    cases = [check_case(seed * 100_003 + i, h) for i in range(num_configs)]
    per_tensor: dict[str, float] = {}
    for c in cases:
        for k, v in c.errors.items():
            per_tensor[k] = max(per_tensor.get(k, 0.0), v)
    return GradcheckReport(cases, tolerance, time.perf_counter() - start, per_tensor)
