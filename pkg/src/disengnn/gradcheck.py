"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Relative error uses max(|analytic|, |numeric|, DENOM_FLOOR) so that entries whose
# true gradient is ~0 are judged on absolute error instead of amplified FD noise.
DENOM_FLOOR = 1e-5


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float
    finite: bool = True


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def worst(self) -> ParamCheck | None:
        if not self.params:
            return None
        return max(self.params, key=lambda p: (not p.finite, p.max_rel_error))

    @property
    def max_rel_error(self) -> float:
        w = self.worst
        if w is None:
            return 0.0
        return float("inf") if not w.finite else w.max_rel_error

    @property
    def passed(self) -> bool:
        return all(p.finite for p in self.params) and self.max_rel_error < self.tolerance

    def failures(self) -> list[str]:
        return [p.name for p in self.params if not p.finite or p.max_rel_error >= self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = DENOM_FLOOR,
) -> GradCheckReport:
    """Compare ``backward()`` gradients of scalar ``f(params)`` with central differences.

    All parameters must hold float64 data; the check is meaningless at 32-bit.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name!r} is {p.dtype}")

    for p in params.values():
        p.zero_grad()
    out = f(params)
    report = GradCheckReport(tolerance=tolerance)
    if not np.all(np.isfinite(out.data)):
        for name in params:
            report.params.append(ParamCheck(name, float("inf"), None, float("nan"), float("nan"), False))
        return report
    out.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    with T.no_grad():
        for name, p in params.items():
            numeric = np.zeros_like(p.data)
            finite = True
            flat = p.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(f(params).data)
                flat[i] = orig - h
                down = float(f(params).data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    finite = False
                num_flat[i] = (up - down) / (2.0 * h)
            if not finite:
                report.params.append(ParamCheck(name, float("inf"), None, float("nan"), float("nan"), False))
                continue
            err = relative_error(analytic[name], numeric, floor)
            if err.size == 0:
                report.params.append(ParamCheck(name, 0.0, None, 0.0, 0.0))
                continue
            idx = np.unravel_index(int(np.argmax(err)), err.shape)
            report.params.append(
                ParamCheck(name, float(err[idx]), tuple(int(i) for i in idx),
                           float(analytic[name][idx]), float(numeric[idx]))
            )
    return report


def _random_cases(rng: np.random.Generator) -> dict[str, Callable]:
    """One scalar test function per primitive, each exercising only that op."""

    def r(*shape):
        return rng.normal(size=shape)

    def pos(*shape):
        return rng.uniform(0.5, 2.0, size=shape)

    w3 = r(3, 4)
    w44 = r(4, 4)
    w235 = np.arange(30.0).reshape(2, 3, 5) / 30
    return {
        "add": ({"a": r(3, 4), "b": r(4)}, lambda p: T.tsum(T.mul(T.add(p["a"], p["b"]), w3))),
        "sub": ({"a": r(3, 4), "b": r(3, 1)}, lambda p: T.tsum(T.mul(T.sub(p["a"], p["b"]), w3))),
        "mul": ({"a": r(3, 4), "b": r(3, 4)}, lambda p: T.tsum(T.mul(p["a"], p["b"]))),
        "div": ({"a": r(3, 4), "b": pos(3, 4)}, lambda p: T.tsum(T.mul(T.div(p["a"], p["b"]), w3))),
        "neg": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.neg(p["a"]), w3))),
        "sigmoid": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.sigmoid(p["a"]), w3))),
        "tanh": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.tanh(p["a"]), w3))),
        "exp": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.exp(p["a"]), w3))),
        "log": ({"a": pos(3, 4)}, lambda p: T.tsum(T.mul(T.log(p["a"]), w3))),
        "sqrt": ({"a": pos(3, 4)}, lambda p: T.tsum(T.mul(T.sqrt(p["a"]), w3))),
        "square": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.square(p["a"]), w3))),
        "clamp_min": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.clamp_min(p["a"], 0.05), w3))),
        "matmul": ({"a": r(2, 3, 4), "b": r(4, 5)},
                   lambda p: T.tsum(T.mul(T.matmul(p["a"], p["b"]), w235))),
        "transpose": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.transpose(p["a"]), w3.T))),
        "reshape": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.reshape(p["a"], (4, 3)), w3.reshape(4, 3)))),
        "sum": ({"a": r(3, 4)}, lambda p: T.tsum(T.square(T.tsum(p["a"], axis=0)))),
        "mean": ({"a": r(3, 4)}, lambda p: T.tsum(T.square(T.mean(p["a"], axis=1)))),
        "concat": ({"a": r(3, 2), "b": r(3, 2)}, lambda p: T.tsum(T.mul(T.concat([p["a"], p["b"]], axis=1), w3))),
        "getitem": ({"a": r(5, 4)}, lambda p: T.tsum(T.mul(p["a"][np.array([0, 2, 2])], w3))),
        "softmax": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.softmax(p["a"], axis=-1), w3))),
        "l2_normalize": ({"a": r(3, 4)}, lambda p: T.tsum(T.mul(T.l2_normalize(p["a"], axis=-1), w3))),
        "pairwise_distance": ({"a": r(4, 3)}, lambda p: T.tsum(T.mul(T.pairwise_distance(p["a"]), w44))),
    }


def check_primitives(seed: int = 0, tolerance: float = 1e-6) -> dict[str, float]:
    """Finite-difference check of every registered primitive in isolation.

    Returns the worst relative error per op name.
    """
    rng = np.random.default_rng(seed)
    results = {}
    with T.precision(np.float64):
        for name, (arrays, fn) in _random_cases(rng).items():
            params = {k: T.parameter(v, dtype=np.float64) for k, v in arrays.items()}
            rep = grad_check(fn, params, h=1e-6, tolerance=tolerance)
            results[name] = rep.max_rel_error
    return results


def random_micro_batch(rng: np.random.Generator, n_items: int = 7, n_sessions: int = 3, max_len: int = 5):
    """Sessions with repeats and a single-click session, so every graph shape occurs."""
    seqs = [rng.integers(0, n_items, size=int(rng.integers(2, max_len + 1))).tolist()
            for _ in range(n_sessions - 1)]
    seqs.append([int(rng.integers(0, n_items))])
    labels = rng.integers(0, n_items, size=n_sessions).tolist()
    return seqs, labels


def check_model_loss(d: int = 8, K: int = 2, T_steps: int = 1, L: int = 1, seed: int = 0,
                     lam: float = 5.0, h: float = 1e-5, tolerance: float = 1e-4,
                     n_items: int = 7) -> GradCheckReport:
    """Full-loss check on a random micro-batch at 64-bit, dropout off."""
    from .model import ModelConfig, ModelParams, forward, init_params
    from .optim import make_rng

    cfg = ModelConfig(d=d, K=K, T=T_steps, L=L, lam=lam, dropout=0.0).validate()
    seqs, labels = random_micro_batch(make_rng(seed, "gradcheck"), n_items)
    with T.precision(np.float64):
        params = init_params(cfg, n_items, make_rng(seed, "init"), dtype=np.float64)
        return grad_check(lambda p: forward(cfg, ModelParams(p), seqs, labels).loss,
                          params.tensors, h=h, tolerance=tolerance)
