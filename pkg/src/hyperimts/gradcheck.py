"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .data import Observation, SplitSample
from .model import Instance, ModelConfig, ModelParams, decode, run_layers
from .tensor import Tensor
from .training import masked_mse

# Denominator floor: at step 1e-5 the difference quotient carries roughly 1e-11 of
# rounding noise, so gradients below this magnitude are compared absolutely.
REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error of ``fn``'s gradient, probed through a random projection of its output."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    w = np.random.default_rng(seed).normal(size=out.shape)

    def value():
        with tt.no_grad():
            return float(np.sum(fn(*leaves).data * w))

    loss = tt.sum_all(tt.mul(out, Tensor(w)))
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(value, leaf.data, step)
        worst = max(worst, float(rel_error(leaf.grad, num).max(initial=0.0)))
    return worst


@dataclass
class GradcheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    retried: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> tuple[str, float]:
        if not self.per_param:
            return "", 0.0
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.tolerance

    def summary(self) -> str:
        name, err = self.worst
        status = "PASS" if self.passed else "FAIL"
        n_skip = sum(self.skipped.values())
        return (
            f"{status}: {len(self.per_param)} parameter tensors, worst {name} rel. err {err:.3e} "
            f"(tolerance {self.tolerance:g}, {sum(self.retried.values())} entries passing only at a smaller step, "
            f"{n_skip} gate-crossing entries skipped)"
        )


def tiny_instance(seed: int = 0) -> Instance:
    """U=3 variables, 6 timestamps, 8 lookback observations and 2 queries (M=10)."""
    rng = np.random.default_rng(seed)
    look = [(1.0, 0), (1.0, 1), (2.0, 0), (2.0, 2), (3.0, 1), (4.0, 0), (4.0, 1), (4.0, 2)]
    obs = tuple(Observation(t, u, float(z)) for (t, u), z in zip(look, rng.normal(size=len(look))))
    split = SplitSample(
        lookback=obs,
        queries=((5.0, 0), (6.0, 2)),
        targets=tuple(rng.normal(size=2).tolist()),
        t_split=4.0,
        U=3,
    )
    return Instance.from_split(split)


def tiny_config(**kw) -> ModelConfig:
    base = dict(p_obs=8, p_time=8, p_var=8, heads=2, layers=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def model_gradcheck(
    instance: Instance,
    params: ModelParams,
    config: ModelConfig | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradcheckReport:
    """Compare every trainable parameter's gradient of the masked MSE with finite differences.

    The fusion gate is a hard threshold; an entry whose perturbation flips
    the gate pattern is retried at smaller steps and skipped if it still flips.
    An entry whose difference quotient disagrees is also re-probed at smaller
    steps, since a ReLU input lying within ``step`` of zero bends the quotient;
    a wrong analytic gradient disagrees at every step.
    """
    config = params.config if config is None else config

    def run():
        state = run_layers(instance, params, config)
        loss = masked_mse(decode(state, instance.graph, params), instance.targets)
        return loss, state.alpha

    params.zero_grad()
    loss, alpha0 = run()
    loss.backward()

    def probe():
        with tt.no_grad():
            l, a = run()
        return l.item(), a

    report = GradcheckReport(tolerance=tolerance)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        errs = []
        for i in range(flat.size):
            old = flat[i]
            h = step
            err = None
            for attempt in range(4):
                flat[i] = old + h
                fp, ap = probe()
                flat[i] = old - h
                fm, am = probe()
                flat[i] = old
                h /= 10
                if not (_same_gate(alpha0, ap) and _same_gate(alpha0, am)):
                    continue
                e = float(rel_error(analytic[i], (fp - fm) / (2 * (h * 10))))
                err = e if err is None else min(err, e)
                if err < tolerance:
                    break
            if attempt and err is not None and err < tolerance:
                report.retried[name] = report.retried.get(name, 0) + 1
            if err is None:
                report.skipped[name] = report.skipped.get(name, 0) + 1
                continue
            errs.append(err)
        report.per_param[name] = max(errs, default=0.0)
    return report


def _same_gate(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return bool(np.array_equal(a > 0, b > 0))
