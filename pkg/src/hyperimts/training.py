"""Masked-MSE training with step-decayed learning rate and early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from decimal import Decimal
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .data import Dataset, make_forecast_items
from .model import Instance, ModelConfig, ModelParams, forward
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (2024, 2025, 2026, 2027, 2028)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.8
    lr_hold: int = 3
    max_epochs: int = 300
    patience: int = 10
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    batch_size: int = 32
    split_time: float = 36.0
    horizon: int | None = 3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    denormalized_metrics: bool = False

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1 or self.lr_hold < 0:
            raise ValueError("lr_decay must lie in (0, 1] and lr_hold be >= 0")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def masked_mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over entries where ``mask`` is true."""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    mask = np.ones(pred.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(pred.shape)
    n = mask.sum()
    if n <= 0:
        raise ContractError("masked_mse: mask selects no entries")
    err = tt.sub(pred, Tensor(target))
    return tt.scale(tt.sum_all(tt.mul(Tensor(mask), tt.square(err))), 1.0 / n)


def lr_schedule(epoch: int, lr0: float, decay: float = 0.8, hold: int = 3) -> float:
    """``lr0`` for epochs ``1..hold``, then ``lr0 * decay ** (epoch - hold)``.

    The power is taken in decimal on the decay as written, so 0.8 ** 2 is
    0.64 rather than the binary 0.6400000000000001.
    """
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    if epoch <= hold:
        return lr0
    return lr0 * float(Decimal(repr(decay)) ** (epoch - hold))


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- evaluation


def predict(instances: Sequence[Instance], params: ModelParams, config: ModelConfig | None = None) -> list[np.ndarray]:
    with tt.no_grad():
        return [forward(inst, params, config).data.copy() for inst in instances]


def forecast_metrics(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> tuple[float, float]:
    """(MSE, MAE) averaged over every forecast entry."""
    p = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1) for x in preds]) if preds else np.zeros(0)
    y = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1) for x in targets]) if targets else np.zeros(0)
    if p.shape != y.shape:
        raise ContractError(f"{p.size} predictions for {y.size} targets")
    if p.size == 0:
        return math.nan, math.nan
    err = p - y
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def evaluate(instances: Sequence[Instance], params: ModelParams, config: ModelConfig | None = None) -> tuple[float, float]:
    """Normalized-space MSE and MAE over the forecast queries of ``instances``."""
    return forecast_metrics(predict(instances, params, config), [i.targets for i in instances])


def _denormalized_metrics(instances, preds, mean, std) -> tuple[float, float]:
    raw_p, raw_y = [], []
    for inst, p in zip(instances, preds):
        u = np.array([q[1] for q in inst.split.queries])
        raw_p.append(p * std[u] + mean[u])
        raw_y.append(inst.targets * std[u] + mean[u])
    return forecast_metrics(raw_p, raw_y)


# ---------------------------------------------------------------- training


@dataclass
class RunRecord:
    seed: int
    ablation: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    best_val: float = math.inf
    test_mse: float = math.nan
    test_mae: float = math.nan
    test_mse_raw: float | None = None
    test_mae_raw: float | None = None
    n_params: int = 0
    optimizer: dict = field(default_factory=dict)
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    # wall-clock values are kept out of the JSON so records stay reproducible
    seconds_per_iteration: float = field(default=math.nan, compare=False)
    params: ModelParams | None = field(default=None, repr=False, compare=False)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("params", "seconds_per_iteration")}
        if include_timing:
            d["seconds_per_iteration"] = self.seconds_per_iteration
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def metrics_csv_rows(self) -> list[str]:
        return [f"{e['epoch']},{e['train_loss']!r},{e['val_loss']!r},{e['lr']!r}" for e in self.epochs]


def forecast_instances(dataset: Dataset, part: str, tc: TrainConfig) -> list[Instance]:
    return [Instance.from_split(s) for s in make_forecast_items(dataset.subset(part), tc.split_time, tc.horizon)]


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> RunRecord:
    """Fit one model and report test metrics from the best-validation checkpoint.

    ``seed`` (default ``model_config.seed``) drives both initialization and
    the per-epoch shuffle of the training samples.
    """
    tc = train_config
    seed = model_config.seed if seed is None else seed
    mc = model_config.replace(seed=seed)
    train_set = forecast_instances(dataset, "train", tc)
    val_set = forecast_instances(dataset, "val", tc)
    test_set = forecast_instances(dataset, "test", tc)
    if not train_set or not val_set:
        raise ContractError("training needs non-empty train and validation splits")

    params = ModelParams.init(mc, dataset.U, seed)
    opt = Adam(params.trainable(), tc.betas, tc.eps)
    rng = np.random.default_rng(seed)
    rec = RunRecord(
        seed=seed,
        ablation=mc.ablation,
        n_params=params.count(),
        optimizer={"name": "adam", "betas": list(tc.betas), "eps": tc.eps},
        model_config=asdict(mc),
        train_config={k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(tc).items()},
    )

    best_state = params.state()
    wait = 0
    iter_times = []
    for epoch in range(1, tc.max_epochs + 1):
        lr = lr_schedule(epoch, tc.lr0, tc.lr_decay, tc.lr_hold)
        order = rng.permutation(len(train_set))
        sse, count = 0.0, 0
        started = time.perf_counter()
        n_batches = 0
        for lo in range(0, len(order), tc.batch_size):
            batch = [train_set[i] for i in order[lo : lo + tc.batch_size]]
            params.zero_grad()
            preds = tt.concat([forward(inst, params, mc) for inst in batch], axis=0)
            targets = np.concatenate([inst.targets for inst in batch])
            loss = masked_mse(preds, targets)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite training loss in epoch {epoch}")
            loss.backward()
            opt.step(lr)
            sse += loss.item() * targets.size
            count += targets.size
            n_batches += 1
        iter_times.append((time.perf_counter() - started) / n_batches)

        val_loss, _ = evaluate(val_set, params, mc)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss in epoch {epoch}")
        entry = {"epoch": epoch, "train_loss": sse / count, "val_loss": val_loss, "lr": lr}
        rec.epochs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        logger.info("seed %d epoch %d train %.6f val %.6f lr %.3g", seed, epoch, entry["train_loss"], val_loss, lr)

        if val_loss < rec.best_val:
            rec.best_val = val_loss
            rec.best_epoch = epoch
            best_state = params.state()
            wait = 0
        else:
            wait += 1
        rec.stop_epoch = epoch
        if wait >= tc.patience:
            break

    params.load_state(best_state)
    check, _ = evaluate(val_set, params, mc)
    if check != rec.best_val:
        raise RuntimeError(f"restored checkpoint gives val {check!r}, expected {rec.best_val!r}")

    if test_set:
        preds = predict(test_set, params, mc)
        rec.test_mse, rec.test_mae = forecast_metrics(preds, [i.targets for i in test_set])
        if tc.denormalized_metrics and dataset.mean is not None:
            rec.test_mse_raw, rec.test_mae_raw = _denormalized_metrics(test_set, preds, dataset.mean, dataset.std)
    rec.seconds_per_iteration = float(np.mean(iter_times))
    rec.params = params
    return rec


def run_seeds(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig) -> list[RunRecord]:
    return [train(dataset, model_config, train_config, seed=s) for s in train_config.seeds]


# ---------------------------------------------------------------- reporting


def aggregate(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and sample standard deviation (``None`` for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, None
    return float(arr.mean()), (float(arr.std(ddof=1)) if arr.size > 1 else None)


def format_mean_std(mean: float, std: float | None) -> str:
    return f"{mean:.4f}" if std is None else f"{mean:.4f} ± {std:.4f}"


def results_table(rows: dict[str, Sequence[RunRecord]]) -> str:
    """Ablation-style table of test MSE and MAE, mean ± std over seeds."""
    lines = [f"{'Ablation':<12}  {'MSE':<17}  {'MAE':<17}  seeds"]
    for name, recs in rows.items():
        mse = format_mean_std(*aggregate([r.test_mse for r in recs]))
        mae = format_mean_std(*aggregate([r.test_mae for r in recs]))
        lines.append(f"{name:<12}  {mse:<17}  {mae:<17}  {','.join(str(r.seed) for r in recs)}")
    return "\n".join(lines)
