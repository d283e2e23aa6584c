"""Irregular multivariate time series: samples, I/O, synthesis, splitting, statistics."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Dataset content violates the IMTS data model."""


class ParseError(DataError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class UnusableSampleError(DataError):
    """A split left the lookback or the forecast side empty."""


@dataclass(frozen=True, order=True)
class Observation:
    t: float
    u: int
    z: float = field(compare=False)


@dataclass(frozen=True)
class Sample:
    id: int
    observations: tuple[Observation, ...]
    U: int
    unit: str = ""

    @classmethod
    def from_observations(cls, id: int, observations: Iterable[Observation], U: int, unit: str = "") -> "Sample":
        obs = sorted(observations, key=lambda o: (o.t, o.u))
        for prev, cur in zip(obs, obs[1:]):
            if prev.t == cur.t and prev.u == cur.u:
                raise DataError(f"sample {id}: duplicate observation at t={cur.t}, u={cur.u}")
        for o in obs:
            if not math.isfinite(o.t):
                raise DataError(f"sample {id}: non-finite timestamp")
            if not 0 <= o.u < U:
                raise DataError(f"sample {id}: variable {o.u} outside [0, {U})")
        return cls(id=id, observations=tuple(obs), U=U, unit=unit)

    @property
    def M(self) -> int:
        return len(self.observations)

    def timestamps(self) -> list[float]:
        return sorted({o.t for o in self.observations})


@dataclass(frozen=True)
class SplitSample:
    lookback: tuple[Observation, ...]
    queries: tuple[tuple[float, int], ...]
    targets: tuple[float, ...]
    t_split: float
    U: int
    sample_id: int = -1


@dataclass
class Dataset:
    samples: list[Sample]
    U: int
    unit: str = ""
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, part: str) -> list[Sample]:
        return [self.samples[i] for i in getattr(self, part)]


# ---------------------------------------------------------------- I/O


def load_dataset(path: str | Path, U: int | None = None) -> Dataset:
    """Read the JSON-lines observation format.

    One object per line: ``{"sample_id", "t", "u", "z"}``.  An optional header
    line ``{"meta": {"U": ..., "unit": ...}}`` fixes the variable count;
    otherwise it is inferred as ``max(u) + 1``.  Samples keep first-appearance
    order, observations are sorted by ``(t, u)``.
    """
    path = Path(path)
    groups: dict[int, list[Observation]] = {}
    unit = ""
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(line_no, "expected a JSON object")
            if "meta" in rec:
                meta = rec["meta"]
                if not isinstance(meta, dict):
                    raise ParseError(line_no, "meta must be an object")
                if "U" in meta:
                    U = int(meta["U"])
                unit = str(meta.get("unit", unit))
                continue
            try:
                sid = rec["sample_id"]
                t, u, z = rec["t"], rec["u"], rec["z"]
            except KeyError as exc:
                raise ParseError(line_no, f"missing key {exc.args[0]!r}") from None
            if not isinstance(sid, int) or not isinstance(u, int) or isinstance(u, bool):
                raise ParseError(line_no, "sample_id and u must be integers")
            if not isinstance(t, (int, float)) or not isinstance(z, (int, float)):
                raise ParseError(line_no, "t and z must be numbers")
            if u < 0:
                raise ParseError(line_no, f"negative variable index {u}")
            groups.setdefault(sid, []).append(Observation(float(t), u, float(z)))

    if not groups:
        warnings.warn(f"{path}: no observations found", stacklevel=2)
        return Dataset(samples=[], U=U or 0, unit=unit)
    if U is None:
        U = 1 + max(o.u for obs in groups.values() for o in obs)
    samples = [Sample.from_observations(sid, obs, U, unit) for sid, obs in groups.items()]
    return Dataset(samples=samples, U=U, unit=unit)


def dump_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the JSON-lines format with a meta header; output is byte-stable."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"meta": {"U": dataset.U, "unit": dataset.unit}}) + "\n")
        for s in dataset.samples:
            for o in s.observations:
                fh.write(json.dumps({"sample_id": s.id, "t": o.t, "u": o.u, "z": o.z}) + "\n")


# ---------------------------------------------------------------- synthesis


def synth_generate(
    n_samples: int,
    U: int,
    t_max: float = 48.0,
    rate: float = 0.25,
    seed: int = 0,
    shared_frac: float = 0.3,
    noise: float = 0.05,
    coupling: float = 0.6,
    split_ratios: bool = True,
) -> Dataset:
    """Draw a seeded synthetic IMTS dataset.

    Each variable follows its own sum of three random-phase sinusoids, mixed
    with the other variables' latents by a dataset-wide matrix (weight
    ``coupling``) so that variables are correlated with mixed signs.  Timestamps
    per variable come from a Poisson process of intensity ``rate`` on
    ``[0, t_max]``; each drawn timestamp is copied, with probability
    ``shared_frac``, onto one other randomly chosen variable, which creates
    aligned observations.  Values carry Gaussian noise of std ``noise``.
    """
    if n_samples < 1 or U < 1:
        raise ValueError("n_samples and U must be >= 1")
    if not rate > 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    rng = np.random.default_rng(seed)

    # dataset-level structure
    freqs = rng.uniform(0.5, 3.0, size=(U, 3)) * (2 * np.pi / t_max)
    amps = rng.uniform(0.5, 1.5, size=(U, 3))
    mixing = rng.normal(size=(U, U))
    np.fill_diagonal(mixing, 0.0)
    mixing /= np.maximum(np.abs(mixing).sum(axis=1, keepdims=True), 1e-12)
    mixing = (1.0 - coupling) * np.eye(U) + coupling * mixing

    samples: list[Sample] = []
    dropped = 0
    for sid in range(n_samples):
        phases = rng.uniform(0, 2 * np.pi, size=(U, 3))
        times: list[set[float]] = []
        for _ in range(U):
            k = rng.poisson(rate * t_max)
            times.append(set(np.round(rng.uniform(0.0, t_max, size=k), 6).tolist()))
        if U > 1:
            for u in range(U):
                for t in sorted(times[u]):
                    if rng.random() < shared_frac:
                        other = int(rng.integers(U - 1))
                        other += other >= u
                        times[other].add(t)
        obs = []
        for u in range(U):
            if not times[u]:
                continue
            ts = np.array(sorted(times[u]))
            latent = (amps[:, None, :] * np.sin(freqs[:, None, :] * ts[None, :, None] + phases[:, None, :])).sum(-1)
            vals = mixing[u] @ latent + rng.normal(scale=noise, size=ts.size)
            obs.extend(Observation(float(t), u, float(z)) for t, z in zip(ts, vals))
        if not obs:
            dropped += 1
            continue
        samples.append(Sample.from_observations(sid, obs, U, unit="h"))
    if dropped:
        warnings.warn(f"synth_generate: dropped {dropped} empty samples", stacklevel=2)
    ds = Dataset(samples=samples, U=U, unit="h")
    return assign_splits(ds, seed) if split_ratios else ds


# ---------------------------------------------------------------- splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def assign_splits(dataset: Dataset, seed: int) -> Dataset:
    """80/10/10 by sample count.

    The test split is the last tenth in file order and keeps that order; the
    rest is shuffled by ``seed`` and cut into validation and train.
    """
    n = len(dataset.samples)
    n_test = _round_half_up(0.1 * n)
    n_val = _round_half_up(0.1 * n)
    n_train = n - n_val - n_test
    test = list(range(n - n_test, n))
    rest = np.random.default_rng(seed).permutation(n - n_test).tolist()
    return replace(dataset, train=rest[:n_train], val=rest[n_train:], test=test)


def split_lookback(sample: Sample, t_split: float, horizon: int | None = None) -> SplitSample:
    """Partition at ``t_split``: ``t <= t_split`` is lookback, later points are queries.

    ``horizon`` keeps only the forecast points on the first ``horizon``
    distinct timestamps after the split.
    """
    look = tuple(o for o in sample.observations if o.t <= t_split)
    fut = [o for o in sample.observations if o.t > t_split]
    if horizon is not None:
        keep = sorted({o.t for o in fut})[:horizon]
        cutoff = keep[-1] if keep else -math.inf
        fut = [o for o in fut if o.t <= cutoff]
    if not look:
        raise UnusableSampleError(f"sample {sample.id}: empty lookback at t_S={t_split}")
    if not fut:
        raise UnusableSampleError(f"sample {sample.id}: nothing to forecast after t_S={t_split}")
    return SplitSample(
        lookback=look,
        queries=tuple((o.t, o.u) for o in fut),
        targets=tuple(o.z for o in fut),
        t_split=t_split,
        U=sample.U,
        sample_id=sample.id,
    )


def make_forecast_items(samples: Sequence[Sample], t_split: float, horizon: int | None = None) -> list[SplitSample]:
    """Split every sample, dropping those without a usable lookback or forecast side."""
    out = []
    for s in samples:
        try:
            out.append(split_lookback(s, t_split, horizon))
        except UnusableSampleError as exc:
            logger.debug("dropping: %s", exc)
    return out


# ---------------------------------------------------------------- normalization


def fit_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    U = dataset.U
    vals: list[list[float]] = [[] for _ in range(U)]
    for s in dataset.subset("train"):
        for o in s.observations:
            vals[o.u].append(o.z)
    mean = np.zeros(U)
    std = np.ones(U)
    for u, v in enumerate(vals):
        if v:
            arr = np.asarray(v)
            mean[u] = arr.mean()
            std[u] = max(arr.std(), STD_FLOOR)
    return mean, std


def _map_values(dataset: Dataset, fn) -> list[Sample]:
    return [
        Sample(
            id=s.id,
            observations=tuple(Observation(o.t, o.u, fn(o.z, o.u)) for o in s.observations),
            U=s.U,
            unit=s.unit,
        )
        for s in dataset.samples
    ]


def normalize(dataset: Dataset) -> Dataset:
    """Standardize values per variable with train-split statistics only."""
    mean, std = fit_stats(dataset)
    samples = _map_values(dataset, lambda z, u: (z - mean[u]) / std[u])
    return replace(dataset, samples=samples, mean=mean, std=std)


def denormalize(dataset: Dataset) -> Dataset:
    if dataset.mean is None or dataset.std is None:
        return dataset
    mean, std = dataset.mean, dataset.std
    samples = _map_values(dataset, lambda z, u: z * std[u] + mean[u])
    return replace(dataset, samples=samples, mean=None, std=None)


# ---------------------------------------------------------------- statistics


@dataclass(frozen=True)
class StatsReport:
    avg_obs: float
    avg_obs_padded: float
    max_length: int
    n_variables: int
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "avg_obs": self.avg_obs,
            "avg_obs_padded": self.avg_obs_padded,
            "max_length": self.max_length,
            "n_variables": self.n_variables,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [
            ("Max length", f"{self.max_length}"),
            ("# Variable", f"{self.n_variables}"),
            ("# Sample", f"{self.n_samples:,}"),
            ("Avg # obs.", f"{self.avg_obs:,.1f}"),
            ("Avg # obs. (padding)", f"{self.avg_obs_padded:,.1f}"),
        ]
        width = max(len(k) for k, _ in rows)
        lines = ["padded count = mean over samples of (distinct timestamps x variables)"]
        lines += [f"{k:<{width}}  {v:>12}" for k, v in rows]
        return "\n".join(lines)


def dataset_stats(dataset: Dataset) -> StatsReport:
    if not dataset.samples:
        raise DataError("dataset_stats needs at least one sample")
    lengths = [len({o.t for o in s.observations}) for s in dataset.samples]
    return StatsReport(
        avg_obs=float(np.mean([s.M for s in dataset.samples])),
        avg_obs_padded=float(np.mean([T * dataset.U for T in lengths])),
        max_length=int(max(lengths)),
        n_variables=dataset.U,
        n_samples=len(dataset.samples),
    )
