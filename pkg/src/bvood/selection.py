"""Hyperparameter sweep, model ranking, informative-latent choice and threshold calibration."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .factorgen import Dataset
from .vae import LatentStats, VaeConfig, VaeModel, encode_batch, kl_divergence, reconstruction_mse, train

log = logging.getLogger(__name__)


def kl_per_latent(stats: LatentStats) -> np.ndarray:
    """KL of each latent's posterior from N(0, 1); batched stats give a row per image."""
    return kl_divergence(stats.mu, stats.logvar).value


def latent_kl(model: VaeModel, dataset) -> np.ndarray:
    """(N, n_latent) matrix of per-image, per-latent KL values."""
    return kl_per_latent(encode_batch(model, dataset))


def average_kl(model: VaeModel, dataset) -> np.ndarray:
    kl = latent_kl(model, dataset)
    if len(kl) == 0:
        raise ValueError("empty dataset")
    return kl.mean(axis=0)


def kl_diff(train_avg, val_avg) -> np.ndarray:
    a = np.asarray(train_avg, dtype=np.float64)
    b = np.asarray(val_avg, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return np.abs(a - b)


def select_informative_latent(diffs) -> int:
    """Index of the largest difference; np.argmax already breaks ties low."""
    diffs = np.asarray(diffs)
    if diffs.size == 0:
        raise ValueError("no latents to choose from")
    return int(np.argmax(diffs))


def calibrate_threshold(values, percentile: int) -> float:
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("no values to calibrate on")
    if not 1 <= percentile <= 100:
        raise ValueError(f"percentile must be in [1, 100], got {percentile}")
    # integer arithmetic keeps ceil exact
    rank = -(-percentile * v.size // 100)
    return float(v[rank - 1])


@dataclass(frozen=True)
class SweepGrid:
    betas: tuple[float, ...]
    n_latents: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "n_latents", tuple(int(n) for n in self.n_latents))
        if not self.betas or not self.n_latents:
            raise ValueError("grid needs at least one beta and one n_latent")
        if any(n <= 0 for n in self.n_latents):
            raise ValueError("n_latent values must be positive")

    def cells(self) -> list[tuple[float, int]]:
        return [(b, n) for b in self.betas for n in self.n_latents]

    def __len__(self) -> int:
        return len(self.betas) * len(self.n_latents)


@dataclass
class SweepRecord:
    beta: float
    n_latent: int
    final_loss: float = math.nan
    val_mse: float = math.nan
    avg_kl: float = math.nan
    model: VaeModel | None = field(default=None, repr=False)
    trace: list[float] = field(default_factory=list, repr=False)
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def cell_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def evaluate(model: VaeModel, validation: Dataset) -> tuple[float, float]:
    """Validation MSE and KL averaged over images and latents."""
    return reconstruction_mse(model, validation), float(average_kl(model, validation).mean())


def _run_cell(args) -> SweepRecord:
    config, train_set, validation = args
    try:
        model, trace = train(config, train_set)
        mse, kl = evaluate(model, validation)
        final = trace[-1] if trace else math.nan
        if not all(np.isfinite([mse, kl])):
            raise FloatingPointError("non-finite validation metric")
        return SweepRecord(config.beta, config.n_latent, final, mse, kl, model, trace)
    except Exception as exc:  # recorded, sweep continues
        log.warning("cell beta=%g n_latent=%d failed: %s", config.beta, config.n_latent, exc)
        return SweepRecord(config.beta, config.n_latent, error=f"{type(exc).__name__}: {exc}")


def sweep_configs(grid: SweepGrid, base: VaeConfig) -> list[VaeConfig]:
    return [replace(base, beta=b, n_latent=n, seed=cell_seed(base.seed, i))
            for i, (b, n) in enumerate(grid.cells())]


def run_sweep(grid: SweepGrid, train_set: Dataset, validation: Dataset, base: VaeConfig,
              jobs: int | None = 1) -> list[SweepRecord]:
    """Train and evaluate one model per grid cell, in grid order.

    ``jobs`` > 1 fans cells out to worker processes; ``None`` uses every CPU.
    """
    configs = sweep_configs(grid, base)
    work = [(c, train_set, validation) for c in configs]
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs <= 1 or len(work) == 1:
        return [_run_cell(w) for w in work]
    with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
        return list(pool.map(_run_cell, work))


def _ranks(values: Sequence[float]) -> np.ndarray:
    """Competition ranks (0 = smallest); equal values share the lower rank."""
    v = np.asarray(values, dtype=np.float64)
    return np.array([int(np.sum(v < x)) for x in v])


def rank_models(records: Sequence[SweepRecord], weights: tuple[float, float] = (1.0, 1.0)) -> list[SweepRecord]:
    """Order successful records best-first by a weighted sum of per-metric ranks.

    Largest validation MSE ranks best on the first criterion, lowest average
    KL on the second.  Ties fall back to (beta, n_latent).
    """
    w_mse, w_kl = weights
    if w_mse < 0 or w_kl < 0 or (w_mse == 0 and w_kl == 0):
        raise ValueError("weights must be non-negative and not both zero")
    good = [r for r in records if r.ok]
    if not good:
        raise ValueError("no successful sweep records to rank")
    by_mse = _ranks([-r.val_mse for r in good])
    by_kl = _ranks([r.avg_kl for r in good])
    score = w_mse * by_mse + w_kl * by_kl
    order = sorted(range(len(good)), key=lambda i: (score[i], good[i].beta, good[i].n_latent))
    return [good[i] for i in order]


@dataclass
class DetectorSpec:
    factor: str
    model: VaeModel = field(repr=False)
    latent: int
    tau: float
    percentile: int
    beta: float
    n_latent: int

    def __post_init__(self):
        if not 0 <= self.latent < self.model.n_latent:
            raise ValueError(f"latent index {self.latent} out of range for n_latent={self.model.n_latent}")
        if not 1 <= self.percentile <= 100:
            raise ValueError("percentile must be in [1, 100]")


@dataclass
class Selection:
    """A calibrated detector plus the intermediate values that produced it."""

    spec: DetectorSpec
    record: SweepRecord
    diffs: np.ndarray
    train_kl: np.ndarray  # selected latent, one value per training image
    val_kl: np.ndarray


def select_detector(factor: str, records: Sequence[SweepRecord], train_set: Dataset,
                    validation: Dataset, percentile: int = 75,
                    weights: tuple[float, float] = (1.0, 1.0)) -> Selection:
    best = rank_models(records, weights)[0]
    model = best.model
    if model is None:
        raise ValueError("best sweep record has no model attached")
    kl_train = latent_kl(model, train_set)
    kl_val = latent_kl(model, validation)
    diffs = kl_diff(kl_train.mean(axis=0), kl_val.mean(axis=0))
    j = select_informative_latent(diffs)
    tau = calibrate_threshold(kl_train[:, j], percentile)
    spec = DetectorSpec(factor, model, j, tau, percentile, best.beta, best.n_latent)
    return Selection(spec, best, diffs, kl_train[:, j], kl_val[:, j])
