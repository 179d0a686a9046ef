"""Online detection with a chain of single-latent KL detectors."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .selection import DetectorSpec, kl_per_latent
from .vae import encode, encode_batch


def score(spec: DetectorSpec, image) -> float:
    """KL of the detector's latent for one image."""
    return float(kl_per_latent(encode(spec.model, image))[spec.latent])


def is_ood(kl_score: float, tau: float) -> bool:
    # a score equal to tau is in-distribution
    return kl_score > tau


def detect(spec: DetectorSpec, image) -> bool:
    return is_ood(score(spec, image), spec.tau)


@dataclass(frozen=True)
class FactorOutcome:
    score: float
    is_ood: bool
    duration_us: float = 0.0
    error: str = ""


@dataclass
class DetectionResult:
    image_id: str
    outcomes: dict[str, FactorOutcome] = field(default_factory=dict)
    duration_us: float = 0.0

    def flags(self) -> dict[str, bool]:
        return {f: o.is_ood for f, o in self.outcomes.items() if not o.error}


class DetectorChain:
    """Independent detectors keyed by factor name; immutable once built."""

    def __init__(self, specs: Sequence[DetectorSpec], parallel: bool = False):
        if not specs:
            raise ValueError("a detector chain needs at least one detector")
        names = [s.factor for s in specs]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate factor names in chain: {dupes}")
        for s in specs:
            if not 0 <= s.latent < s.model.n_latent:
                raise ValueError(f"{s.factor}: latent {s.latent} >= n_latent {s.model.n_latent}")
        self.specs = tuple(specs)
        self.parallel = parallel

    @property
    def factors(self) -> list[str]:
        return [s.factor for s in self.specs]

    def __len__(self) -> int:
        return len(self.specs)


def _run_one(spec: DetectorSpec, image) -> FactorOutcome:
    start = time.perf_counter()
    try:
        s = score(spec, image)
        return FactorOutcome(s, is_ood(s, spec.tau), (time.perf_counter() - start) * 1e6)
    except Exception as exc:
        return FactorOutcome(float("nan"), False, (time.perf_counter() - start) * 1e6,
                             f"{type(exc).__name__}: {exc}")


def detect_chain(chain: DetectorChain, image, image_id: str = "") -> DetectionResult:
    """Score ``image`` with every detector; one failing detector does not stop the rest."""
    start = time.perf_counter()
    if chain.parallel and len(chain) > 1:
        with ThreadPoolExecutor(max_workers=len(chain)) as pool:
            outs = list(pool.map(lambda s: _run_one(s, image), chain.specs))
    else:
        outs = [_run_one(s, image) for s in chain.specs]
    result = DetectionResult(image_id, dict(zip(chain.factors, outs)))
    result.duration_us = (time.perf_counter() - start) * 1e6
    return result


def stream(chain: DetectorChain, images: Iterable, ids: Iterable[str] | None = None) -> Iterator[DetectionResult]:
    """Lazily run the chain over an image source, one image at a time."""
    ids = iter(ids) if ids is not None else None
    for i, image in enumerate(images):
        image_id = next(ids) if ids is not None else str(getattr(image, "scene_id", i))
        yield detect_chain(chain, image, image_id)


def ood_rates(results: Iterable[DetectionResult]) -> dict[str, tuple[int, int]]:
    """Per factor: (number flagged, number scored without error)."""
    counts: dict[str, list[int]] = {}
    for r in results:
        for f, o in r.outcomes.items():
            c = counts.setdefault(f, [0, 0])
            if not o.error:
                c[0] += int(o.is_ood)
                c[1] += 1
    return {f: (a, b) for f, (a, b) in counts.items()}


def batch_scores(spec: DetectorSpec, data) -> np.ndarray:
    """Vectorised ``score`` over a dataset or pixel stack."""
    return kl_per_latent(encode_batch(spec.model, data))[:, spec.latent]
