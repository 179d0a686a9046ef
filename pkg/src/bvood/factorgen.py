"""Synthetic multi-label scenes with independently controlled generative factors.

Each 32x32 grayscale image carries a value for every factor:

* ``time-of-day``: background brightness (day 0.8, night 0.2, plus noise)
* ``traffic``: bright rectangles (1-2 for low, 6-9 for high)
* ``pedestrian``: small mid-gray blocks (none, or 2-4 when present)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

IMAGE_SIZE = 32
N_PIXELS = IMAGE_SIZE * IMAGE_SIZE

FACTORS: dict[str, tuple[str, str]] = {
    "time-of-day": ("day", "night"),
    "traffic": ("low", "high"),
    "pedestrian": ("none", "present"),
}

BACKGROUND = {"day": 0.8, "night": 0.2}
NOISE_AMPLITUDE = 0.05
CAR_INTENSITY = 0.95
PEDESTRIAN_INTENSITY = 0.6
CAR_COUNTS = {"low": (1, 2), "high": (6, 9)}
PEDESTRIAN_COUNTS = {"none": (0, 0), "present": (2, 4)}


class FactorError(ValueError):
    pass


@dataclass(frozen=True)
class Placement:
    kind: str  # "car" or "pedestrian"
    row: int
    col: int
    height: int
    width: int


@dataclass
class LabeledImage:
    pixels: np.ndarray
    labels: dict[str, str]
    scene_id: int
    placements: tuple[Placement, ...] = ()


def validate_labels(labels: Mapping[str, str]) -> None:
    for name in labels:
        if name not in FACTORS:
            raise FactorError(f"unknown factor {name!r}")
    for name, values in FACTORS.items():
        if name not in labels:
            raise FactorError(f"missing value for factor {name!r}")
        if labels[name] not in values:
            raise FactorError(f"unknown value {labels[name]!r} for factor {name!r}")


def scene_layout(labels: Mapping[str, str], rng: np.random.Generator) -> list[Placement]:
    """Draw object placements for a scene; overlap is allowed."""
    out = []
    lo, hi = CAR_COUNTS[labels["traffic"]]
    for _ in range(int(rng.integers(lo, hi + 1))):
        h = int(rng.integers(4, 7))
        w = int(rng.integers(6, 9))
        r = int(rng.integers(0, IMAGE_SIZE - h + 1))
        c = int(rng.integers(0, IMAGE_SIZE - w + 1))
        out.append(Placement("car", r, c, h, w))
    lo, hi = PEDESTRIAN_COUNTS[labels["pedestrian"]]
    for _ in range(int(rng.integers(lo, hi + 1))):
        r = int(rng.integers(0, IMAGE_SIZE - 1))
        c = int(rng.integers(0, IMAGE_SIZE - 1))
        out.append(Placement("pedestrian", r, c, 2, 2))
    return out


def render_image(labels: Mapping[str, str], scene_seed: int, scene_id: int = 0,
                 noise: float = NOISE_AMPLITUDE) -> LabeledImage:
    """Render one scene deterministically from its labels and seed."""
    validate_labels(labels)
    rng = np.random.default_rng(scene_seed)
    layout = scene_layout(labels, rng)
    px = np.full((IMAGE_SIZE, IMAGE_SIZE), BACKGROUND[labels["time-of-day"]])
    px += rng.uniform(-1.0, 1.0, size=px.shape) * noise
    np.clip(px, 0.0, 1.0, out=px)
    for p in layout:
        value = CAR_INTENSITY if p.kind == "car" else PEDESTRIAN_INTENSITY
        px[p.row:p.row + p.height, p.col:p.col + p.width] = value
    return LabeledImage(px, dict(labels), scene_id, tuple(layout))


@dataclass
class Dataset:
    """A stack of labeled images stored column-wise for fast batching."""

    pixels: np.ndarray  # (N, 32, 32)
    labels: list[dict[str, str]]
    scene_ids: np.ndarray  # (N,) int64
    name: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, IMAGE_SIZE, IMAGE_SIZE)
        self.scene_ids = np.asarray(self.scene_ids, dtype=np.int64).reshape(-1)
        if not (len(self.pixels) == len(self.labels) == len(self.scene_ids)):
            raise ValueError("pixels, labels and scene_ids must have equal length")

    @classmethod
    def from_images(cls, images: list[LabeledImage], name: str = "") -> "Dataset":
        if not images:
            return cls.empty(name)
        return cls(np.stack([im.pixels for im in images]), [dict(im.labels) for im in images],
                   np.array([im.scene_id for im in images]), name)

    @classmethod
    def empty(cls, name: str = "") -> "Dataset":
        return cls(np.zeros((0, IMAGE_SIZE, IMAGE_SIZE)), [], np.zeros(0, dtype=np.int64), name)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], self.labels[i], int(self.scene_ids[i]))

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    def flat(self) -> np.ndarray:
        """Pixels as an (N, 1024) matrix."""
        return self.pixels.reshape(len(self), N_PIXELS)

    def factor_values(self, factor: str) -> list[str]:
        return [lab[factor] for lab in self.labels]


@dataclass
class PartitionSpec:
    """How to carve one factor partition into train/validation/test splits.

    ``companions`` are other factors held at a fixed value alongside the
    target in-distribution samples and flipped together with it in
    out-of-distribution samples (the traffic/pedestrian partitions).
    ``held`` factors keep one value in every split.  Remaining factors are
    sampled uniformly and independently.
    """

    factor: str
    in_value: str
    n_train: int = 1000
    n_val: int = 200
    n_test1: int = 100
    n_test2: int = 100
    seed: int = 0
    companions: dict[str, str] = field(default_factory=dict)
    held: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        fixed = {self.factor: self.in_value, **self.companions, **self.held}
        for name, value in fixed.items():
            if name not in FACTORS:
                raise FactorError(f"unknown factor {name!r}")
            if value not in FACTORS[name]:
                raise FactorError(f"unknown value {value!r} for factor {name!r}")
        if self.factor in self.companions or self.factor in self.held:
            raise FactorError(f"target factor {self.factor!r} also listed as companion/held")
        if set(self.companions) & set(self.held):
            raise FactorError("a factor cannot be both companion and held")
        for n in (self.n_train, self.n_val, self.n_test1, self.n_test2):
            if n < 0:
                raise ValueError("split counts must be non-negative")

    @property
    def shifted(self) -> dict[str, str]:
        """Factors that change between in- and out-of-distribution samples."""
        return {self.factor: self.in_value, **self.companions}


def _other(factor: str, value: str) -> str:
    a, b = FACTORS[factor]
    return b if value == a else a


def _sample_labels(spec: PartitionSpec, rng: np.random.Generator, ood: bool) -> dict[str, str]:
    labels = {}
    # fixed iteration order so the same draws happen whichever factor is the target
    for name in sorted(FACTORS):
        values = FACTORS[name]
        if name in spec.held:
            labels[name] = spec.held[name]
        elif name in spec.shifted:
            v = spec.shifted[name]
            labels[name] = _other(name, v) if ood else v
        else:
            labels[name] = values[int(rng.integers(len(values)))]
    return labels


def scene_seed(seed: int, scene_id: int) -> int:
    return int(np.random.SeedSequence([seed, scene_id]).generate_state(1, dtype=np.uint64)[0])


def generate_partition(spec: PartitionSpec) -> dict[str, Dataset]:
    """Build the train / validation / test1 / test2 splits for one partition.

    Scene ids are allocated consecutively across splits, so test scenes never
    appear in train or validation.  Validation is balanced: half in-distribution,
    half shifted, in shuffled order.
    """
    rng = np.random.default_rng(spec.seed)
    next_id = 0

    def build(name: str, ood_flags: list[bool]) -> Dataset:
        nonlocal next_id
        images = []
        for ood in ood_flags:
            labels = _sample_labels(spec, rng, ood)
            images.append(render_image(labels, scene_seed(spec.seed, next_id), next_id))
            next_id += 1
        return Dataset.from_images(images, name)

    val_flags = [i >= (spec.n_val + 1) // 2 for i in range(spec.n_val)]
    val_flags = [bool(f) for f in rng.permutation(np.array(val_flags, dtype=bool))]
    return {
        "train": build("train", [False] * spec.n_train),
        "validation": build("validation", val_flags),
        "test1": build("test1", [False] * spec.n_test1),
        "test2": build("test2", [True] * spec.n_test2),
    }


def factor_indicator(dataset: Dataset, factor: str) -> np.ndarray:
    """1.0 where the image carries the factor's second value, else 0.0."""
    second = FACTORS[factor][1]
    return np.array([lab[factor] == second for lab in dataset.labels], dtype=np.float64)
