"""Synthetic compositional latent-class data and the CIFAR-10 binary reader.

Every sample is one class atom plus a random subset of background atoms,
with background ``b`` present with probability ``prevalence[b]``.  A positive
pair shares the class and the set of active backgrounds; the two views
redraw every intensity and the additive noise.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    d: int = 64
    m: int = 10
    B: int = 4
    prevalence: tuple[float, ...] = (0.9, 0.9, 0.9, 0.9)
    intensity_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.05
    class_prior: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "prevalence", tuple(float(p) for p in self.prevalence))
        if self.class_prior is None:
            object.__setattr__(self, "class_prior", tuple([1.0 / self.m] * self.m))
        else:
            object.__setattr__(self, "class_prior", tuple(float(p) for p in self.class_prior))
        self.validate()

    def validate(self) -> None:
        if self.m < 1 or self.B < 0:
            raise ValueError(f"need m >= 1 and B >= 0, got m={self.m}, B={self.B}")
        if self.d < self.m + self.B:
            raise ValueError(f"d={self.d} must be >= m + B = {self.m + self.B}")
        if len(self.prevalence) != self.B:
            raise ValueError(f"prevalence has {len(self.prevalence)} entries, expected B={self.B}")
        if any(not 0.0 <= p <= 1.0 for p in self.prevalence):
            raise ValueError(f"prevalence entries must lie in [0, 1]: {self.prevalence}")
        if len(self.class_prior) != self.m:
            raise ValueError(f"class_prior has {len(self.class_prior)} entries, expected m={self.m}")
        if any(p < 0 for p in self.class_prior) or abs(sum(self.class_prior) - 1.0) > 1e-12:
            raise ValueError("class_prior must be a probability vector")
        lo, hi = self.intensity_range
        if lo > hi:
            raise ValueError(f"intensity_range lo={lo} > hi={hi}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def n_factors(self) -> int:
        return self.m + self.B

    def factor_prevalence(self) -> np.ndarray:
        """Prevalence of every latent factor: class priors, then backgrounds."""
        return np.array(list(self.class_prior) + list(self.prevalence))


@dataclass(frozen=True)
class Dictionary:
    atoms: np.ndarray  # d x (m+B), unit-norm columns
    m: int

    @property
    def coherence(self) -> float:
        gram = np.abs(self.atoms.T @ self.atoms)
        np.fill_diagonal(gram, 0.0)
        return float(gram.max()) if gram.size > 1 else 0.0


@dataclass
class LatentState:
    class_id: int
    class_intensity: float
    bg_active: np.ndarray  # bool, length B
    bg_intensity: np.ndarray  # length B, 0 where inactive


@dataclass
class SamplePair:
    x: np.ndarray
    x_plus: np.ndarray
    latent: LatentState
    latent_plus: LatentState | None = None


@dataclass
class Latents:
    """Row-aligned ground truth for a batch (anchor view)."""

    class_id: np.ndarray  # (n,)
    bg_active: np.ndarray  # (n, B) bool
    intensity: np.ndarray  # (n, m+B): class slot then background slots

    def indicators(self, m: int) -> np.ndarray:
        """0/1 factor indicators, shape (n, m+B)."""
        n = len(self.class_id)
        ind = np.zeros((n, m + self.bg_active.shape[1]))
        ind[np.arange(n), self.class_id] = 1.0
        ind[:, m:] = self.bg_active
        return ind


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.y) != self.X.shape[0]:
            raise ValueError("X must be n x d with one label per row")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError(f"labels out of range [0,{self.class_count})")


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for worker ``stream`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream),)))


def build_dictionary(spec: SyntheticSpec) -> Dictionary:
    """Seeded Gaussian atoms, one Gram-Schmidt pass, unit columns."""
    n_atoms = spec.m + spec.B
    if spec.d < n_atoms:
        raise ValueError(f"d={spec.d} must be >= m + B = {n_atoms}")
    rng = rng_stream(spec.seed, 1_000_003)
    raw = rng.standard_normal((spec.d, n_atoms))
    atoms = np.empty_like(raw)
    for j in range(n_atoms):
        v = raw[:, j].copy()
        for i in range(j):
            v -= (atoms[:, i] @ v) * atoms[:, i]
        atoms[:, j] = v / np.linalg.norm(v)
    return Dictionary(atoms=atoms, m=spec.m)


def _draw_intensities(spec, rng, n, class_id, bg_active):
    lo, hi = spec.intensity_range
    inten = np.zeros((n, spec.m + spec.B))
    inten[np.arange(n), class_id] = rng.uniform(lo, hi, size=n)
    if spec.B:
        inten[:, spec.m:] = np.where(bg_active, rng.uniform(lo, hi, size=(n, spec.B)), 0.0)
    return inten


def _render(spec, dictionary, rng, inten):
    x = inten @ dictionary.atoms.T
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng.standard_normal(x.shape)
    return x


def make_batch(
    spec: SyntheticSpec, dictionary: Dictionary, rng: np.random.Generator, n: int,
    with_positive_latents: bool = False,
):
    """``n`` independent positive pairs: (anchors, positives, latents)."""
    if n < 2:
        raise ValueError(f"batch size must be >= 2 (in-batch negatives), got {n}")
    class_id = rng.choice(spec.m, size=n, p=np.asarray(spec.class_prior))
    if spec.B:
        bg_active = rng.random((n, spec.B)) < np.asarray(spec.prevalence)
    else:
        bg_active = np.zeros((n, 0), dtype=bool)
    inten_a = _draw_intensities(spec, rng, n, class_id, bg_active)
    x = _render(spec, dictionary, rng, inten_a)
    inten_p = _draw_intensities(spec, rng, n, class_id, bg_active)
    x_plus = _render(spec, dictionary, rng, inten_p)
    lat = Latents(class_id=class_id, bg_active=bg_active, intensity=inten_a)
    if with_positive_latents:
        return x, x_plus, lat, Latents(class_id=class_id, bg_active=bg_active, intensity=inten_p)
    return x, x_plus, lat


def sample_pair(spec: SyntheticSpec, dictionary: Dictionary, rng: np.random.Generator) -> SamplePair:
    """One positive pair; draws exactly what a one-row batch would."""
    class_id = int(rng.choice(spec.m, p=np.asarray(spec.class_prior)))
    bg_active = rng.random(spec.B) < np.asarray(spec.prevalence)
    views = []
    for _ in range(2):
        inten = _draw_intensities(spec, rng, 1, np.array([class_id]), bg_active[None, :])
        views.append((inten[0], _render(spec, dictionary, rng, inten)[0]))

    def latent(inten):
        return LatentState(class_id, float(inten[class_id]), bg_active.copy(), inten[spec.m:].copy())

    return SamplePair(
        x=views[0][1], x_plus=views[1][1],
        latent=latent(views[0][0]), latent_plus=latent(views[1][0]),
    )


def make_labeled(spec: SyntheticSpec, dictionary: Dictionary, rng, n: int) -> tuple[LabeledSet, Latents]:
    """Single-view evaluation set labelled by latent class."""
    x, _, lat = make_batch(spec, dictionary, rng, max(n, 2))
    return LabeledSet(X=x[:n], y=lat.class_id[:n], class_count=spec.m), Latents(
        lat.class_id[:n], lat.bg_active[:n], lat.intensity[:n]
    )


def make_negative_pairs(
    spec: SyntheticSpec, dictionary: Dictionary, rng, n: int, shared_background: bool = True
):
    """Pairs with different classes and (optionally) identical background sets."""
    lo, hi = spec.intensity_range
    c1 = rng.choice(spec.m, size=n, p=np.asarray(spec.class_prior))
    shift = rng.integers(1, spec.m, size=n) if spec.m > 1 else np.zeros(n, dtype=int)
    c2 = (c1 + shift) % spec.m
    bg1 = rng.random((n, spec.B)) < np.asarray(spec.prevalence)
    bg2 = bg1.copy() if shared_background else rng.random((n, spec.B)) < np.asarray(spec.prevalence)
    i1 = _draw_intensities(spec, rng, n, c1, bg1)
    x1 = _render(spec, dictionary, rng, i1)
    i2 = _draw_intensities(spec, rng, n, c2, bg2)
    x2 = _render(spec, dictionary, rng, i2)
    return x1, x2, Latents(c1, bg1, i1), Latents(c2, bg2, i2)


def write_csv(path: str | os.PathLike, X: np.ndarray, y: Sequence[int]) -> None:
    """``label,f0,...,f{d-1}`` with LF endings."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(X.shape[1])])
        for label, row in zip(y, X):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_csv(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise ValueError(f"{path}: expected header 'label,f0,...'")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no data rows")
    y = np.array([int(r[0]) for r in body])
    X = np.array([[float(v) for v in r[1:]] for r in body])
    return X, y


# CIFAR-10 ---------------------------------------------------------------

CIFAR_RECORD = 1 + 3072
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_FILE_BYTES = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing CIFAR-10 file: {path}")
    size = os.path.getsize(path)
    if size != CIFAR_FILE_BYTES:
        raise ValueError(f"{path}: size {size} bytes, expected {CIFAR_FILE_BYTES}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise ValueError(
            f"{path}: record {bad[0]} label {labels[bad[0]]} out of range [0,10)"
        )
    return raw[:, 1:].astype(np.float64) / 255.0, labels


def load_cifar10(dir_path: str | os.PathLike) -> tuple[LabeledSet, LabeledSet]:
    """Read the binary release; standardize per channel with train statistics."""
    dir_path = os.fspath(dir_path)
    parts = [_read_cifar_file(os.path.join(dir_path, f)) for f in CIFAR_TRAIN_FILES]
    Xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    Xte, yte = _read_cifar_file(os.path.join(dir_path, CIFAR_TEST_FILE))
    # channel planes are contiguous blocks of 1024 pixels
    tr = Xtr.reshape(len(Xtr), 3, 1024)
    mean = tr.mean(axis=(0, 2))
    std = tr.std(axis=(0, 2))
    std = np.where(std > 0, std, 1.0)

    def standardize(X):
        return ((X.reshape(len(X), 3, 1024) - mean[None, :, None]) / std[None, :, None]).reshape(len(X), 3072)

    return (
        LabeledSet(standardize(Xtr), ytr, 10),
        LabeledSet(standardize(Xte), yte, 10),
    )
