"""Bundled toy datasets (no network access needed)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.datasets import load_digits, make_moons


@dataclass(frozen=True)
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]


def _split(x: np.ndarray, y: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, ...]:
    order = np.random.default_rng(seed).permutation(len(x))
    n_val = int(round(len(x) * val_fraction))
    val, train = order[:n_val], order[n_val:]
    return x[train], y[train], x[val], y[val]


def digits(image: bool = False, val_fraction: float = 0.2, split_seed: int = 0) -> Dataset:
    """8x8 handwritten digits, pixel values scaled to [0, 1].

    With ``image=True`` samples are ``(1, 8, 8)`` arrays for the CNN,
    otherwise flat 64-vectors.
    """
    raw = load_digits()
    x = (raw.data / 16.0).astype(np.float32)
    if image:
        x = x.reshape(-1, 1, 8, 8)
    y = raw.target.astype(np.int64)
    return Dataset("digits", *_split(x, y, val_fraction, split_seed), n_classes=10)


def two_moons(n: int = 2000, noise: float = 0.2, val_fraction: float = 0.2, split_seed: int = 0) -> Dataset:
    x, y = make_moons(n_samples=n, noise=noise, random_state=split_seed)
    x = ((x - x.mean(axis=0)) / x.std(axis=0)).astype(np.float32)
    return Dataset("moons", *_split(x, y.astype(np.int64), val_fraction, split_seed), n_classes=2)


DATASETS = {"digits": digits, "moons": two_moons}


def load(name: str, image: bool = False) -> Dataset:
    if name == "digits":
        return digits(image=image)
    if name == "moons":
        if image:
            raise ValueError("the moons dataset has no image form")
        return two_moons()
    raise ValueError(f"unknown dataset {name!r}")
