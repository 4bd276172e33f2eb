"""Synthetic datasets for tests, demos and the jet-tagging stand-in.

The jet stand-in mimics the shape of the public high-level-feature jet
tagging table (16 standardized features, 5 classes, overlapping classes)
but is NOT that dataset.  Set ``LUTFORGE_HLF_CSV`` to a local copy of the
real CSV to use it instead.
"""
from __future__ import annotations

import os

import numpy as np

from .data import Dataset, DatasetSpec, build_dataset, encode_labels, read_csv

HLF_ENV = "LUTFORGE_HLF_CSV"
HLF_FEATURES = 16
HLF_CLASSES = 5


def blobs(n: int, n_features: int = 4, n_classes: int = 3, seed: int = 0, spread: float = 1.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 2.0, (n_classes, n_features))
    y = rng.integers(0, n_classes, n)
    x = centers[y] + rng.normal(0, spread, (n, n_features))
    return x, y


def sequences(n: int, length: int = 16, n_classes: int = 3, seed: int = 0):
    """1-D signals whose class sets the oscillation frequency; shape (n, length, 1)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, n)
    t = np.arange(length)
    freq = 0.15 + 0.2 * y[:, None]
    phase = rng.uniform(0, 2 * np.pi, (n, 1))
    x = np.sin(freq * t + phase) + rng.normal(0, 0.3, (n, length))
    return x[..., None], y


def images(n: int, size: int = 6, n_classes: int = 3, seed: int = 0):
    """Square images with a class-dependent bar (row, column, diagonal); shape (n, s, s, 1)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, n)
    x = rng.normal(0, 0.4, (n, size, size))
    pos = rng.integers(0, size, n)
    for k in range(n):
        if y[k] % 3 == 0:
            x[k, pos[k], :] += 1.5
        elif y[k] % 3 == 1:
            x[k, :, pos[k]] += 1.5
        else:
            x[k][np.eye(size, k=int(pos[k]) - size // 2, dtype=bool)] += 1.5
    return x[..., None], y


def jet_standin(n: int = 60_000, seed: int = 0):
    """Synthetic 16-feature, 5-class table with overlapping, nonlinearly mixed classes."""
    rng = np.random.default_rng(seed)
    latent_dim = 6
    frame = np.random.default_rng(12345)  # class geometry is fixed; `seed` only draws samples
    means = frame.normal(0, 0.85, (HLF_CLASSES, latent_dim))
    scales = frame.uniform(0.6, 1.3, (HLF_CLASSES, latent_dim))
    mix1 = frame.normal(0, 1 / np.sqrt(latent_dim), (latent_dim, HLF_FEATURES))
    mix2 = frame.normal(0, 1 / np.sqrt(latent_dim), (latent_dim, HLF_FEATURES))
    y = rng.integers(0, HLF_CLASSES, n)
    z = means[y] + scales[y] * rng.normal(0, 1, (n, latent_dim))
    x = np.tanh(z @ mix1) + 0.3 * (z @ mix2) ** 2 + rng.normal(0, 0.25, (n, HLF_FEATURES))
    return x, y


def to_dataset(x, y, n_classes: int, seed: int = 0, val_fraction: float = 0.1,
               test_fraction: float = 0.0, standardize: bool = True) -> Dataset:
    spec = DatasetSpec(source="<memory>", split_seed=seed, val_fraction=val_fraction,
                       test_fraction=test_fraction, standardize=standardize, n_classes=n_classes)
    return build_dataset(np.asarray(x, dtype=np.float64), np.asarray(y), spec, n_classes)


def jet_dataset(n: int = 60_000, seed: int = 0, test_fraction: float = 0.2) -> tuple[Dataset, str]:
    """The jet-tagging dataset and a description of where it came from."""
    path = os.environ.get(HLF_ENV)
    if path:
        spec = DatasetSpec(source=path, n_classes=HLF_CLASSES, split_seed=seed,
                           test_fraction=test_fraction)
        x, raw, feats, _ = read_csv(spec)
        if x.shape[1] != HLF_FEATURES:
            raise ValueError(f"{path} has {x.shape[1]} feature columns, expected {HLF_FEATURES}")
        y, k = encode_labels(raw, spec)
        return build_dataset(x, y, spec, k, feats), f"csv:{path}"
    x, y = jet_standin(n, seed)
    return to_dataset(x, y, HLF_CLASSES, seed, test_fraction=test_fraction), "synthetic-standin"
