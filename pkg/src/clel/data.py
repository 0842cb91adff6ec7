"""Desk-scale datasets: 2D toy densities, small grayscale images, OOD counterparts."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IMAGE_SIZE = 28
IMAGE_SUFFIX = ".png"


@dataclass(frozen=True)
class DatasetSpec:
    """Registry entry describing one dataset.

    Attributes:
        id: dataset name.
        shape: shape of a single sample.
        clamp: per-coordinate bounds shared with the SGLD sampler.
        split_key: stream offset separating the held-out stream from training.
        ood: default OOD counterpart, ``"uniform"`` or ``"scaled"``.
        params: density constants (mode radius, widths, ...).
    """

    id: str
    shape: tuple = (2,)
    clamp: tuple = (-3.0, 3.0)
    split_key: int = 1
    ood: str = "uniform"
    params: dict = field(default_factory=dict)

    def as_dict(self):
        return {"id": self.id, "shape": list(self.shape), "clamp": list(self.clamp), "split_key": self.split_key,
                "ood": self.ood, "params": dict(self.params)}


REGISTRY = {
    "gauss8": DatasetSpec("gauss8", params={"radius": 2.0, "sigma": 0.1, "n_modes": 8}),
    "two_rings": DatasetSpec("two_rings", params={"radii": (1.0, 2.0), "sigma": 0.05}),
    "moons": DatasetSpec("moons", params={"noise": 0.05, "scale": 1.5}),
    "checkerboard": DatasetSpec("checkerboard", params={"cells": 4, "half_width": 2.0}),
    "image_dir": DatasetSpec("image_dir", shape=(1, IMAGE_SIZE, IMAGE_SIZE), clamp=(-1.0, 1.0)),
}


def get_spec(dataset_id: str, **overrides) -> DatasetSpec:
    try:
        spec = REGISTRY[dataset_id]
    except KeyError:
        raise ConfigError(f"unknown dataset id {dataset_id!r}") from None
    return replace(spec, **overrides) if overrides else spec


def mode_centers(spec: DatasetSpec) -> np.ndarray:
    """Centers of the gauss8 mixture components, mode k at angle k * 45 degrees."""
    if spec.id != "gauss8":
        raise ConfigError(f"{spec.id} has no discrete modes")
    k = np.arange(spec.params["n_modes"])
    ang = 2 * np.pi * k / spec.params["n_modes"]
    return spec.params["radius"] * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def generate(spec: DatasetSpec, n: int, rng: np.random.Generator, return_labels: bool = False):
    """Draw ``n`` i.i.d. samples (float32) from the named 2D density.

    ``return_labels`` additionally returns the mixture component (gauss8) or
    ring index (two_rings) of every sample.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    p = spec.params
    labels = None
    if spec.id == "gauss8":
        labels = rng.integers(0, p["n_modes"], n)
        x = mode_centers(spec)[labels] + p["sigma"] * rng.standard_normal((n, 2))
    elif spec.id == "two_rings":
        labels = rng.integers(0, 2, n)
        r = np.asarray(p["radii"])[labels] + p["sigma"] * rng.standard_normal(n)
        ang = rng.uniform(0, 2 * np.pi, n)
        x = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    elif spec.id == "moons":
        labels = rng.integers(0, 2, n)
        t = rng.uniform(0, np.pi, n)
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower) - np.array([0.5, 0.25])
        x = p["scale"] * (x + p["noise"] * rng.standard_normal((n, 2)))
    elif spec.id == "checkerboard":
        c, w = p["cells"], p["half_width"]
        size = 2 * w / c
        cell = rng.integers(0, c * c // 2, n)
        row = cell // (c // 2)
        col = 2 * (cell % (c // 2)) + (row % 2)
        x = np.stack([-w + (col + rng.uniform(0, 1, n)) * size, -w + (row + rng.uniform(0, 1, n)) * size], axis=1)
    else:
        raise ConfigError(f"cannot generate dataset {spec.id!r}")
    x = np.clip(x, *spec.clamp).astype(np.float32)
    return (x, labels) if return_labels else x


def ood_counterpart(spec: DatasetSpec, n: int, rng: np.random.Generator, kind: str | None = None) -> np.ndarray:
    """OOD set: uniform noise over the clamped domain, or the density scaled 1.5x radially."""
    kind = kind or spec.ood
    if kind == "uniform":
        return rng.uniform(spec.clamp[0], spec.clamp[1], (n, *spec.shape)).astype(np.float32)
    if kind == "scaled":
        return np.clip(1.5 * generate(spec, n, rng), *spec.clamp).astype(np.float32)
    raise ConfigError(f"unknown OOD kind {kind!r}")


def stream(seed: int, key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key)``; distinct keys never share draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def heldout(spec: DatasetSpec, n: int, seed: int, part: int = 0, return_labels: bool = False):
    """Held-out sample drawn from a stream disjoint from the training stream."""
    return generate(spec, n, stream(seed, 1000 + spec.split_key * 10 + part), return_labels)


# -- CSV ----------------------------------------------------------------------------

def save_csv(path, x) -> None:
    x = np.asarray(x, dtype=np.float64)
    header = ",".join(f"x{i}" for i in range(x.shape[1]))
    np.savetxt(path, x, delimiter=",", header=header, comments="", fmt="%.9g")


def load_csv(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2).astype(np.float32)
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read {path}: {err}") from err


# -- images ---------------------------------------------------------------------------
# Raster format: 8-bit grayscale PNG, 28x28, one image per file. Pixel p maps
# to p / 127.5 - 1, so 0 -> -1 and 255 -> 1.

def load_images(directory) -> np.ndarray:
    """Load every ``*.png`` in ``directory`` (sorted by name) as ``(n, 1, 28, 28)`` in [-1, 1]."""
    from PIL import Image

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == IMAGE_SUFFIX)
    if not files:
        raise DataError(f"no {IMAGE_SUFFIX} images in {directory}")
    out = np.empty((len(files), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i, f in enumerate(files):
        try:
            with Image.open(f) as im:
                if im.mode != "L":
                    raise DataError(f"{f}: expected 8-bit grayscale, got mode {im.mode}")
                a = np.asarray(im, dtype=np.float64)
        except DataError:
            raise
        except OSError as err:
            raise DataError(f"{f}: unreadable ({err})") from err
        if a.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise DataError(f"{f}: size {a.shape[::-1]} != {IMAGE_SIZE}x{IMAGE_SIZE}")
        out[i, 0] = a / 127.5 - 1.0  # rounded once, from float64
    return out


def save_images(images, directory, prefix="img") -> list:
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    images = np.asarray(images)
    paths = []
    for i, img in enumerate(images.reshape(len(images), IMAGE_SIZE, IMAGE_SIZE)):
        px = np.clip(np.rint((img.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
        p = Path(directory) / f"{prefix}_{i:06d}{IMAGE_SUFFIX}"
        Image.fromarray(px, mode="L").save(p)
        paths.append(p)
    return paths
