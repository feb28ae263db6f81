"""Seeded synthetic data generators: the unit-circle mixture used by the
streaming-EM convergence check, and a part-structured classification task."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureBatch


def circle_centers(num_components: int) -> np.ndarray:
    """Class means evenly spaced on the unit circle; for 10 components
    the angles are k*pi/5."""
    k = np.arange(num_components)
    ang = 2.0 * np.pi * k / num_components
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def synth_circle(
    num_components: int = 10,
    samples_per_class: int = 400,
    sigma: float = 0.1,
    difficulty: str = "simple",
    seed: int = 0,
) -> tuple[FeatureBatch, np.ndarray]:
    """2-D isotropic Gaussian blobs centered on the unit circle.
    Hard mode doubles the class standard deviation. Returns the batch
    (one group per class) and per-row labels."""
    if num_components < 1:
        raise ValueError("num_components must be >= 1")
    if difficulty not in ("simple", "hard"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    std = sigma * (2.0 if difficulty == "hard" else 1.0)
    rng = np.random.default_rng(seed)
    centers = circle_centers(num_components)
    data = np.concatenate(
        [c + std * rng.standard_normal((samples_per_class, 2)) for c in centers]
    )
    labels = np.repeat(np.arange(num_components), samples_per_class)
    return FeatureBatch(data, labels.astype(np.int64)), labels


@dataclass(frozen=True)
class PartImage:
    parts: np.ndarray        # (n_visible, D_in) raw part vectors
    slots: np.ndarray        # (n_visible,) part-slot indices
    label: int


@dataclass(frozen=True)
class SyntheticPartDataset:
    """Class-conditional part prototypes plus noise, with per-image
    random visibility masks. Stand-in for annotated part crops."""

    train: list[PartImage]
    test: list[PartImage]
    num_classes: int
    parts_per_image_max: int
    d_in: int
    seed: int


def synth_parts(
    num_classes: int = 8,
    parts_per_image_max: int = 4,
    d_in: int = 6,
    visibility_rate: float = 0.7,
    noise: float = 0.25,
    images_per_class: int = 40,
    seed: int = 0,
) -> SyntheticPartDataset:
    """Each class has one prototype vector per part slot; an image is the
    set of visible prototypes plus Gaussian noise. Masks that would leave
    an image empty are resampled. Split 80/20 by the same seed."""
    if not 0.0 < visibility_rate <= 1.0:
        raise ValueError("visibility_rate must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((num_classes, parts_per_image_max, d_in))
    images: list[PartImage] = []
    for c in range(num_classes):
        for _ in range(images_per_class):
            mask = rng.random(parts_per_image_max) < visibility_rate
            while not mask.any():
                mask = rng.random(parts_per_image_max) < visibility_rate
            slots = np.flatnonzero(mask)
            parts = protos[c, slots] + noise * rng.standard_normal((slots.size, d_in))
            images.append(PartImage(parts=parts, slots=slots.astype(np.int64), label=c))
    order = rng.permutation(len(images))
    n_test = max(1, len(images) // 5)
    test_idx = set(order[:n_test].tolist())
    train = [images[i] for i in range(len(images)) if i not in test_idx]
    test = [images[i] for i in range(len(images)) if i in test_idx]
    return SyntheticPartDataset(
        train=train,
        test=test,
        num_classes=num_classes,
        parts_per_image_max=parts_per_image_max,
        d_in=d_in,
        seed=seed,
    )


def parts_to_feature_batch(images: list[PartImage]) -> tuple[FeatureBatch, np.ndarray]:
    """Flatten a list of part images into one batch (group = image index).
    Returns the batch and per-image labels."""
    data = np.concatenate([img.parts for img in images])
    groups = np.concatenate(
        [np.full(img.parts.shape[0], i, dtype=np.int64) for i, img in enumerate(images)]
    )
    part_ids = np.concatenate([img.slots for img in images])
    labels = np.asarray([img.label for img in images], dtype=np.int64)
    return FeatureBatch(data, groups, part_ids), labels
