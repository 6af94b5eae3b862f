"""Weak/strong image augmentation for the view-consistency ablation.

Weak = random horizontal flip + padded random crop; strong additionally
applies color jitter and random erasing. All randomness comes from a
caller-owned numpy Generator so augmented runs stay reproducible.
Images are H x W x C float arrays in [0, 1].
"""

import numpy as np


def random_flip(img: np.ndarray, rng) -> np.ndarray:
    if rng.random() < 0.5:
        return img[:, ::-1]
    return img


def random_crop(img: np.ndarray, rng, pad: int = 2) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1)
    dx = rng.integers(0, 2 * pad + 1)
    return padded[dy:dy + h, dx:dx + w]


def color_jitter(img: np.ndarray, rng) -> np.ndarray:
    scale = rng.uniform(0.8, 1.2, size=(1, 1, img.shape[2]))
    shift = rng.uniform(-0.1, 0.1)
    return np.clip(img * scale + shift, 0.0, 1.0)


def random_erase(img: np.ndarray, rng, p: float = 0.5) -> np.ndarray:
    if rng.random() >= p:
        return img
    h, w = img.shape[:2]
    eh = max(1, int(h * rng.uniform(0.15, 0.4)))
    ew = max(1, int(w * rng.uniform(0.15, 0.4)))
    y = rng.integers(0, h - eh + 1)
    x = rng.integers(0, w - ew + 1)
    out = img.copy()
    out[y:y + eh, x:x + ew] = rng.uniform(0.0, 1.0, size=(eh, ew, img.shape[2]))
    return out


def weak_augment(images: np.ndarray, rng) -> np.ndarray:
    return np.stack([np.ascontiguousarray(random_crop(random_flip(im, rng), rng))
                     for im in images]).astype(np.float32)


def strong_augment(images: np.ndarray, rng) -> np.ndarray:
    out = []
    for im in images:
        im = random_crop(random_flip(im, rng), rng)
        im = color_jitter(im, rng)
        im = random_erase(im, rng)
        out.append(np.ascontiguousarray(im))
    return np.stack(out).astype(np.float32)
