"""Shared synthetic constructions used by module and acceptance tests."""

from __future__ import annotations

import colorsys

import numpy as np

from volnav.camera import Provenance, Viewpoint, icosphere_viewpoints
from volnav.captions import GENERIC, direction_phrase, viewpoint_caption
from volnav.embedding import PairedSample
from volnav.render import Image
from volnav.volume import Volume


def smooth_blob_volume(n=24, seed=4, bumps=3) -> Volume:
    """Asymmetric smooth field supported inside the inscribed sphere."""
    rng = np.random.default_rng(seed)
    coords = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    center = (n - 1) / 2.0
    field = np.zeros((n, n, n))
    for _ in range(bumps):
        pos = center + rng.uniform(-0.22 * n, 0.22 * n, size=3)
        sigma = rng.uniform(0.06 * n, 0.12 * n)
        d2 = np.sum((coords - pos) ** 2, axis=-1)
        field += rng.uniform(0.4, 1.0) * np.exp(-d2 / (2 * sigma**2))
    r2 = np.sum((coords - center) ** 2, axis=-1)
    field *= r2 <= (0.42 * n) ** 2
    field /= max(field.max(), 1e-9)
    return Volume((n, n, n), (1.0, 1.0, 1.0), field)


def octant_image(class_id: int, n_classes: int, sample_seed: int,
                 size=(24, 24), noise=0.04) -> Image:
    """Solid class color plus a small seeded texture; classes are far apart."""
    hue = class_id / n_classes
    value = 0.35 + 0.5 * ((class_id * 7) % 3) / 2.0
    base = np.array(colorsys.hsv_to_rgb(hue, 0.85, value))
    rng = np.random.default_rng(sample_seed)
    h, w = size
    pixels = np.empty((h, w, 4))
    pixels[..., :3] = base + rng.normal(scale=noise, size=(h, w, 3))
    pixels[..., 3] = 1.0
    return Image(w, h, np.clip(pixels, 0.0, 1.0))


def make_octant_pairs(seed: int = 0, size=(24, 24), noise: float = 0.04,
                      levels=(2, 1, 0)) -> list[PairedSample]:
    """420 paired samples whose captions deterministically encode the octant.

    Viewpoints come from icosphere levels 2+1+0 (320+80+20). Every caption
    uses the same template so caption text is a bijection of the direction
    phrase; the image color encodes the same phrase, so the pairs are
    separable by construction.
    """
    d_min, d_max = 1.2, 4.0
    depth = 3.5  # single tercile keeps the distance word constant
    viewpoints: list[Viewpoint] = []
    for k in levels:
        viewpoints.extend(icosphere_viewpoints(k, depth).viewpoints)

    captions = [
        viewpoint_caption(GENERIC, vp, Provenance("uniform"), d_min, d_max, ordinal=0)
        for vp in viewpoints
    ]
    classes = sorted(set(captions))
    class_of = {c: i for i, c in enumerate(classes)}
    samples = []
    for i, (vp, cap) in enumerate(zip(viewpoints, captions)):
        img = octant_image(class_of[cap], len(classes), sample_seed=seed * 100003 + i,
                           size=size, noise=noise)
        samples.append(PairedSample(None, cap, "uniform", image=img))
    return samples


def phrase_classes(samples) -> int:
    return len({s.caption for s in samples})


def octant_of(viewpoint: Viewpoint) -> int:
    """Index 0..7 from the signs of the eye direction components."""
    d = -viewpoint.forward
    return (int(d[0] > 0) << 2) | (int(d[1] > 0) << 1) | int(d[2] > 0)


def octant_targets(viewpoints, seed: int = 0, dim: int = 768) -> np.ndarray:
    """One of eight random orthonormal target vectors per viewpoint octant."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, 8)))
    basis = q.T  # (8, dim) orthonormal rows
    return np.stack([basis[octant_of(v)] for v in viewpoints])
