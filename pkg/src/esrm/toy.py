"""Procedural desk-scale benchmark with a low-diversity synthetic twin.

Each "real" class is a mixture of many visual modes: a mode prototype mixes a
class-wide smooth colour field with a mode-specific field, and samples add
random shifts, brightness changes and pixel noise.  The synthetic twin of a
class is built from a handful of medoid images of that class, each repeated
with light perturbations, mimicking the narrow diversity of generated data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter

from .data import REAL, LabeledDataset, Provenance, Sample


@dataclass(frozen=True)
class ToySpec:
    n_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 16
    modes_per_class: int = 20
    class_weight: float = 0.45
    field_resolution: int = 4
    max_shift: int = 3
    noise: float = 0.08
    twin_medoids: int = 10
    twin_noise: float = 0.02
    twin_shift: int = 1
    twin_smooth: float = 0.5  # blend weight towards a 3x3 box blur; mimics generator smoothness


def _smooth_fields(rng: np.random.Generator, n: int, res: int, size: int) -> np.ndarray:
    low = torch.from_numpy(rng.standard_normal((n, 3, res, res)).astype(np.float32))
    up = F.interpolate(low, size=(size, size), mode="bicubic", align_corners=False)
    return up.permute(0, 2, 3, 1).numpy()


def _quantize(img: np.ndarray) -> np.ndarray:
    # round to 8 bits so datasets survive a PNG round trip unchanged
    return (np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def make_real(spec: ToySpec, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Real train and test splits drawn from the same class/mode distribution."""
    rng = np.random.default_rng(seed)
    S = spec.image_size
    class_fields = _smooth_fields(rng, spec.n_classes, spec.field_resolution, S)
    mode_fields = _smooth_fields(rng, spec.n_classes * spec.modes_per_class, spec.field_resolution, S)
    mode_fields = mode_fields.reshape(spec.n_classes, spec.modes_per_class, S, S, 3)
    a = spec.class_weight
    protos = a * class_fields[:, None] + (1 - a) * mode_fields

    def draw(per_class: int, id_offset: int) -> list[Sample]:
        out = []
        for c in range(spec.n_classes):
            modes = rng.integers(spec.modes_per_class, size=per_class)
            for m in modes:
                dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
                x = np.roll(protos[c, m], (int(dy), int(dx)), axis=(0, 1))
                x = 1.5 * x + rng.normal(0.0, 0.25)
                img = _sigmoid(x) + rng.normal(0.0, spec.noise, size=x.shape)
                out.append(Sample(id=id_offset + len(out), image=_quantize(img), label=c, provenance=REAL))
        return out

    train = LabeledDataset(tuple(draw(spec.train_per_class, 0)), spec.n_classes, name="toy-real-train")
    test = LabeledDataset(tuple(draw(spec.test_per_class, 10**6)), spec.n_classes, name="toy-real-test")
    return train, test


def k_medoids(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 20) -> np.ndarray:
    """Indices of ``k`` medoids (alternating assignment/update from a k-means++ start)."""
    n = points.shape[0]
    k = min(k, n)
    sq = (points**2).sum(1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * points @ points.T, 0.0))
    medoids = [int(rng.integers(n))]
    for _ in range(1, k):
        d = dist[:, medoids].min(axis=1) ** 2
        medoids.append(int(rng.choice(n, p=d / d.sum())) if d.sum() > 0 else int(rng.integers(n)))
    medoids = np.array(medoids)
    for _ in range(iters):
        assign = dist[:, medoids].argmin(axis=1)
        new = medoids.copy()
        for j in range(k):
            members = np.nonzero(assign == j)[0]
            if members.size:
                new[j] = members[dist[np.ix_(members, members)].sum(axis=1).argmin()]
        if np.array_equal(new, medoids):
            break
        medoids = new
    return medoids


def make_twin(real: LabeledDataset, spec: ToySpec, seed: int, source_tag: str = "twin") -> LabeledDataset:
    """Synthetic twin with the class counts of ``real``, built from per-class medoids."""
    rng = np.random.default_rng(seed)
    prov = Provenance.synthetic(source_tag)
    out = []
    for c, members in real.by_class().items():
        flat = np.stack([s.image.reshape(-1) for s in members]).astype(np.float64)
        medoids = k_medoids(flat, spec.twin_medoids, rng)
        for i in range(len(members)):
            base = members[medoids[i % len(medoids)]].image
            dy, dx = rng.integers(-spec.twin_shift, spec.twin_shift + 1, size=2)
            img = np.roll(base, (int(dy), int(dx)), axis=(0, 1))
            if spec.twin_smooth:
                img = (1 - spec.twin_smooth) * img + spec.twin_smooth * uniform_filter(img, size=(3, 3, 1), mode="wrap")
            img = img + rng.normal(0.0, spec.twin_noise, size=base.shape)
            out.append(Sample(id=len(out), image=_quantize(img), label=c, provenance=prov))
    return LabeledDataset(tuple(out), real.class_count, name=f"toy-twin-{source_tag}")


def make_benchmark(spec: ToySpec = ToySpec(), seed: int = 0):
    """Returns ``(real_train, real_test, twin)``."""
    train, test = make_real(spec, seed)
    twin = make_twin(train, spec, seed + 1)
    return train, test, twin
