"""Replay memory: entropy selection, reservoir sampling and provenance oracles.

All update functions mutate the buffer in place and return it.  A buffer has a
single writer (the trainer); reading statistics while an update runs is not
supported.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import REAL, Provenance, Sample, samples_to_tensor

STRATEGIES = ("es", "reservoir", "real_only", "synthetic_only")


@dataclass
class MemoryBuffer:
    capacity: int
    strategy: str = "es"
    samples: list[Sample] = field(default_factory=list)
    entropies: list[float] = field(default_factory=list)
    n_seen_so_far: int = 0

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("buffer capacity must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown memory strategy {self.strategy!r}; choose from {STRATEGIES}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def is_full(self) -> bool:
        return len(self.samples) >= self.capacity

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.samples]

    def slots(self) -> list[tuple[Sample, float]]:
        return list(zip(self.samples, self.entropies))

    def _put(self, index: int, sample: Sample, ent: float) -> None:
        if not (math.isfinite(ent) and ent >= 0):
            raise ValueError(f"slot entropy must be finite and non-negative, got {ent}")
        if index == len(self.samples):
            self.samples.append(sample)
            self.entropies.append(ent)
        else:
            self.samples[index] = sample
            self.entropies[index] = ent

    def to_records(self) -> list[dict]:
        return [
            {
                "slot": i,
                "id": s.id,
                "label": s.label,
                "provenance": s.provenance.kind,
                "source_tag": s.provenance.source_tag,
                "entropy": e,
            }
            for i, (s, e) in enumerate(zip(self.samples, self.entropies))
        ]

    def write_snapshot(self, path: str | Path) -> None:
        """One JSON record per slot: slot, id, label, provenance, source_tag, entropy."""
        with Path(path).open("w") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")


def _entropy_list(batch: Sequence[Sample], entropies) -> list[float]:
    if entropies is None:
        return [0.0] * len(batch)
    ents = [float(e) for e in np.asarray(entropies, dtype=np.float64).reshape(-1)]
    if len(ents) != len(batch):
        raise ValueError(f"got {len(ents)} entropies for a batch of {len(batch)}")
    return ents


def class_min_slot(buffer: MemoryBuffer, label: int) -> int:
    """Index of the lowest-entropy slot of ``label``; ties go to the lowest index."""
    best, best_ent = -1, math.inf
    for i, (s, e) in enumerate(zip(buffer.samples, buffer.entropies)):
        if s.label == label and e < best_ent:
            best, best_ent = i, e
    assert best >= 0, f"class {label} absent from buffer"
    return best


def es_filter(entropies: Sequence[float]) -> list[int]:
    """Positions whose entropy is strictly above the batch median."""
    if len(entropies) == 0:
        return []
    threshold = float(np.median(np.asarray(entropies, dtype=np.float64)))
    return [i for i, e in enumerate(entropies) if e > threshold]


def es_update(
    buffer: MemoryBuffer,
    batch: Sequence[Sample],
    entropies,
    rng: np.random.Generator,
    trace: list | None = None,
) -> MemoryBuffer:
    """Entropy Selection update.

    Samples at or below the batch median entropy are dropped.  Each survivor
    draws ``nominate = floor(u * (n_seen_so_far + 1))``.  While the buffer has
    room the survivor is appended; once full, a nomination inside the buffer
    evicts the lowest-entropy slot of the nominated slot's class, otherwise the
    survivor is discarded.  ``n_seen_so_far`` counts stored samples only.

    If ``trace`` is given, one dict per survivor describing the decision is
    appended to it.
    """
    if buffer.strategy != "es":
        raise ValueError(f"es_update on a {buffer.strategy!r} buffer")
    ents = _entropy_list(batch, entropies)
    for pos in es_filter(ents):
        sample, ent = batch[pos], ents[pos]
        nominate = int(rng.random() * (buffer.n_seen_so_far + 1))
        if buffer.n_seen_so_far < buffer.capacity and not buffer.is_full:
            slot = len(buffer.samples)
            buffer._put(slot, sample, ent)
            buffer.n_seen_so_far += 1
            if trace is not None:
                trace.append({"action": "append", "slot": slot, "id": sample.id, "entropy": ent})
        elif nominate < buffer.capacity:
            nominated_class = buffer.samples[nominate].label
            slot = class_min_slot(buffer, nominated_class)
            if trace is not None:
                trace.append(
                    {
                        "action": "replace",
                        "nominate": nominate,
                        "nominated_class": nominated_class,
                        "slot": slot,
                        "evicted_id": buffer.samples[slot].id,
                        "evicted_entropy": buffer.entropies[slot],
                        "class_entropies": [
                            (i, e) for i, (s, e) in enumerate(zip(buffer.samples, buffer.entropies))
                            if s.label == nominated_class
                        ],
                        "id": sample.id,
                        "entropy": ent,
                    }
                )
            buffer._put(slot, sample, ent)
            buffer.n_seen_so_far += 1
        elif trace is not None:
            trace.append({"action": "reject", "nominate": nominate, "id": sample.id, "entropy": ent})
    return buffer


def reservoir_update(
    buffer: MemoryBuffer,
    batch: Sequence[Sample],
    rng: np.random.Generator,
    entropies=None,
) -> MemoryBuffer:
    """Classical reservoir sampling; every incoming sample advances ``n_seen_so_far``."""
    ents = _entropy_list(batch, entropies)
    draws = rng.random(len(batch))
    for sample, ent, u in zip(batch, ents, draws):
        if len(buffer.samples) < buffer.capacity:
            buffer._put(len(buffer.samples), sample, ent)
        else:
            j = int(u * (buffer.n_seen_so_far + 1))
            if j < buffer.capacity:
                buffer._put(j, sample, ent)
        buffer.n_seen_so_far += 1
    return buffer


def oracle_update(
    buffer: MemoryBuffer,
    batch: Sequence[Sample],
    rng: np.random.Generator,
    entropies=None,
) -> MemoryBuffer:
    """Reservoir sampling restricted to one provenance (``real_only``/``synthetic_only``).

    Samples of the other provenance are invisible: they neither enter the
    buffer nor advance the counter.
    """
    if buffer.strategy not in ("real_only", "synthetic_only"):
        raise ValueError(f"oracle_update on a {buffer.strategy!r} buffer")
    want_synthetic = buffer.strategy == "synthetic_only"
    ents = _entropy_list(batch, entropies)
    keep = [i for i, s in enumerate(batch) if s.provenance.is_synthetic == want_synthetic]
    return reservoir_update(buffer, [batch[i] for i in keep], rng, [ents[i] for i in keep])


def update(buffer: MemoryBuffer, batch: Sequence[Sample], entropies, rng: np.random.Generator) -> MemoryBuffer:
    """Dispatch to the update rule of ``buffer.strategy``."""
    if buffer.strategy == "es":
        return es_update(buffer, batch, entropies, rng)
    if buffer.strategy == "reservoir":
        return reservoir_update(buffer, batch, rng, entropies)
    return oracle_update(buffer, batch, rng, entropies)


def sample_memory(buffer: MemoryBuffer, mem_batch_size: int, rng: np.random.Generator) -> list[Sample]:
    """Uniform draw without replacement; returns every slot when the buffer is smaller."""
    n = len(buffer.samples)
    if n == 0 or mem_batch_size <= 0:
        return []
    if n <= mem_batch_size:
        return list(buffer.samples)
    idx = rng.choice(n, size=mem_batch_size, replace=False)
    return [buffer.samples[i] for i in idx]


def refresh_entropy(buffer: MemoryBuffer, model, batch_size: int = 256) -> MemoryBuffer:
    """Recompute every slot's entropy with ``model`` in inference mode."""
    from .model import predict_entropy

    if not buffer.samples:
        return buffer
    ents = predict_entropy(model, samples_to_tensor(buffer.samples), batch_size=batch_size)
    buffer.entropies = [float(e) for e in ents]
    return buffer


def composition_stats(buffer: MemoryBuffer) -> dict:
    n = len(buffer.samples)
    n_syn = sum(1 for s in buffer.samples if s.provenance.is_synthetic)
    per_class: dict[int, int] = {}
    for s in buffer.samples:
        per_class[s.label] = per_class.get(s.label, 0) + 1
    return {
        "size": n,
        "synthetic_fraction": n_syn / n if n else 0.0,
        "per_class_counts": dict(sorted(per_class.items())),
    }


def save_buffer(buffer: MemoryBuffer, path: str | Path) -> None:
    """Store slot images (8-bit), labels, provenance and entropies in an ``.npz`` file."""
    images = np.stack([s.image for s in buffer.samples]) if buffer.samples else np.zeros((0, 1, 1, 1))
    np.savez_compressed(
        path,
        capacity=buffer.capacity,
        strategy=buffer.strategy,
        n_seen_so_far=buffer.n_seen_so_far,
        ids=np.array([s.id for s in buffer.samples], dtype=np.int64),
        labels=np.array(buffer.labels, dtype=np.int64),
        kinds=np.array([s.provenance.kind for s in buffer.samples], dtype=str),
        tags=np.array([s.provenance.source_tag or "" for s in buffer.samples], dtype=str),
        entropies=np.array(buffer.entropies, dtype=np.float64),
        images=np.rint(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8),
    )


def load_buffer(path: str | Path) -> MemoryBuffer:
    with np.load(path) as f:
        buf = MemoryBuffer(int(f["capacity"]), str(f["strategy"]), n_seen_so_far=int(f["n_seen_so_far"]))
        for i in range(len(f["ids"])):
            prov = Provenance.synthetic(str(f["tags"][i])) if f["kinds"][i] == "synthetic" else REAL
            img = f["images"][i].astype(np.float32) / 255.0
            buf._put(i, Sample(int(f["ids"][i]), img, int(f["labels"][i]), prov), float(f["entropies"][i]))
    return buf
