"""Datasets, synthetic-data contamination, task splits, augmentation and streaming.

Images are kept as ``float32`` arrays of shape ``H x W x C`` with values in
``[0, 1]``.  On disk a dataset is a tree ``root/<class_name>/<file>.png`` with
an optional ``manifest.jsonl`` recording ids and provenance for every file.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torchvision.transforms.v2 import functional as TF

MANIFEST_NAME = "manifest.jsonl"
IMAGE_SUFFIXES = (".png",)


class DatasetStructureError(ValueError):
    """The directory layout or the dataset contents violate a structural rule."""


class DatasetFormatError(ValueError):
    """Image files are unreadable or inconsistent in shape."""


@dataclass(frozen=True)
class Provenance:
    kind: str = "real"
    source_tag: str | None = None

    def __post_init__(self):
        if self.kind not in ("real", "synthetic"):
            raise ValueError(f"unknown provenance kind {self.kind!r}")
        if self.kind == "synthetic" and not self.source_tag:
            raise ValueError("synthetic provenance needs a source tag")
        if self.kind == "real" and self.source_tag is not None:
            raise ValueError("real provenance carries no source tag")

    @property
    def is_synthetic(self) -> bool:
        return self.kind == "synthetic"

    @classmethod
    def synthetic(cls, source_tag: str) -> "Provenance":
        return cls("synthetic", source_tag)

    def __str__(self) -> str:
        return self.kind if self.source_tag is None else f"{self.kind}:{self.source_tag}"


REAL = Provenance()


@dataclass(frozen=True, eq=False)
class Sample:
    """One image with its label and real/synthetic provenance.

    ``label`` is the class the learner is trained on.  For domain-incremental
    splits it is the coarse label and ``fine_label`` keeps the original class.
    """

    id: int
    image: np.ndarray
    label: int
    provenance: Provenance = REAL
    coarse_label: int | None = None
    fine_label: int | None = None

    def __post_init__(self):
        if self.image.ndim != 3:
            raise DatasetFormatError(f"sample {self.id}: expected HxWxC image, got shape {self.image.shape}")
        if self.image.flags.writeable or self.image.dtype != np.float32:
            img = np.array(self.image, dtype=np.float32)
            img.setflags(write=False)
            object.__setattr__(self, "image", img)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    samples: tuple[Sample, ...]
    class_count: int
    name: str = ""
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"{c:03d}" for c in range(self.class_count)))
        if len(self.class_names) != self.class_count:
            raise DatasetStructureError("class_names length differs from class_count")
        seen = set()
        shape = None
        for s in self.samples:
            if not 0 <= s.label < self.class_count:
                raise DatasetStructureError(f"sample {s.id}: label {s.label} outside [0, {self.class_count})")
            if s.id in seen:
                raise DatasetStructureError(f"duplicate sample id {s.id}")
            seen.add(s.id)
            if shape is None:
                shape = s.image.shape
            elif s.image.shape != shape:
                raise DatasetFormatError(f"sample {s.id}: image shape {s.image.shape} differs from {shape}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple[int, ...] | None:
        return self.samples[0].image.shape if self.samples else None

    def by_class(self) -> dict[int, list[Sample]]:
        groups: dict[int, list[Sample]] = {c: [] for c in range(self.class_count)}
        for s in self.samples:
            groups[s.label].append(s)
        return groups

    def class_counts(self) -> list[int]:
        counts = [0] * self.class_count
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def synthetic_counts(self) -> list[int]:
        counts = [0] * self.class_count
        for s in self.samples:
            if s.provenance.is_synthetic:
                counts[s.label] += 1
        return counts


# ---------------------------------------------------------------------------
# disk I/O


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DatasetFormatError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise DatasetFormatError(f"{path}: expected 8-bit image, got {arr.dtype}")
    return arr.astype(np.float32) / 255.0


def _read_manifest(root: Path) -> dict[str, dict] | None:
    path = root / MANIFEST_NAME
    if not path.exists():
        return None
    records = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
            records[rec["path"]] = rec
    return records


def load_dataset(
    root: str | Path,
    expected_class_count: int,
    provenance: Provenance = REAL,
    name: str | None = None,
) -> LabeledDataset:
    """Load a class-directory tree of PNG images.

    Classes are indexed by the lexicographic order of their directory names and
    samples are ordered by class directory, then filename.  Without a manifest
    every sample gets ``provenance`` and ids are assigned sequentially in that
    order; with a manifest, ids and provenance come from its records.

    Raises:
        DatasetStructureError: no class directories, a class count other than
            ``expected_class_count``, an empty class directory, or files
            missing from the manifest.
        DatasetFormatError: unreadable images or inconsistent image sizes.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetStructureError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetStructureError(f"no class directories under {root}")
    if len(class_dirs) != expected_class_count:
        raise DatasetStructureError(
            f"{root}: expected {expected_class_count} class directories, found {len(class_dirs)}"
        )
    manifest = _read_manifest(root)

    samples = []
    shape = None
    next_id = 0
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetStructureError(f"class directory {cdir} holds no images")
        for path in files:
            image = _read_png(path)
            if shape is None:
                shape = image.shape
            elif image.shape != shape:
                raise DatasetFormatError(f"{path}: image shape {image.shape} differs from {shape}")
            rel = path.relative_to(root).as_posix()
            if manifest is not None:
                rec = manifest.get(rel)
                if rec is None:
                    raise DatasetStructureError(f"{rel} is missing from {MANIFEST_NAME}")
                if rec["label"] != label:
                    raise DatasetStructureError(f"{rel}: manifest label {rec['label']} != directory index {label}")
                prov = Provenance(rec["provenance"], rec.get("source_tag"))
                sid = int(rec["id"])
            else:
                prov = provenance
                sid = next_id
                next_id += 1
            samples.append(Sample(id=sid, image=image, label=label, provenance=prov))
    return LabeledDataset(
        samples=tuple(samples),
        class_count=expected_class_count,
        name=name if name is not None else root.name,
        class_names=tuple(p.name for p in class_dirs),
    )


def save_dataset(dataset: LabeledDataset, root: str | Path) -> Path:
    """Write ``dataset`` as PNG class directories plus a manifest; returns the root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in dataset.samples:
        cname = dataset.class_names[s.label]
        rel = f"{cname}/{s.id:08d}.png"
        out = root / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.rint(np.asarray(s.image) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(out)
        lines.append(
            json.dumps(
                {
                    "id": s.id,
                    "path": rel,
                    "label": s.label,
                    "provenance": s.provenance.kind,
                    "source_tag": s.provenance.source_tag,
                }
            )
        )
    # class dirs with no samples would be dropped by load_dataset
    for cname in dataset.class_names:
        (root / cname).mkdir(exist_ok=True)
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return root


# ---------------------------------------------------------------------------
# contamination


@dataclass(frozen=True)
class ContaminationSpec:
    ratio: float
    source_shares: Mapping[str, float] = field(default_factory=lambda: {"synthetic": 1.0})
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"contamination ratio must lie in [0, 1], got {self.ratio}")
        if not self.source_shares:
            raise ValueError("at least one synthetic source is required")
        if any(v < 0 for v in self.source_shares.values()):
            raise ValueError("source shares must be non-negative")
        total = sum(self.source_shares.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"source shares sum to {total}, expected 1")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


def apportion(total: int, shares: Mapping[str, float]) -> dict[str, int]:
    """Split an integer ``total`` across tags proportionally to ``shares``.

    Largest-remainder rule: each tag gets ``floor(share * total)``, then the
    leftover units go to the largest fractional parts, ties in tag order.
    """
    tags = sorted(shares)
    exact = {t: shares[t] * total for t in tags}
    counts = {t: int(math.floor(exact[t] + 1e-9)) for t in tags}
    leftover = total - sum(counts.values())
    order = sorted(tags, key=lambda t: (-(exact[t] - counts[t]), tags.index(t)))
    for t in order[:leftover]:
        counts[t] += 1
    return counts


def contaminate(
    real: LabeledDataset,
    twins: Mapping[str, LabeledDataset],
    spec: ContaminationSpec,
) -> LabeledDataset:
    """Replace a class-wise fraction of ``real`` with samples from synthetic twins.

    In every class ``c`` exactly ``round(P * n_c)`` samples (chosen uniformly)
    are substituted in place by twin images drawn uniformly without replacement
    from the same class of each source.  Substituted samples keep the id and
    label of the real sample they replace.
    """
    missing = set(spec.source_shares) - set(twins)
    if missing:
        raise DatasetStructureError(f"no twin dataset for sources {sorted(missing)}")
    for tag in spec.source_shares:
        if twins[tag].class_count != real.class_count:
            raise DatasetStructureError(
                f"twin {tag!r} has {twins[tag].class_count} classes, real dataset has {real.class_count}"
            )

    rng = np.random.default_rng(spec.seed)
    real_groups = real.by_class()
    twin_groups = {tag: twins[tag].by_class() for tag in sorted(spec.source_shares)}
    replacement: dict[int, Sample] = {}

    for c in range(real.class_count):
        members = real_groups[c]
        n_sub = round_half_up(spec.ratio * len(members))
        if n_sub == 0:
            continue
        per_source = apportion(n_sub, spec.source_shares)
        for tag in sorted(per_source):
            if len(twin_groups[tag][c]) < per_source[tag]:
                raise DatasetStructureError(
                    f"twin {tag!r} class {c}: need {per_source[tag]} samples, have {len(twin_groups[tag][c])}"
                )
        targets = rng.choice(len(members), size=n_sub, replace=False)
        cursor = 0
        for tag in sorted(per_source):
            k = per_source[tag]
            if k == 0:
                continue
            pool = twin_groups[tag][c]
            picks = rng.choice(len(pool), size=k, replace=False)
            for pos, pick in zip(targets[cursor : cursor + k], picks):
                victim = members[pos]
                replacement[victim.id] = Sample(
                    id=victim.id,
                    image=pool[pick].image,
                    label=victim.label,
                    provenance=Provenance.synthetic(tag),
                    coarse_label=victim.coarse_label,
                )
            cursor += k

    samples = tuple(replacement.get(s.id, s) for s in real.samples)
    return LabeledDataset(
        samples=samples,
        class_count=real.class_count,
        name=f"{real.name}/contaminated-{spec.ratio:g}",
        class_names=real.class_names,
    )


# ---------------------------------------------------------------------------
# task splits


@dataclass(frozen=True, eq=False)
class Task:
    index: int
    classes: tuple[int, ...]
    source_classes: tuple[int, ...]
    samples: tuple[Sample, ...]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.samples]


@dataclass(frozen=True, eq=False)
class TaskSequence:
    tasks: tuple[Task, ...]
    mode: str
    seed: int
    coarse_map: Mapping[int, int] | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def project(self, dataset: LabeledDataset) -> list[tuple[Sample, ...]]:
        """Select the samples of ``dataset`` belonging to each task, e.g. a test set."""
        out = []
        for task in self.tasks:
            wanted = set(task.source_classes)
            chosen = [s for s in dataset.samples if s.label in wanted]
            if self.mode == "dil":
                chosen = [_relabel_coarse(s, self.coarse_map) for s in chosen]
            out.append(tuple(chosen))
        return out


def split_cil(dataset: LabeledDataset, n_tasks: int, seed: int) -> TaskSequence:
    """Class-incremental split: a seeded class permutation cut into equal blocks."""
    if n_tasks < 1 or dataset.class_count % n_tasks:
        raise ValueError(f"{dataset.class_count} classes cannot be split into {n_tasks} equal tasks")
    per_task = dataset.class_count // n_tasks
    order = np.random.default_rng(seed).permutation(dataset.class_count)
    groups = dataset.by_class()
    tasks = []
    for t in range(n_tasks):
        classes = tuple(int(c) for c in order[t * per_task : (t + 1) * per_task])
        wanted = set(classes)
        samples = tuple(s for s in dataset.samples if s.label in wanted)
        assert sum(len(groups[c]) for c in classes) == len(samples)
        tasks.append(Task(index=t, classes=classes, source_classes=classes, samples=samples))
    return TaskSequence(tasks=tuple(tasks), mode="cil", seed=seed)


def _relabel_coarse(s: Sample, coarse_map: Mapping[int, int] | None) -> Sample:
    coarse = coarse_map[s.label] if coarse_map is not None else s.coarse_label
    if coarse is None:
        raise DatasetStructureError(f"sample {s.id} has no coarse label")
    return dataclasses.replace(s, label=int(coarse), coarse_label=int(coarse), fine_label=s.label)


def split_dil(
    dataset: LabeledDataset,
    coarse_map: Mapping[int, int] | None,
    n_steps: int,
    seed: int,
) -> TaskSequence:
    """Domain-incremental split over coarse classes.

    Each coarse class must own exactly ``n_steps`` fine classes.  Step ``k``
    holds, for every coarse class, the samples of its ``k``-th fine class after
    a seeded permutation; emitted samples are relabelled with the coarse label.
    When ``coarse_map`` is None the per-sample ``coarse_label`` is used.
    """
    if coarse_map is None:
        coarse_map = {}
        for s in dataset.samples:
            if s.coarse_label is None:
                raise DatasetStructureError(f"sample {s.id} has no coarse label")
            coarse_map.setdefault(s.label, s.coarse_label)
    coarse_map = {int(k): int(v) for k, v in coarse_map.items()}
    fine_of: dict[int, list[int]] = defaultdict(list)
    for fine in range(dataset.class_count):
        if fine not in coarse_map:
            raise DatasetStructureError(f"fine class {fine} has no coarse class")
        fine_of[coarse_map[fine]].append(fine)
    bad = {c: len(f) for c, f in fine_of.items() if len(f) != n_steps}
    if bad:
        raise DatasetStructureError(f"coarse groups must hold {n_steps} fine classes each, got {bad}")

    rng = np.random.default_rng(seed)
    coarse_ids = sorted(fine_of)
    assignment = {c: [int(x) for x in rng.permutation(sorted(fine_of[c]))] for c in coarse_ids}
    tasks = []
    for k in range(n_steps):
        fines = tuple(assignment[c][k] for c in coarse_ids)
        wanted = set(fines)
        samples = tuple(_relabel_coarse(s, coarse_map) for s in dataset.samples if s.label in wanted)
        tasks.append(Task(index=k, classes=tuple(coarse_ids), source_classes=fines, samples=samples))
    return TaskSequence(tasks=tuple(tasks), mode="dil", seed=seed, coarse_map=coarse_map)


def stream(task: Task, stream_batch_size: int, seed: int) -> list[tuple[Sample, ...]]:
    """Shuffle a task once and cut it into consecutive batches (last one may be short)."""
    if stream_batch_size < 2:
        raise ValueError("stream batch size must be at least 2")
    if len(task.samples) == 0:
        raise ValueError(f"task {task.index} is empty")
    order = np.random.default_rng(seed).permutation(len(task.samples))
    shuffled = [task.samples[i] for i in order]
    return [tuple(shuffled[i : i + stream_batch_size]) for i in range(0, len(shuffled), stream_batch_size)]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str = "full"
    crop_prob: float = 0.5
    flip_prob: float = 0.5
    jitter_params: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    # reflection padding before cropping back to the input size
    crop_padding: int = 4

    def __post_init__(self):
        if self.kind not in ("partial", "full"):
            raise ValueError(f"augmentation kind must be 'partial' or 'full', got {self.kind!r}")


def samples_to_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    """Stack HxWxC sample images into an ``N x C x H x W`` float tensor."""
    if not samples:
        raise ValueError("cannot stack an empty batch")
    arr = np.stack([s.image for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def labels_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.tensor([s.label for s in samples], dtype=torch.long)


def _random_crop(img: torch.Tensor, pad: int, rng) -> torch.Tensor:
    _, h, w = img.shape
    padded = F.pad(img[None], (pad, pad, pad, pad), mode="reflect")[0]
    top, left = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return padded[:, top : top + h, left : left + w]


def _color_jitter(img: torch.Tensor, params, rng) -> torch.Tensor:
    brightness, contrast, saturation, hue = params
    ops = []
    if brightness > 0:
        ops.append(("b", float(rng.uniform(max(0.0, 1 - brightness), 1 + brightness))))
    if contrast > 0:
        ops.append(("c", float(rng.uniform(max(0.0, 1 - contrast), 1 + contrast))))
    if saturation > 0 and img.shape[0] == 3:
        ops.append(("s", float(rng.uniform(max(0.0, 1 - saturation), 1 + saturation))))
    if hue > 0 and img.shape[0] == 3:
        ops.append(("h", float(rng.uniform(-hue, hue))))
    for j in rng.permutation(len(ops)):
        op, factor = ops[j]
        if op == "b":
            img = TF.adjust_brightness(img, factor)
        elif op == "c":
            img = TF.adjust_contrast(img, factor)
        elif op == "s":
            img = TF.adjust_saturation(img, factor)
        else:
            img = TF.adjust_hue(img, factor)
    return img.clamp_(0.0, 1.0)


def _grayscale(img: torch.Tensor) -> torch.Tensor:
    if img.shape[0] != 3:
        return img
    return TF.rgb_to_grayscale(img, num_output_channels=3)


def augment_images(images: torch.Tensor, policy: AugmentationPolicy, rng) -> torch.Tensor:
    """Augment an ``N x C x H x W`` batch image by image; returns a new tensor.

    Every transform is drawn independently per image with its probability:
    crop, then horizontal flip, and for the full policy colour jitter and
    grayscale.  ``rng`` is a ``numpy.random.Generator`` (or any object with the
    same ``random``/``integers``/``uniform``/``permutation`` methods).
    """
    if images.shape[0] == 0:
        raise ValueError("cannot augment an empty batch")
    out = []
    for img in images:
        if rng.random() < policy.crop_prob and policy.crop_padding > 0:
            img = _random_crop(img, policy.crop_padding, rng)
        if rng.random() < policy.flip_prob:
            img = img.flip(-1)
        if policy.kind == "full":
            if rng.random() < policy.jitter_prob:
                img = _color_jitter(img.clone(), policy.jitter_params, rng)
            if rng.random() < policy.grayscale_prob:
                img = _grayscale(img)
        out.append(img)
    return torch.stack(out)


def augment(batch: Sequence[Sample], policy: AugmentationPolicy, rng) -> torch.Tensor:
    """Augment a list of samples; returns an ``N x C x H x W`` tensor."""
    if not batch:
        raise ValueError("cannot augment an empty batch")
    return augment_images(samples_to_tensor(batch), policy, rng)


def iter_batches(samples: Sequence[Sample], size: int) -> Iterable[Sequence[Sample]]:
    for i in range(0, len(samples), size):
        yield samples[i : i + size]
