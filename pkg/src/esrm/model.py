"""Learner network (feature extractor, projection head, classifier) and entropy."""

from __future__ import annotations

import contextlib
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

PROJECTION_DIM = 128
CHECKPOINT_VERSION = 1


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """ResNet-18 for small images: 3x3 stem, no max-pool, width ``nf`` (64 = full width)."""

    def __init__(self, in_channels: int = 3, nf: int = 64):
        super().__init__()
        self.in_planes = nf
        self.conv1 = nn.Conv2d(in_channels, nf, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(nf)
        self.layer1 = self._make_layer(nf, 2, stride=1)
        self.layer2 = self._make_layer(nf * 2, 2, stride=2)
        self.layer3 = self._make_layer(nf * 4, 2, stride=2)
        self.layer4 = self._make_layer(nf * 8, 2, stride=2)
        self.out_dim = nf * 8

    def _make_layer(self, planes, n_blocks, stride):
        layers = []
        for s in [stride] + [1] * (n_blocks - 1):
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)


class ReducedCNN(nn.Module):
    """Three conv-BN-ReLU-pool stages; small enough for CPU-only experiments."""

    def __init__(self, in_channels: int = 3, width: int = 32):
        super().__init__()
        chans = [in_channels, width, width * 2, width * 4]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [
                nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
        self.body = nn.Sequential(*layers)
        self.out_dim = chans[-1]

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.body(x), 1), 1)


BACKBONES = {"resnet18": ResNet18, "reduced_cnn": ReducedCNN}


class LearnerModel(nn.Module):
    """Feature extractor ``f``, projection head ``g`` and classifier ``phi``."""

    def __init__(
        self,
        num_classes: int,
        backbone: str = "resnet18",
        in_channels: int = 3,
        image_size: int = 32,
        width: int | None = None,
    ):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        kwargs = {} if width is None else {"nf" if backbone == "resnet18" else "width": width}
        self.arch = {
            "num_classes": num_classes,
            "backbone": backbone,
            "in_channels": in_channels,
            "image_size": image_size,
            "width": width,
        }
        self.f = BACKBONES[backbone](in_channels=in_channels, **kwargs)
        d = self.f.out_dim
        self.g = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, PROJECTION_DIM))
        self.phi = nn.Linear(d, num_classes)

    @property
    def num_classes(self) -> int:
        return self.arch["num_classes"]

    def check_input(self, images: torch.Tensor) -> None:
        a = self.arch
        expected = (a["in_channels"], a["image_size"], a["image_size"])
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(f"expected images of shape N x {expected}, got {tuple(images.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.phi(self.f(x))

    def forward_all(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits and unit-norm projections from a single backbone pass."""
        feats = self.f(x)
        return self.phi(feats), F.normalize(self.g(feats), dim=1)


def embed(model: LearnerModel, images: torch.Tensor) -> torch.Tensor:
    """Row-normalised projections ``g(f(x))``; differentiable through ``f`` and ``g``."""
    model.check_input(images)
    return F.normalize(model.g(model.f(images)), dim=1)


def classify(model: LearnerModel, images: torch.Tensor) -> torch.Tensor:
    """Raw logits ``phi(f(x))``."""
    model.check_input(images)
    return model(images)


@contextlib.contextmanager
def inference_mode(model: nn.Module):
    """Evaluate with batch-norm running statistics and no autograd, restoring the mode after."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)


def entropy(logits: torch.Tensor) -> torch.Tensor:
    """Per-row Shannon entropy (nats) of ``softmax(logits)``.

    Uses ``log_softmax`` so huge logits do not overflow; results are clamped to
    ``[0, ln C]`` to absorb rounding.
    """
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ValueError(f"entropy needs N x C logits with C >= 2, got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("entropy received non-finite logits")
    logp = F.log_softmax(logits, dim=1)
    h = -(logp.exp() * logp).sum(dim=1)
    return h.clamp(0.0, math.log(logits.shape[1]))


def predict_entropy(model: LearnerModel, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Inference-mode entropies of a batch of raw images."""
    out = []
    with inference_mode(model):
        for i in range(0, images.shape[0], batch_size):
            out.append(entropy(classify(model, images[i : i + batch_size])))
    return torch.cat(out) if out else torch.empty(0)


def save_checkpoint(model: LearnerModel, path: str | Path, extra: dict | None = None) -> None:
    torch.save(
        {"format_version": CHECKPOINT_VERSION, "arch": model.arch, "state_dict": model.state_dict(), "extra": extra or {}},
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[LearnerModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    model = LearnerModel(**payload["arch"])
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
