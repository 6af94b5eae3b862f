"""Shared-trunk / two-head network and the two co-trained instances.

The network is one trunk (resnet18 or a small 3-block convnet) feeding
at most two task heads. Each head is a 1x1 convolution, global pooling,
two fully-connected layers, and a final classifier; the activation just
before the classifier is exposed as the task's feature vector. The
identity classifier optionally carries one extra dataset-membership
logit, trained only through the consistency path.

Two instances differing only in initialization seed form the co-training
pair: each one's outputs pseudo-supervise the other.
"""

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import MixedBatch, stack_images

TRUNKS = ("resnet18", "tiny_conv")
PRETRAINED_ENV = "KA_PRETRAINED_WEIGHTS"


@dataclass
class ArchConfig:
    """Architecture knobs. A head is built iff its width is nonzero."""

    trunk: str = "tiny_conv"
    feature_dim: int = 64
    num_ids: int = 0          # identity classifier width; 0 disables the reID head
    num_attributes: int = 0   # attribute count; 0 disables the PAR head
    dataset_head: bool = True
    pretrained: bool = False

    def __post_init__(self):
        if self.trunk not in TRUNKS:
            raise ValueError(f"unknown trunk {self.trunk!r}, expected one of {TRUNKS}")
        if self.feature_dim <= 0:
            raise ValueError(f"feature_dim must be positive, got {self.feature_dim}")
        if self.num_ids == 1:
            raise ValueError("num_ids must be 0 (head disabled) or >= 2")
        if self.num_ids < 0 or self.num_attributes < 0:
            raise ValueError("head widths must be non-negative")

    @property
    def has_reid(self) -> bool:
        return self.num_ids > 0

    @property
    def has_par(self) -> bool:
        return self.num_attributes > 0


@dataclass
class TaskOutputs:
    """Per-batch network outputs; fields for a disabled head are None.

    All tensors share the leading batch dimension. ``dataset_logit`` is
    the extra column of the identity classifier when enabled.
    """

    reid_features: torch.Tensor | None = None  # N x feature_dim
    reid_logits: torch.Tensor | None = None    # N x num_ids
    dataset_logit: torch.Tensor | None = None  # N x 1
    par_features: torch.Tensor | None = None   # N x feature_dim
    par_logits: torch.Tensor | None = None     # N x num_attributes


@dataclass
class DualOutputs:
    """Outputs of both instances on one identical batch (same row order)."""

    left: TaskOutputs
    right: TaskOutputs
    batch: MixedBatch

    @property
    def n_a(self) -> int:
        return self.batch.n_a

    @property
    def n_b(self) -> int:
        return self.batch.n_b


class TaskHead(nn.Module):
    """1x1 conv -> pool -> fc -> fc (feature vector) -> classifier."""

    def __init__(self, in_channels: int, feature_dim: int, num_classes: int):
        super().__init__()
        mid = 2 * feature_dim
        self.reduce = nn.Conv2d(in_channels, mid, kernel_size=1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(mid, feature_dim)
        self.fc2 = nn.Linear(feature_dim, feature_dim)
        self.classifier = nn.Linear(feature_dim, num_classes)
        self.act = nn.ReLU(inplace=True)

    def forward(self, fmap):
        x = self.act(self.reduce(fmap))
        x = self.pool(x).flatten(1)
        x = self.act(self.fc1(x))
        feats = self.fc2(x)
        logits = self.classifier(feats)
        return feats, logits


class TinyConvTrunk(nn.Module):
    """3 conv blocks; enough capacity for the synthetic desk-scale data."""

    out_channels = 64

    def __init__(self):
        super().__init__()
        chans = [3, 16, 32, self.out_channels]
        blocks = []
        for i in range(3):
            blocks += [
                nn.Conv2d(chans[i], chans[i + 1], kernel_size=3, padding=1),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(inplace=True),
            ]
            if i < 2:
                blocks.append(nn.MaxPool2d(2))
        self.body = nn.Sequential(*blocks)

    def forward(self, x):
        return self.body(x)


class ResNet18Trunk(nn.Module):
    out_channels = 512

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet18
        net = resnet18(weights=None)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)

    def forward(self, x):
        return self.body(x)


class DualTaskModel(nn.Module):
    """One trunk plus the enabled task heads."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        if not cfg.has_reid and not cfg.has_par:
            raise ValueError("at least one task head must be enabled")
        self.cfg = cfg
        self.trunk = TinyConvTrunk() if cfg.trunk == "tiny_conv" else ResNet18Trunk()
        ch = self.trunk.out_channels
        if cfg.has_reid:
            width = cfg.num_ids + (1 if cfg.dataset_head else 0)
            self.reid_head = TaskHead(ch, cfg.feature_dim, width)
        else:
            self.reid_head = None
        if cfg.has_par:
            self.par_head = TaskHead(ch, cfg.feature_dim, cfg.num_attributes)
        else:
            self.par_head = None

    def forward(self, x: torch.Tensor) -> TaskOutputs:
        fmap = self.trunk(x)
        out = TaskOutputs()
        if self.reid_head is not None:
            feats, logits = self.reid_head(fmap)
            out.reid_features = feats
            if self.cfg.dataset_head:
                out.reid_logits = logits[:, : self.cfg.num_ids]
                out.dataset_logit = logits[:, self.cfg.num_ids:]
            else:
                out.reid_logits = logits
        if self.par_head is not None:
            out.par_features, out.par_logits = self.par_head(fmap)
        return out


def _resolve_pretrained(pretrained_weights):
    path = pretrained_weights or os.environ.get(PRETRAINED_ENV)
    if not path or not os.path.isfile(path):
        raise FileNotFoundError(
            f"pretrained trunk weights not found (got {path!r}); "
            f"pass pretrained_weights= or set ${PRETRAINED_ENV}")
    return path


def build_model(cfg: ArchConfig, seed: int, pretrained_weights=None) -> DualTaskModel:
    """Construct a model with seed-deterministic initialization.

    With ``cfg.pretrained`` the trunk is overwritten from an external
    state-dict file (argument or $KA_PRETRAINED_WEIGHTS); heads keep
    their seeded random init.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DualTaskModel(cfg)
    if cfg.pretrained:
        path = _resolve_pretrained(pretrained_weights)
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.trunk.load_state_dict(state)
    return model


def init_dual(cfg: ArchConfig, seed_left: int, seed_right: int,
              pretrained_weights=None) -> tuple[DualTaskModel, DualTaskModel]:
    """Two architecturally identical, differently-initialized instances.

    Differing initialization is the whole perturbation, so equal seeds
    are rejected. With pretrained trunks both instances share the same
    trunk weights and differ only in their heads.
    """
    if seed_left == seed_right:
        raise ValueError(f"seed_left == seed_right == {seed_left}: instances would be identical")
    left = build_model(cfg, seed_left, pretrained_weights)
    right = build_model(cfg, seed_right, pretrained_weights)
    return left, right


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x C float array in [0,1] -> N x C x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def samples_to_tensor(samples) -> torch.Tensor:
    return images_to_tensor(stack_images(samples))


def forward_dual(left: DualTaskModel, right: DualTaskModel, batch: MixedBatch) -> DualOutputs:
    """Feed the identical batch (A rows first) through both instances."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = samples_to_tensor(batch.a_samples + batch.b_samples)
    return DualOutputs(left=left(x), right=right(x), batch=batch)
