"""Learnable stack: channel projection, pretrained backbone, task heads, losses."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .labels import NUM_ACTIVITIES, NUM_SLOT_CLASSES, NUM_USER_SLOTS

BACKBONES = ("convnext_tiny", "resnet18", "mobilenet_v3_small")
# Pooled feature dimension per architecture, asserted at construction so a
# wrong wiring fails fast instead of at loss time.
BACKBONE_FEATURE_DIMS = {
    "convnext_tiny": 768,
    "resnet18": 512,
    "mobilenet_v3_small": 576,
}
TASKS = ("identity", "counting")
CHANNEL_STRATEGIES = ("projection", "replicate")


class ChannelProjection(nn.Module):
    """Learnable 1x1 convolution lifting the single-channel image to 3 channels."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 3, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        return self.conv(x)


class ChannelReplicate(nn.Module):
    """Parameter-free alternative: repeat the single channel three times."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        return x.expand(-1, 3, -1, -1)


def build_backbone(kind: str, pretrained: bool) -> nn.Module:
    """Feature extractor: named torchvision architecture with the classifier removed.

    Returns a module mapping (B, 3, H, W) to the global-average-pooled
    feature vector (B, d).  Pretrained weight loading failures are fatal.
    """
    import torchvision.models as tvm

    if kind not in BACKBONES:
        raise ValueError(f"backbone must be one of {BACKBONES}, got {kind!r}")
    builders = {
        "convnext_tiny": (tvm.convnext_tiny, tvm.ConvNeXt_Tiny_Weights.IMAGENET1K_V1),
        "resnet18": (tvm.resnet18, tvm.ResNet18_Weights.IMAGENET1K_V1),
        "mobilenet_v3_small": (
            tvm.mobilenet_v3_small,
            tvm.MobileNet_V3_Small_Weights.IMAGENET1K_V1,
        ),
    }
    builder, weights = builders[kind]
    try:
        net = builder(weights=weights if pretrained else None)
    except Exception as exc:
        raise RuntimeError(
            f"failed to load pretrained weights for {kind}: {exc}"
        ) from exc
    if kind == "resnet18":
        net.fc = nn.Identity()
    else:
        net.classifier = nn.Identity()
    return net


class SensingModel(nn.Module):
    """Channel lift + backbone + one task head.

    task "identity": head maps features to (B, 6, 10) slot logits.
    task "counting": head maps features to (B, 9) non-negative counts (ReLU).

    With pretrained=False, `init_seed` makes two constructions produce
    identical parameters.
    """

    def __init__(
        self,
        task: str,
        backbone: str = "convnext_tiny",
        pretrained: bool = True,
        channel_strategy: str = "projection",
        init_seed: int = 0,
    ):
        super().__init__()
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        if channel_strategy not in CHANNEL_STRATEGIES:
            raise ValueError(
                f"channel_strategy must be one of {CHANNEL_STRATEGIES}, got {channel_strategy!r}"
            )
        self.task = task
        self.backbone_kind = backbone
        self.channel_strategy = channel_strategy
        self.feature_dim = BACKBONE_FEATURE_DIMS[backbone] if backbone in BACKBONE_FEATURE_DIMS else None
        if self.feature_dim is None:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {backbone!r}")
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.lift = ChannelProjection() if channel_strategy == "projection" else ChannelReplicate()
            self.backbone = build_backbone(backbone, pretrained)
            out_dim = NUM_USER_SLOTS * NUM_SLOT_CLASSES if task == "identity" else NUM_ACTIVITIES
            self.head = nn.Linear(self.feature_dim, out_dim)
        self._assert_feature_dim()

    def _assert_feature_dim(self) -> None:
        with torch.no_grad():
            z = self.backbone(torch.zeros(1, 3, 64, 64))
        z = torch.flatten(z, 1)
        if z.shape[1] != self.feature_dim:
            raise RuntimeError(
                f"backbone {self.backbone_kind} produced {z.shape[1]}-dim features, "
                f"expected {self.feature_dim}"
            )

    def projection_parameters(self):
        """Parameters of the channel lift (its own learning-rate group)."""
        return list(self.lift.parameters())

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled feature vectors (B, d) for single-channel images (B, 1, H, W)."""
        z = self.backbone(self.lift(images))
        return torch.flatten(z, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        z = self.features(images)
        out = self.head(z)
        if self.task == "identity":
            return out.view(-1, NUM_USER_SLOTS, NUM_SLOT_CLASSES)
        return F.relu(out)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss over per-slot softmax probabilities, mean across slots and batch.

    logits: (..., U, K); targets: one-hot of the same shape, or integer class
    indices of shape (..., U).  gamma = 0 reduces to plain cross-entropy.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits passed to focal_loss")
    log_probs = F.log_softmax(logits, dim=-1)
    if targets.shape == logits.shape:
        log_p_true = (log_probs * targets).sum(dim=-1)
    else:
        log_p_true = log_probs.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    p_true = log_p_true.exp()
    return (-((1.0 - p_true) ** gamma) * log_p_true).mean()


def count_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and ground-truth activity counts."""
    if predicted.shape != target.shape:
        raise ValueError(
            f"shape mismatch: predicted {tuple(predicted.shape)} vs target {tuple(target.shape)}"
        )
    if predicted.numel() and predicted.min() < 0:
        raise ValueError("count predictions must be non-negative (head guarantee)")
    return ((predicted - target) ** 2).mean()
