"""Pretrained backbone assemblies, freeze policies, and classification heads.

Four pretrained families (VGG-16, ResNet-50, ResNet-101, DenseNet-121) are
wrapped as feature extractors with the original classifier removed, plus a
`tiny` randomly-initialized convnet for CPU-scale smoke tests. Heads are
global-average pooling followed by up to three dense blocks and an 82-way
output layer.

Stage boundaries used by the `last_stage_only` freeze policy:
  vgg16        five conv blocks (between maxpools)
  resnet50/101 stem + the four residual macro-blocks (layer1..layer4)
  densenet121  stem + dense-block/transition pairs (norm5 rides with block 4)
  tiny         its three conv stages
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

N_CLASSES = 82

HEAD_UNIT_CHOICES = (128, 256, 512, 1024)
HEAD_DROPOUT_CHOICES = (0.0, 0.2, 0.5)
MAX_HEAD_BLOCKS = 3


class WeightError(RuntimeError):
    """Backbone weights could not be resolved or failed verification."""


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    weight_source: str = "random"   # "random" or "imagenet"
    include_classifier: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}; "
                             f"supported: {sorted(FAMILIES)}")
        if self.include_classifier:
            raise ValueError("the published classifier is always excluded")
        if self.weight_source not in ("random", "imagenet"):
            raise ValueError(f"unknown weight_source {self.weight_source!r}")


@dataclass(frozen=True)
class FreezePolicy:
    mode: str = "full_finetune"   # full_finetune | last_n_layers | last_stage_only
    n: int = 0

    def __post_init__(self):
        if self.mode not in ("full_finetune", "last_n_layers", "last_stage_only"):
            raise ValueError(f"unknown freeze mode {self.mode!r}")
        if self.mode == "last_n_layers" and self.n < 1:
            raise ValueError("last_n_layers requires n >= 1")


@dataclass(frozen=True)
class HeadConfig:
    blocks: tuple = ()            # ((units, dropout), ...)
    output_classes: int = N_CLASSES
    activation: str = "relu"
    pooling: str = "global_average"

    def __post_init__(self):
        if len(self.blocks) > MAX_HEAD_BLOCKS:
            raise ValueError(f"at most {MAX_HEAD_BLOCKS} head blocks, "
                             f"got {len(self.blocks)}")
        for units, dropout in self.blocks:
            if units < 1:
                raise ValueError(f"block units must be positive, got {units}")
            if not 0 <= dropout < 1:
                raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.pooling != "global_average":
            raise ValueError(f"unsupported pooling {self.pooling!r}")


class _VGGFeatures(nn.Module):
    def __init__(self, net):
        super().__init__()
        self.features = net.features

    def forward(self, x):
        return self.features(x)


class _ResNetFeatures(nn.Module):
    def __init__(self, net):
        super().__init__()
        self.conv1, self.bn1 = net.conv1, net.bn1
        self.relu, self.maxpool = net.relu, net.maxpool
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return x


class _DenseNetFeatures(nn.Module):
    def __init__(self, net):
        super().__init__()
        self.features = net.features

    def forward(self, x):
        return torch.relu(self.features(x))


class _TinyFeatures(nn.Module):
    """Three-stage convnet for CPU-scale tests; never pretrained."""

    def __init__(self):
        super().__init__()
        def stage(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                                 nn.ReLU(inplace=True))
        self.stage1 = stage(3, 8)
        self.stage2 = stage(8, 16)
        self.stage3 = stage(16, 32)

    def forward(self, x):
        return self.stage3(self.stage2(self.stage1(x)))


def _build_vgg16(weights):
    from torchvision import models
    w = models.VGG16_Weights.IMAGENET1K_V1 if weights else None
    return _VGGFeatures(models.vgg16(weights=w))


def _build_resnet50(weights):
    from torchvision import models
    w = models.ResNet50_Weights.IMAGENET1K_V1 if weights else None
    return _ResNetFeatures(models.resnet50(weights=w))


def _build_resnet101(weights):
    from torchvision import models
    w = models.ResNet101_Weights.IMAGENET1K_V1 if weights else None
    return _ResNetFeatures(models.resnet101(weights=w))


def _build_densenet121(weights):
    from torchvision import models
    w = models.DenseNet121_Weights.IMAGENET1K_V1 if weights else None
    return _DenseNetFeatures(models.densenet121(weights=w))


def _build_tiny(weights):
    if weights:
        raise WeightError("tiny backbone has no pretrained weights")
    return _TinyFeatures()


# family -> (builder, feature_dim, expected parameter count, weight file id)
FAMILIES = {
    "vgg16": (_build_vgg16, 512, 14_714_688, "vgg16-397923af.pth"),
    "resnet50": (_build_resnet50, 2048, 23_508_032, "resnet50-0676ba61.pth"),
    "resnet101": (_build_resnet101, 2048, 42_500_160, "resnet101-63fe2227.pth"),
    "densenet121": (_build_densenet121, 1024, 6_953_856, "densenet121-a639ec97.pth"),
    "tiny": (_build_tiny, 32, 6_032, None),
}

# parameter-name prefixes per stage, stem first
STAGE_TABLES = {
    "vgg16": [["features.0", "features.2"],
              ["features.5", "features.7"],
              ["features.10", "features.12", "features.14"],
              ["features.17", "features.19", "features.21"],
              ["features.24", "features.26", "features.28"]],
    "resnet50": [["conv1", "bn1"], ["layer1"], ["layer2"], ["layer3"], ["layer4"]],
    "resnet101": [["conv1", "bn1"], ["layer1"], ["layer2"], ["layer3"], ["layer4"]],
    "densenet121": [["features.conv0", "features.norm0"],
                    ["features.denseblock1", "features.transition1"],
                    ["features.denseblock2", "features.transition2"],
                    ["features.denseblock3", "features.transition3"],
                    ["features.denseblock4", "features.norm5"]],
    "tiny": [["stage1"], ["stage2"], ["stage3"]],
}


def feature_dim(family: str) -> int:
    return FAMILIES[family][1]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def load_backbone(spec: BackboneSpec) -> nn.Module:
    """Build the family's feature extractor and verify its parameter count."""
    builder, _, expected, weight_id = FAMILIES[spec.family]
    pretrained = spec.weight_source == "imagenet"
    if pretrained and weight_id is None:
        raise WeightError(f"no pretrained weights for family {spec.family!r}")
    try:
        backbone = builder(pretrained)
    except Exception as exc:  # download/checksum failures from the weight fetch
        raise WeightError(f"could not load weights for {spec.family}: {exc}") from exc
    actual = count_parameters(backbone)
    if actual != expected:
        raise WeightError(f"{spec.family}: parameter count {actual} does not match "
                          f"manifest value {expected}; refusing to proceed")
    return backbone


class Head(nn.Module):
    """Global-average pooling, dense blocks (dense -> relu -> dropout), 82-way output."""

    def __init__(self, config: HeadConfig, in_dim: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        layers = []
        width = in_dim
        for units, dropout in config.blocks:
            layers += [nn.Linear(width, units), nn.ReLU(inplace=True),
                       nn.Dropout(dropout)]
            width = units
        layers.append(nn.Linear(width, config.output_classes))
        self.classifier = nn.Sequential(*layers)

    def forward(self, x):
        x = self.pool(x).flatten(1)
        return self.classifier(x)


def build_head(config: HeadConfig, in_dim: int) -> Head:
    return Head(config, in_dim)


def head_param_count(config: HeadConfig, in_dim: int) -> int:
    """Closed-form parameter census for a head configuration."""
    total, width = 0, in_dim
    for units, _ in config.blocks:
        total += width * units + units
        width = units
    return total + width * config.output_classes + config.output_classes


class ModelAssembly(nn.Module):
    """Backbone + head with a per-parameter trainable mask."""

    def __init__(self, spec: BackboneSpec, freeze: FreezePolicy, head: HeadConfig):
        super().__init__()
        self.spec = spec
        self.freeze_policy = freeze
        self.head_config = head
        self.backbone = load_backbone(spec)
        self.head = build_head(head, feature_dim(spec.family))
        self.trainable_mask = apply_freeze(self, freeze)

    def forward(self, batch, mode="eval"):
        """batch: (B, H, W, 3) float tensor or array -> (B, classes) logits."""
        if isinstance(batch, np.ndarray):
            batch = torch.from_numpy(batch)
        batch = batch.float()
        if batch.ndim != 4 or batch.shape[-1] != 3:
            raise ValueError(f"expected (B, H, W, 3) batch, got {tuple(batch.shape)}")
        self.train(mode == "train")
        x = batch.permute(0, 3, 1, 2).contiguous()
        return self.head(self.backbone(x))


def _parameterized_layers(backbone: nn.Module):
    """Conv/dense modules in forward order; the unit counted by last_n_layers."""
    return [name for name, m in backbone.named_modules()
            if isinstance(m, (nn.Conv2d, nn.Linear))]


def apply_freeze(assembly: ModelAssembly, policy: FreezePolicy) -> dict:
    """Compute the trainable mask and set requires_grad accordingly.

    The head is always trainable. last_n_layers keeps the final n conv or
    dense backbone layers; batch-norm parameters outside those layers stay
    frozen. last_stage_only keeps the family's final stage.
    """
    mask = {}
    if policy.mode == "full_finetune":
        trainable_prefixes = None
    elif policy.mode == "last_n_layers":
        layers = _parameterized_layers(assembly.backbone)
        if policy.n > len(layers):
            raise ValueError(f"last_n_layers n={policy.n} exceeds the backbone's "
                             f"{len(layers)} parameterized layers")
        trainable_prefixes = layers[-policy.n:]
    else:  # last_stage_only
        trainable_prefixes = STAGE_TABLES[assembly.spec.family][-1]

    for name, param in assembly.named_parameters():
        if name.startswith("head."):
            trainable = True
        elif trainable_prefixes is None:
            trainable = True
        else:
            sub = name[len("backbone."):]
            trainable = any(sub == p or sub.startswith(p + ".")
                            for p in trainable_prefixes)
        param.requires_grad_(trainable)
        mask[name] = trainable
    return mask


def trainable_parameters(assembly: ModelAssembly):
    return [p for n, p in assembly.named_parameters() if assembly.trainable_mask[n]]


def snapshot_parameters(assembly: ModelAssembly) -> dict:
    return {n: p.detach().clone() for n, p in assembly.named_parameters()}
