"""The two-column style network.

The saliency column is parameter-free: two 2x2 stride-2 max-pools downsample
a 224x224 map to 56x56, which is flattened raw into a 3136-vector. Because
nothing in the column is learned or convolved, the feature at index i always
comes from the same 4x4 pixel cell: the representation keeps position and
ignores appearance. RGB columns wrap a conventional backbone whose classifier
head has been removed. Column features are concatenated, fused by one
fully-connected layer, and classified by a second.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from photostyle.taxonomy import StyleTaxonomy

SALIENCY_INPUT_SIZE = 224
# 224 -> 112 -> 56 via two 2x2 stride-2 max-pools, flattened.
SALIENCY_FEATURE_DIM = 56 * 56

COLUMN_KINDS = ("saliency", "rgb_patch", "rgb_warp")

CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    """Invalid model configuration or column input."""


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    """Declarative column layout and head sizes.

    rgb_feature_dim is reported by the backbone adapter at build time and is
    never hard-coded; a pre-set value acts as a compatibility check.
    """

    columns: tuple[str, ...]
    num_classes: int
    backbone_id: str = "toy"
    fusion_dim: int = 512
    dropout_rate: float = 0.5
    rgb_feature_dim: int | None = None
    saliency_projection_dim: int | None = None
    pretrained_backbone: bool = False
    init_seed: int = 0

    def __post_init__(self) -> None:
        self.columns = tuple(self.columns)
        if not self.columns:
            raise ModelConfigError("a model needs at least one column")
        for kind in self.columns:
            if kind not in COLUMN_KINDS:
                raise ModelConfigError(f"unknown column kind '{kind}' (expected {COLUMN_KINDS})")
        if sum(kind == "saliency" for kind in self.columns) > 1:
            raise ModelConfigError("at most one saliency column is allowed")
        if len(set(self.columns)) != len(self.columns):
            raise ModelConfigError(f"duplicate column kinds in {self.columns}")
        if self.num_classes < 1:
            raise ModelConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.fusion_dim < 1:
            raise ModelConfigError(f"fusion_dim must be >= 1, got {self.fusion_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


class SaliencyColumn(nn.Module):
    """Two 2x2 stride-2 max-pools, then a raw row-major flatten. No weights
    unless an optional linear projection is configured."""

    def __init__(self, projection_dim: int | None = None):
        super().__init__()
        self.projection = (
            nn.Linear(SALIENCY_FEATURE_DIM, projection_dim) if projection_dim else None
        )
        self.output_dim = projection_dim or SALIENCY_FEATURE_DIM

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-2:] != (SALIENCY_INPUT_SIZE, SALIENCY_INPUT_SIZE):
            raise ModelConfigError(
                f"saliency column expects (B, 1, {SALIENCY_INPUT_SIZE}, {SALIENCY_INPUT_SIZE}) "
                f"input, got {tuple(x.shape)}"
            )
        x = F.max_pool2d(x, kernel_size=2, stride=2)
        x = F.max_pool2d(x, kernel_size=2, stride=2)
        x = torch.flatten(x, start_dim=1)
        if self.projection is not None:
            x = self.projection(x)
        return x


class ToyBackbone(nn.Module):
    """Small seeded CNN for CPU-scale tests: 3 stages of [3x3 conv, ReLU,
    2x2 max-pool] at widths 8/16/32, then global average pooling."""

    feature_dim = 32

    def __init__(self, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(3, 8, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
                nn.Conv2d(8, 16, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
                nn.Conv2d(16, 32, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class TorchvisionBackbone(nn.Module):
    """Adapter over a torchvision classification network with the final
    fully-connected head removed; emits the globally-pooled feature vector."""

    def __init__(self, name: str, pretrained: bool):
        super().__init__()
        try:
            from torchvision import models as tv_models
        except ImportError as exc:
            raise ModelConfigError(
                f"backbone '{name}' requires torchvision, which is not installed"
            ) from exc
        weights = "DEFAULT" if pretrained else None
        if name == "densenet161":
            net = tv_models.densenet161(weights=weights)
            self.feature_dim = net.classifier.in_features
            self.features = net.features
            self._post_relu = True
        elif name == "resnet152":
            net = tv_models.resnet152(weights=weights)
            self.feature_dim = net.fc.in_features
            self.features = nn.Sequential(*list(net.children())[:-2])
            self._post_relu = False
        else:
            raise ModelConfigError(f"unknown torchvision backbone '{name}'")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        if self._post_relu:
            x = F.relu(x, inplace=True)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def build_backbone(backbone_id: str, pretrained: bool = False, seed: int = 0) -> tuple[nn.Module, int, bool]:
    """Instantiate a backbone by id; returns (module, feature_dim, pretrained)."""
    if backbone_id == "toy":
        return ToyBackbone(seed=seed), ToyBackbone.feature_dim, False
    if backbone_id in ("densenet161", "resnet152"):
        net = TorchvisionBackbone(backbone_id, pretrained)
        return net, net.feature_dim, pretrained
    raise ModelConfigError(f"unknown backbone_id '{backbone_id}'")


class FusionHead(nn.Module):
    """Concatenated column features -> fusion FC -> ReLU -> dropout -> classifier FC."""

    def __init__(self, input_dim: int, fusion_dim: int, num_classes: int, dropout_rate: float):
        super().__init__()
        self.fuse = nn.Linear(input_dim, fusion_dim)
        self.dropout = nn.Dropout(p=dropout_rate)
        self.classify = nn.Linear(fusion_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fuse(x))
        x = self.dropout(x)
        return self.classify(x)


class _RgbColumn(nn.Module):
    def __init__(self, backbone: nn.Module, output_dim: int):
        super().__init__()
        self.backbone = backbone
        self.output_dim = output_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ModelConfigError(f"rgb column expects (B, 3, H, W) input, got {tuple(x.shape)}")
        return self.backbone(x)


class StyleModel(nn.Module):
    """Columns in declared order feeding one fusion/classification head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        columns: dict[str, nn.Module] = {}
        backbone_pretrained = config.pretrained_backbone
        rgb_dim = None
        for kind in config.columns:
            if kind == "saliency":
                columns[kind] = SaliencyColumn(config.saliency_projection_dim)
            else:
                net, dim, pretrained = build_backbone(
                    config.backbone_id, config.pretrained_backbone, seed=config.init_seed
                )
                rgb_dim = dim
                backbone_pretrained = pretrained
                columns[kind] = _RgbColumn(net, dim)
        if rgb_dim is not None:
            if config.rgb_feature_dim is not None and config.rgb_feature_dim != rgb_dim:
                raise ModelConfigError(
                    f"backbone '{config.backbone_id}' reports feature dim {rgb_dim}, "
                    f"config says {config.rgb_feature_dim}"
                )
            config.rgb_feature_dim = rgb_dim
        self.columns = nn.ModuleDict(columns)
        self._backbone_is_pretrained = backbone_pretrained
        feature_width = sum(self.columns[kind].output_dim for kind in config.columns)
        with torch.random.fork_rng():
            torch.manual_seed(config.init_seed + 1)
            self.head = FusionHead(
                feature_width, config.fusion_dim, config.num_classes, config.dropout_rate
            )

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        feats = []
        for kind in self.config.columns:
            if kind not in inputs:
                raise ModelConfigError(f"missing input for column '{kind}'")
            feats.append(self.columns[kind](inputs[kind]))
        return self.head(torch.cat(feats, dim=1))

    def predict_proba(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        return F.softmax(self.forward(inputs), dim=1)


def build_model(config: ModelConfig) -> StyleModel:
    return StyleModel(config)


def cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean -log softmax(logits)[label]; stabilized by max-subtraction."""
    num_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"label index out of range for {num_classes} classes")
    return F.cross_entropy(logits, labels, weight=class_weights)


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_groups(model: StyleModel) -> dict[str, list[nn.Parameter]]:
    """Split parameters for grouped learning rates.

    `backbone` holds pretrained RGB backbone weights; `new_layers` holds the
    fusion head, the optional saliency projection, and any backbone trained
    from scratch. The pooling-only saliency column contributes nothing.
    """
    backbone: list[nn.Parameter] = []
    new_layers: list[nn.Parameter] = list(model.head.parameters())
    for kind in model.config.columns:
        column = model.columns[kind]
        if kind == "saliency":
            new_layers.extend(column.parameters())
        elif model._backbone_is_pretrained:
            backbone.extend(column.parameters())
        else:
            new_layers.extend(column.parameters())
    return {"backbone": backbone, "new_layers": new_layers}


def save_checkpoint(
    path: str | Path,
    model: StyleModel,
    taxonomy: StyleTaxonomy,
    step: int = 0,
    train_state: dict | None = None,
) -> None:
    """Versioned container: config echo, taxonomy, weights, step count."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "taxonomy": taxonomy.to_dict(),
        "state_dict": model.state_dict(),
        "step": step,
        "train_state": train_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


@dataclass
class LoadedCheckpoint:
    model: StyleModel
    taxonomy: StyleTaxonomy
    step: int
    train_state: dict | None = None


def load_checkpoint(
    path: str | Path, taxonomy: StyleTaxonomy | None = None
) -> LoadedCheckpoint:
    """Load and rebuild; verifies format version and taxonomy compatibility."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})"
        )
    config_payload = dict(payload["model_config"])
    config_payload["columns"] = tuple(config_payload["columns"])
    config = ModelConfig(**config_payload)
    stored_taxonomy = StyleTaxonomy.from_dict(payload["taxonomy"])
    if taxonomy is not None and (
        taxonomy.name != stored_taxonomy.name or taxonomy.classes != stored_taxonomy.classes
    ):
        raise CheckpointError(
            f"{path}: checkpoint taxonomy '{stored_taxonomy.name}' "
            f"({len(stored_taxonomy)} classes) does not match requested "
            f"'{taxonomy.name}' ({len(taxonomy)} classes)"
        )
    if config.num_classes != len(stored_taxonomy):
        raise CheckpointError(
            f"{path}: num_classes {config.num_classes} does not match taxonomy "
            f"size {len(stored_taxonomy)}"
        )
    model = build_model(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return LoadedCheckpoint(
        model=model,
        taxonomy=stored_taxonomy,
        step=int(payload.get("step", 0)),
        train_state=payload.get("train_state"),
    )
