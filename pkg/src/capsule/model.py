"""Backbones, fused classification head, head expansion and checkpoints."""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

logger = logging.getLogger(__name__)

ARCHITECTURES = ("resnet50", "vit_cnn_hybrid", "tiny_hybrid")
CHECKPOINT_FORMAT = "capsule-checkpoint"
CHECKPOINT_VERSION = 1

_DEFAULT_DIMS = {"resnet50": (2048, 0), "vit_cnn_hybrid": (512, 768), "tiny_hybrid": (64, 64)}
_DEFAULT_SIZE = {"resnet50": 224, "vit_cnn_hybrid": 224, "tiny_hybrid": 32}


@dataclass
class ModelSpec:
    architecture: str = "tiny_hybrid"
    num_classes: int = 2
    pretrained: bool = False
    input_size: int | None = None
    head: str = "linear"  # or "mlp"
    head_hidden: int = 128
    # tiny_hybrid knobs
    vit_patch: int = 4
    vit_depth: int = 2
    vit_heads: int = 4
    feature_dims: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unsupported architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.head not in ("linear", "mlp"):
            raise ValueError(f"head must be 'linear' or 'mlp', got {self.head!r}")
        if self.input_size is None:
            self.input_size = _DEFAULT_SIZE[self.architecture]
        if self.feature_dims is None:
            self.feature_dims = _DEFAULT_DIMS[self.architecture]
        self.feature_dims = tuple(self.feature_dims)
        if self.architecture != "tiny_hybrid" and self.feature_dims != _DEFAULT_DIMS[self.architecture]:
            raise ValueError(f"{self.architecture} has fixed feature dims {_DEFAULT_DIMS[self.architecture]}")
        if self.architecture == "tiny_hybrid" and self.input_size % self.vit_patch:
            raise ValueError("input_size must be a multiple of vit_patch")

    @property
    def head_in(self) -> int:
        return sum(self.feature_dims)


# ----------------------------------------------------------------------------
# branches


def _conv_block(cin: int, cout: int, pool: bool) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class TinyCNN(nn.Sequential):
    def __init__(self, width: int = 64):
        w = width
        super().__init__(_conv_block(3, w // 4, True), _conv_block(w // 4, w // 2, True), _conv_block(w // 2, w, False))


class TinyViT(nn.Module):
    """Patch embedding, learned positions, pre-norm encoder; returns the class token."""

    def __init__(self, image_size: int, patch: int, dim: int, depth: int, heads: int):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, dim, patch, stride=patch)
        n = (image_size // patch) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, n + 1, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim * 2, dropout=0.0, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        return self.norm(self.encoder(tokens))[:, 0]


def _torchvision(name: str, pretrained: bool) -> nn.Module:
    import torchvision

    factory = getattr(torchvision.models, name)
    if pretrained:
        try:
            return factory(weights="DEFAULT")
        except Exception as exc:  # offline, missing cache, ...
            logger.warning("pretrained weights for %s unavailable (%s); using random init", name, exc)
    return factory(weights=None)


def _resnet_trunk(name: str, pretrained: bool) -> nn.Sequential:
    r = _torchvision(name, pretrained)
    return nn.Sequential(r.conv1, r.bn1, r.relu, r.maxpool, r.layer1, r.layer2, r.layer3, r.layer4)


def _vit_b16(pretrained: bool) -> nn.Module:
    vit = _torchvision("vit_b_16", pretrained)
    vit.heads = nn.Identity()
    return vit


class Backbone(nn.Module):
    """CNN trunk (spatial map, globally pooled) plus an optional ViT branch."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        arch = spec.architecture
        if arch == "tiny_hybrid":
            cnn_dim, vit_dim = spec.feature_dims
            self.cnn = TinyCNN(cnn_dim)
            self.vit = TinyViT(spec.input_size, spec.vit_patch, vit_dim, spec.vit_depth, spec.vit_heads)
        elif arch == "vit_cnn_hybrid":
            self.cnn = _resnet_trunk("resnet34", spec.pretrained)
            self.vit = _vit_b16(spec.pretrained)
        else:
            self.cnn = _resnet_trunk("resnet50", spec.pretrained)
            self.vit = None
        self.input_size = spec.input_size

    @property
    def cam_layer(self) -> nn.Module:
        """Last convolutional block of the CNN branch."""
        return self.cnn[-1]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (self.input_size, self.input_size):
            raise ValueError(f"expected input (N, 3, {self.input_size}, {self.input_size}), got {tuple(x.shape)}")
        cnn = self.cnn(x).mean(dim=(2, 3))
        vit = self.vit(x) if self.vit is not None else None
        return cnn, vit


class ClassifierLinear(nn.Linear):
    """Linear layer whose outputs are independent row-wise reductions.

    A GEMM may pick a different kernel (and summation order) when the output
    width changes, which perturbs the last bits of every logit. Reducing each
    row separately keeps a class's logit bit-identical across head widths.
    """

    def forward(self, x):
        return (x.unsqueeze(-2) * self.weight).sum(-1) + self.bias


def _make_head(spec: ModelSpec, num_classes: int) -> nn.Module:
    if spec.head == "linear":
        return ClassifierLinear(spec.head_in, num_classes)
    return nn.Sequential(nn.Linear(spec.head_in, spec.head_hidden), nn.ReLU(), ClassifierLinear(spec.head_hidden, num_classes))


def final_linear(head: nn.Module) -> nn.Linear:
    return head if isinstance(head, nn.Linear) else head[-1]


class CapsuleNet(nn.Module):
    """Backbone + head; ``class_names`` names the head's outputs in order."""

    def __init__(self, spec: ModelSpec, class_names: Sequence[str] | None = None):
        super().__init__()
        if class_names is None:
            class_names = [f"class_{i}" for i in range(spec.num_classes)]
        class_names = list(class_names)
        if len(class_names) != spec.num_classes:
            raise ValueError("len(class_names) must equal spec.num_classes")
        self.spec = spec
        self.class_names = class_names
        self.backbone = Backbone(spec)
        self.head = _make_head(spec, spec.num_classes)

    def forward_features(self, x):
        return self.backbone(x)

    def fuse(self, cnn, vit):
        return cnn if vit is None else torch.cat([cnn, vit], dim=1)

    def forward(self, x):
        return self.head(self.fuse(*self.backbone(x)))


def build_model(spec: ModelSpec, class_names: Sequence[str] | None = None, seed: int | None = None) -> CapsuleNet:
    if seed is not None:
        torch.manual_seed(seed)
    return CapsuleNet(spec, class_names)


def forward_features(model: CapsuleNet, images: torch.Tensor):
    return model.forward_features(images)


def _init_rows(rows: int, fan_in: int, generator: torch.Generator, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    bound = 1.0 / math.sqrt(fan_in)
    w = (torch.rand(rows, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
    b = (torch.rand(rows, generator=generator, dtype=torch.float64) * 2 - 1) * bound
    return w.to(dtype), b.to(dtype)


def expand_head(model: CapsuleNet, new_class_names: Sequence[str], copy_overlap: bool = True, seed: int = 0) -> CapsuleNet:
    """New model with the same backbone and a head sized for ``new_class_names``.

    With ``copy_overlap`` the weight rows and biases of classes present in both
    label lists are copied, so their logits are unchanged. Other rows are drawn
    uniformly from +-1/sqrt(fan_in) with a generator seeded by ``seed``. An MLP
    head keeps its hidden layer.
    """
    new_class_names = list(new_class_names)
    if len(set(new_class_names)) != len(new_class_names):
        raise ValueError(f"duplicate class names in {new_class_names}")
    overlap = [c for c in new_class_names if c in model.class_names]
    if copy_overlap and not overlap:
        raise ValueError("copy_overlap requested but the old and new label lists share no class")

    new_spec = copy.copy(model.spec)
    new_spec.num_classes = len(new_class_names)
    out = copy.deepcopy(model)
    out.spec = new_spec
    out.class_names = new_class_names

    old_fc = final_linear(model.head)
    ref = old_fc.weight
    fc = ClassifierLinear(old_fc.in_features, len(new_class_names)).to(device=ref.device, dtype=ref.dtype)
    gen = torch.Generator().manual_seed(seed)
    w, b = _init_rows(len(new_class_names), old_fc.in_features, gen, ref.dtype)
    with torch.no_grad():
        fc.weight.copy_(w)
        fc.bias.copy_(b)
        if copy_overlap:
            for c in overlap:
                i, j = new_class_names.index(c), model.class_names.index(c)
                fc.weight[i].copy_(old_fc.weight[j])
                fc.bias[i].copy_(old_fc.bias[j])
    if isinstance(out.head, nn.Linear):
        out.head = fc
    else:
        out.head[-1] = fc
    return out


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CapsuleNet, path: str | os.PathLike, stage_index: int = 0, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "class_names": list(model.class_names),
        "stage_index": stage_index,
        "backbone": model.backbone.state_dict(),
        "head": model.head.state_dict(),
        **extra,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | os.PathLike, map_location="cpu") -> tuple[CapsuleNet, dict]:
    payload = torch.load(Path(path), map_location=map_location, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a capsule checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    spec_doc = dict(payload["spec"])
    spec_doc["pretrained"] = False  # weights come from the checkpoint
    spec = ModelSpec(**spec_doc)
    model = CapsuleNet(spec, payload["class_names"])
    model.backbone.load_state_dict(payload["backbone"])
    model.head.load_state_dict(payload["head"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k not in ("backbone", "head")}
    return model, meta
