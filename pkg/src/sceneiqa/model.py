"""Neural components: backbone feature extraction, scene classification over
concatenated crop features, hypernetwork-conditioned quality head, and the
full image forward pass that feeds the scene-weighted aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import core
from .core import ClassProbVector, QualityPrediction, SceneAffineTable, SceneRegistry, TopKPolicy
from .data import PatchConfig, sample_patches

CHECKPOINT_TAG = "sceneiqa-ckpt-v1"

BACKBONES = ("toy_cnn", "resnet50_pretrained")
HYPER_HEADS = ("hypernetwork", "linear_probe")


class NumericError(RuntimeError):
    """Non-finite value produced inside the network; message names the layer."""


@dataclass
class ModelConfig:
    num_scenes: int
    backbone: str = "toy_cnn"
    input_size: int = 224
    patches_per_image: int = 5
    top_k: int = 5
    hyper_head: str = "hypernetwork"
    semantic_dim: int = 64        # toy backbone only; resnet50 declares 2048
    target_hidden: int = 16
    full_vector: bool = False     # weight over all scenes (k = s)
    backbone_weights: Optional[str] = None  # state-dict path for resnet50

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone}")
        if self.hyper_head not in HYPER_HEADS:
            raise ValueError(f"unknown hyper_head {self.hyper_head}")
        if self.input_size % 224 != 0:
            raise ValueError("input_size must be a multiple of 224")
        if self.num_scenes < 1:
            raise ValueError("num_scenes must be >= 1")

    def policy(self) -> TopKPolicy:
        return TopKPolicy(self.num_scenes if self.full_vector else self.top_k)


@dataclass
class FeatureBundle:
    """Pooled deep features for one patch."""

    semantic_vector: torch.Tensor   # (D_s,)
    content_vector: torch.Tensor    # (D_c,) multi-scale pooled content features


class ToyBackbone(nn.Module):
    """Small conv stack for desk-scale runs; adaptive pooling makes it size-agnostic.

    The conv stack runs on a per-patch mean-subtracted input so the quality
    pathway reacts to local structure (sharpness) rather than base color; the
    subtracted mean color is appended to the semantic pathway instead, where
    the scene classifier can use it.
    """

    def __init__(self, semantic_dim=64):
        super().__init__()
        self.stages = nn.ModuleList()
        chans = [3, 8, 16, 32, 64]
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.stages.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
            ))
        self.semantic_fc = nn.Linear(chans[-1] + 3, semantic_dim)
        self.semantic_dim = semantic_dim
        self.content_dim = chans[-2] + chans[-1]

    def forward(self, x):
        mu = x.mean(dim=(2, 3))
        x = x - mu[:, :, None, None]
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        pooled_last = F.adaptive_avg_pool2d(maps[-1], 1).flatten(1)
        semantic = self.semantic_fc(torch.cat([pooled_last, mu], dim=1))
        # std pooling: local energy, not mean activation
        content = torch.cat(
            [m.flatten(2).std(dim=2, unbiased=False) for m in maps[-2:]], dim=1
        )
        return semantic, content


class ResNet50Backbone(nn.Module):
    """ResNet50 feature extractor; pretrained weights are an opaque optional input."""

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if weights_path:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4
        self.semantic_dim = 2048
        self.content_dim = 512 + 1024 + 2048

    def forward(self, x):
        x = self.stem(x)
        c1 = self.layer1(x)
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        semantic = F.adaptive_avg_pool2d(c4, 1).flatten(1)
        content = torch.cat(
            [F.adaptive_avg_pool2d(m, 1).flatten(1) for m in (c2, c3, c4)], dim=1
        )
        return semantic, content


class SceneClassifier(nn.Module):
    """MLP over the concatenation of all patch semantic vectors, in patch order."""

    def __init__(self, semantic_dim, patches_per_image, num_scenes):
        super().__init__()
        in_dim = semantic_dim * patches_per_image
        hidden = min(2 * in_dim, 1024)
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, num_scenes),
        )

    def forward(self, semantics):  # (B, patches, D_s)
        return self.net(semantics.flatten(1))


class HyperQualityHead(nn.Module):
    """Semantic vector generates the weights of a small target MLP on content features.

    Weight generators carry no bias, so a zero semantic vector yields an
    all-zero target network whose output is just the generated bias path.
    """

    def __init__(self, semantic_dim, content_dim, hidden=16):
        super().__init__()
        self.hidden = hidden
        self.content_dim = content_dim
        self.w1_gen = nn.Linear(semantic_dim, hidden * content_dim, bias=False)
        self.b1_gen = nn.Linear(semantic_dim, hidden)
        self.w2_gen = nn.Linear(semantic_dim, hidden, bias=False)
        self.b2_gen = nn.Linear(semantic_dim, 1)
        # keep generated weights small at init for stable early training
        with torch.no_grad():
            self.w1_gen.weight.mul_(0.1)
            self.w2_gen.weight.mul_(0.1)

    def forward(self, semantic, content):  # (B, D_s), (B, D_c)
        b = semantic.shape[0]
        w1 = self.w1_gen(semantic).view(b, self.hidden, self.content_dim)
        b1 = self.b1_gen(semantic)
        h = F.relu(torch.bmm(w1, content.unsqueeze(-1)).squeeze(-1) + b1)
        w2 = self.w2_gen(semantic)
        b2 = self.b2_gen(semantic)
        return (w2 * h).sum(dim=1, keepdim=True) + b2


class LinearProbeHead(nn.Module):
    """Fixed-parameter fallback head; no hypernetwork capacity involved."""

    def __init__(self, semantic_dim, content_dim, hidden=16):
        super().__init__()
        self.fc = nn.Linear(content_dim, 1)

    def forward(self, semantic, content):
        return self.fc(content)


class SceneQualityModel(nn.Module):
    """Full model: backbone + scene classifier + quality head + rescaling layer.

    The rescaling layer is a learned per-scene (a, b) table, equivalent to a
    linear map applied to one-hot scene encodings.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone == "toy_cnn":
            self.backbone = ToyBackbone(config.semantic_dim)
        else:
            self.backbone = ResNet50Backbone(config.backbone_weights)
        self.classifier = SceneClassifier(
            self.backbone.semantic_dim, config.patches_per_image, config.num_scenes
        )
        head_cls = HyperQualityHead if config.hyper_head == "hypernetwork" else LinearProbeHead
        self.quality_head = head_cls(
            self.backbone.semantic_dim, self.backbone.content_dim, config.target_hidden
        )
        self.scale_a = nn.Parameter(torch.ones(config.num_scenes))
        self.scale_b = nn.Parameter(torch.zeros(config.num_scenes))

    def affine_table(self) -> SceneAffineTable:
        return SceneAffineTable(
            tuple(self.scale_a.detach().tolist()), tuple(self.scale_b.detach().tolist())
        )

    def head_parameters(self):
        """Everything except the backbone: classifier, quality head, rescaling."""
        yield from self.classifier.parameters()
        yield from self.quality_head.parameters()
        yield self.scale_a
        yield self.scale_b

    def forward(self, patches):
        """patches: (B, patches_per_image, 3, H, W) ->
        (patch_scores (B, p), class_logits (B, s), pre_quality (B,))."""
        b, p = patches.shape[:2]
        if p != self.config.patches_per_image:
            raise ValueError(
                f"expected {self.config.patches_per_image} patches per image, got {p}"
            )
        flat = patches.flatten(0, 1)
        semantic, content = self.backbone(flat)
        scores = self.quality_head(semantic, content).view(b, p)
        if not torch.isfinite(scores).all():
            raise NumericError("non-finite value in quality head output")
        logits = self.classifier(semantic.view(b, p, -1))
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite value in classifier logits")
        return scores, logits, scores.mean(dim=1)

    def aggregate(self, pre_quality, probs):
        """Differentiable top-k weighted rescaling, batched.

        pre_quality: (B,), probs: (B, s). Stable descending sort keeps the
        lower scene index first among tied weights.
        """
        k = min(self.config.policy().k, self.config.num_scenes)
        sorted_w, idx = torch.sort(probs, dim=1, descending=True, stable=True)
        top_w = sorted_w[:, :k]
        top_idx = idx[:, :k]
        a = self.scale_a[top_idx]
        b = self.scale_b[top_idx]
        rescaled = a * pre_quality.unsqueeze(1) + b
        return (top_w * rescaled).sum(dim=1) / top_w.sum(dim=1)


def patch_to_tensor(patch: np.ndarray) -> torch.Tensor:
    """uint8 HWC -> float CHW in [-0.5, 0.5]."""
    t = torch.from_numpy(np.ascontiguousarray(patch)).float() / 255.0 - 0.5
    return t.permute(2, 0, 1)


def extract_features(patch: torch.Tensor, model: SceneQualityModel) -> FeatureBundle:
    """Feature bundle for a single patch tensor (3, H, W)."""
    size = model.config.input_size
    if patch.shape[-2:] != (size, size):
        raise ValueError(f"expected {size}x{size} patch, got {tuple(patch.shape[-2:])}")
    model.eval()
    with torch.no_grad():
        semantic, content = model.backbone(patch.unsqueeze(0))
    return FeatureBundle(semantic_vector=semantic[0], content_vector=content[0])


def classify_scene(bundles, model: SceneQualityModel) -> ClassProbVector:
    """Softmax scene-membership weights from one image's patch bundles."""
    if len(bundles) != model.config.patches_per_image:
        raise ValueError(
            f"expected {model.config.patches_per_image} bundles, got {len(bundles)}"
        )
    model.eval()
    with torch.no_grad():
        sem = torch.stack([b.semantic_vector for b in bundles]).unsqueeze(0)
        probs = F.softmax(model.classifier(sem), dim=1)[0]
    return ClassProbVector(tuple(probs.tolist()))


def predict_pre_quality(bundle: FeatureBundle, model: SceneQualityModel) -> float:
    """Single-patch raw quality score."""
    model.eval()
    with torch.no_grad():
        out = model.quality_head(
            bundle.semantic_vector.unsqueeze(0), bundle.content_vector.unsqueeze(0)
        )
    if not torch.isfinite(out).all():
        raise NumericError("non-finite value in quality head output")
    return float(out.item())


def forward_image(
    image: np.ndarray,
    model: SceneQualityModel,
    patch_config: PatchConfig,
    roi=None,
    image_key: str = "",
) -> QualityPrediction:
    """Sample patches, score each, pool, classify, and aggregate over scenes."""
    patches = sample_patches(image, patch_config, roi=roi, image_key=image_key)
    batch = torch.stack([patch_to_tensor(p) for p in patches]).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        scores, logits, pre_q = model(batch)
        probs = F.softmax(logits, dim=1)[0]
    probs_v = ClassProbVector(tuple(probs.tolist()))
    return core.aggregate_image_from_patches(
        [float(s) for s in scores[0]], probs_v, model.affine_table(), model.config.policy()
    )


def build_model(config: ModelConfig, seed: int = 0) -> SceneQualityModel:
    """Seeded construction so two builds share identical initial weights."""
    torch.manual_seed(seed)
    return SceneQualityModel(config)


def save_checkpoint(path, model: SceneQualityModel, registry: SceneRegistry,
                    epoch: int = 0, extra: Optional[dict] = None):
    torch.save({
        "format": CHECKPOINT_TAG,
        "model_config": vars(model.config),
        "state_dict": model.state_dict(),
        "scene_ids": list(registry.scene_ids),
        "epoch": epoch,
        "extra": extra or {},
    }, path)


def load_checkpoint(path):
    """Returns (model, registry, epoch, extra). Raises on unknown format tags."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_TAG:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format')!r}")
    config = ModelConfig(**blob["model_config"])
    model = SceneQualityModel(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    registry = SceneRegistry(tuple(blob["scene_ids"]))
    return model, registry, blob["epoch"], blob["extra"]
