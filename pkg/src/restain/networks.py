"""The three networks: conditional generator, dual-head patch critic, frozen extractor.

The generator translates an image to a target domain given a spatially
broadcast one-hot label; the discriminator scores realism with an unbounded
patch map and classifies the domain with an auxiliary head; the feature
extractor is a frozen convolutional network whose activations define the
perceptual distance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import (
    CheckpointMismatchError,
    ConfigurationError,
    ImageTensor,
    InputError,
    DomainLabel,
    RangeTag,
    RunConfig,
    onehot_spatial_batch,
    rescale,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    base_width: int = 64
    num_res_blocks: int = 6
    downsample_steps: int = 2

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "GeneratorSpec":
        return cls(base_width=cfg.g_base_width, num_res_blocks=cfg.g_num_res_blocks)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_width: int = 64
    num_layers: int = 6
    leaky_slope: float = 0.01

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "DiscriminatorSpec":
        return cls(base_width=cfg.d_base_width, num_layers=cfg.discriminator_layers())


@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: str = "fixed_random_convnet"
    widths: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (1, 2, 2)
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "FeatureExtractorSpec":
        return cls(kind=cfg.feature_extractor, widths=cfg.c_widths,
                   strides=cfg.c_strides, seed=cfg.seed)


def _norm(ch: int, affine: bool = True) -> nn.InstanceNorm2d:
    # per-sample per-channel statistics, eps pinned for reproducibility
    return nn.InstanceNorm2d(ch, eps=1e-5, affine=affine, track_running_stats=False)


class ResidualBlock(nn.Module):
    """Two 3x3 convs at constant width; the second norm carries no affine."""

    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            _norm(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            _norm(ch, affine=False),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Label-conditioned image translator, tanh-bounded, shape preserving.

    Layout: 7x7 stem conv, two stride-2 4x4 convs doubling width, a stack of
    residual blocks at constant width, two stride-2 transposed convs halving
    width, and a 7x7 conv to 3 channels followed by tanh.  The target label
    enters as K extra constant input planes.
    """

    def __init__(self, spec: GeneratorSpec, num_domains: int):
        super().__init__()
        self.spec = spec
        self.num_domains = num_domains
        w = spec.base_width

        layers: list[nn.Module] = [
            nn.Conv2d(3 + num_domains, w, 7, 1, 3, bias=False),
            _norm(w), nn.ReLU(inplace=True),
        ]
        ch = w
        for _ in range(spec.downsample_steps):
            layers += [nn.Conv2d(ch, ch * 2, 4, 2, 1, bias=False),
                       _norm(ch * 2), nn.ReLU(inplace=True)]
            ch *= 2
        for _ in range(spec.num_res_blocks):
            layers.append(ResidualBlock(ch))
        for _ in range(spec.downsample_steps):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False),
                       _norm(ch // 2), nn.ReLU(inplace=True)]
            ch //= 2
        layers += [nn.Conv2d(ch, 3, 7, 1, 3), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, target_index: torch.Tensor) -> torch.Tensor:
        """Translate batch ``x`` (unit-signed, BCHW) toward ``target_index`` (B,)."""
        b, _, h, w = x.shape
        if h % 4 or w % 4:
            raise InputError(f"spatial dims must be divisible by 4, got {h}x{w}")
        if target_index.shape != (b,):
            raise InputError(
                f"target index shape {tuple(target_index.shape)} does not match batch {b}"
            )
        planes = onehot_spatial_batch(target_index, self.num_domains, h, w).to(x.dtype)
        return self.model(torch.cat([x, planes], dim=1))


class Discriminator(nn.Module):
    """Patch critic with two heads and no normalization layers.

    Body: stride-2 4x4 convs with leaky ReLU, width doubling each layer.
    Source head: 3x3 conv to a 1-channel unbounded score map at 1/2^depth
    resolution.  Domain head: 3x3 conv to K channels, globally average-pooled
    into per-domain logits (softmax is applied inside the classification loss).
    """

    def __init__(self, spec: DiscriminatorSpec, num_domains: int):
        super().__init__()
        self.spec = spec
        self.num_domains = num_domains
        layers: list[nn.Module] = [
            nn.Conv2d(3, spec.base_width, 4, 2, 1),
            nn.LeakyReLU(spec.leaky_slope),
        ]
        ch = spec.base_width
        for _ in range(spec.num_layers - 1):
            layers += [nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.LeakyReLU(spec.leaky_slope)]
            ch *= 2
        self.body = nn.Sequential(*layers)
        self.source_head = nn.Conv2d(ch, 1, 3, 1, 1)
        self.domain_head = nn.Conv2d(ch, num_domains, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(x)
        source_map = self.source_head(h)
        domain_logits = self.domain_head(h).mean(dim=(2, 3))
        return source_map, domain_logits


class FixedRandomConvNet(nn.Module):
    """Frozen convolutional stack with seeded random weights.

    Random frozen features define a valid perceptual metric without any
    external pretrained weights.  ReLU sits between layers but not after the
    last conv: the tap point is the raw activation map of the final layer.
    """

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        gen = torch.Generator().manual_seed(spec.seed)
        layers: list[nn.Module] = []
        ch = 3
        for i, (width, stride) in enumerate(zip(spec.widths, spec.strides)):
            if i:
                layers.append(nn.ReLU(inplace=True))
            conv = nn.Conv2d(ch, width, 3, stride, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            layers.append(conv)
            ch = width
        self.features = nn.Sequential(*layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def train(self, mode: bool = True):  # frozen: ignore train() calls
        return super().train(False)


class PretrainedResidualExtractor(nn.Module):
    """34-layer residual classifier tap for full-scale runs.

    Input is unit-signed; the module internally maps to the normalization the
    classifier was trained with and returns the last convolutional stage's
    activations.  Requires torchvision weights to be available locally.
    """

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import ResNet34_Weights, resnet34
            net = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1)
        except Exception as exc:  # pragma: no cover - needs downloaded weights
            raise ConfigurationError(
                "pretrained 34-layer residual extractor unavailable: "
                f"{exc}"
            ) from exc
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.Sequential(net.layer1, net.layer2, net.layer3, net.layer4)
        mean = torch.tensor(self.MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self.STD).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x01 = (x + 1.0) / 2.0
        return self.stages(self.stem((x01 - self.mean) / self.std))

    def train(self, mode: bool = True):  # pragma: no cover
        return super().train(False)


def build_generator(cfg: RunConfig) -> Generator:
    g = Generator(GeneratorSpec.from_config(cfg), cfg.num_domains)
    init_weights(g)
    return g


def build_discriminator(cfg: RunConfig) -> Discriminator:
    d = Discriminator(DiscriminatorSpec.from_config(cfg), cfg.num_domains)
    init_weights(d)
    return d


def build_feature_extractor(cfg: RunConfig) -> nn.Module:
    spec = FeatureExtractorSpec.from_config(cfg)
    if spec.kind == "fixed_random_convnet":
        return FixedRandomConvNet(spec)
    if spec.kind == "pretrained_residual_34":
        return PretrainedResidualExtractor()
    raise ConfigurationError(f"unknown feature extractor kind: {spec.kind!r}")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Conv weights from N(0, std); norm scale 1, shift 0; biases zero."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# --- typed wrappers over the raw modules -----------------------------------

def generator_forward(g: Generator, x: ImageTensor, y_trg: DomainLabel | list[DomainLabel]) -> ImageTensor:
    """Translate an image batch toward target domain(s), unit-signed in and out."""
    if x.range_tag != RangeTag.UNIT_SIGNED:
        raise InputError("generator input must be in the unit_signed range")
    labels = [y_trg] * x.batch_size if isinstance(y_trg, DomainLabel) else list(y_trg)
    if len(labels) != x.batch_size:
        raise InputError(f"got {len(labels)} labels for batch of {x.batch_size}")
    for lab in labels:
        if lab.num_domains != g.num_domains:
            raise InputError("label num_domains does not match the generator")
    idx = torch.tensor([lab.index for lab in labels], dtype=torch.long)
    return ImageTensor(g(x.data, idx), RangeTag.UNIT_SIGNED)


def discriminator_forward(d: Discriminator, x: ImageTensor) -> tuple[torch.Tensor, torch.Tensor]:
    if x.range_tag != RangeTag.UNIT_SIGNED:
        raise InputError("discriminator input must be in the unit_signed range")
    return d(x.data)


def extract_features(c: nn.Module, x: ImageTensor) -> torch.Tensor:
    """Tap activations of the frozen extractor; gradients flow into x only."""
    if x.range_tag != RangeTag.UNIT_SIGNED:
        raise InputError("extractor input must be in the unit_signed range")
    return c(x.data)


def arrays_to_unit_signed(arrays: list) -> torch.Tensor:
    """Stack uint8 (H, W, 3) images into a unit-signed BCHW float batch."""
    import numpy as np

    stack = np.stack([np.asarray(a, dtype=np.float32) for a in arrays])
    batch = torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous()
    return rescale(batch, RangeTag.BYTE, RangeTag.UNIT_SIGNED)


def unit_signed_to_arrays(batch: torch.Tensor) -> list:
    """Inverse of :func:`arrays_to_unit_signed`: BCHW floats to uint8 (H, W, 3)."""
    byte = rescale(batch.detach(), RangeTag.UNIT_SIGNED, RangeTag.BYTE)
    hwc = byte.permute(0, 2, 3, 1).cpu().numpy()
    return [img.astype("uint8") for img in hwc]


def translate_arrays(g: Generator, arrays: list, target_index: int,
                     batch_size: int = 16) -> list:
    """Translate uint8 images toward one target domain (inference only)."""
    if not 0 <= target_index < g.num_domains:
        raise InputError(f"target domain {target_index} outside [0, {g.num_domains})")
    was_training = g.training
    g.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            chunk = arrays[start:start + batch_size]
            x = arrays_to_unit_signed(chunk)
            idx = torch.full((len(chunk),), target_index, dtype=torch.long)
            out.extend(unit_signed_to_arrays(g(x, idx)))
    if was_training:
        g.train()
    return out


def parameter_checksum(module: nn.Module) -> str:
    """Order-stable md5 over all parameter and buffer values."""
    h = hashlib.md5()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- checkpoint archive ------------------------------------------------------

def save_checkpoint(path: str | Path, *, cfg: RunConfig, epoch: int,
                    generator: Generator, discriminator: Discriminator,
                    extractor: nn.Module, global_step: int = 0,
                    g_updates: int = 0,
                    optim_g: torch.optim.Optimizer | None = None,
                    optim_d: torch.optim.Optimizer | None = None,
                    rng_state: dict | None = None) -> Path:
    """Write one archive with all parameter arrays keyed by hierarchical names."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "epoch": epoch,
        "global_step": global_step,
        "g_updates": g_updates,
        "generator": generator.state_dict(),
        "discriminator": discriminator.state_dict(),
        "extractor": extractor.state_dict(),
    }
    if optim_g is not None:
        payload["optim_g"] = optim_g.state_dict()
    if optim_d is not None:
        payload["optim_d"] = optim_d.state_dict()
    if rng_state is not None:
        payload["rng_state"] = json.dumps(rng_state)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expect_cfg: RunConfig | None = None) -> dict:
    """Load a checkpoint archive; verify compatibility when a config is given.

    A mismatch in domain count or network scaling between ``expect_cfg`` and
    the stored config raises :class:`CheckpointMismatchError`.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointMismatchError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"checkpoint format version {version!r} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    stored = RunConfig.from_dict(payload["config"])
    if expect_cfg is not None:
        mismatched = [
            name for name in ("num_domains", "g_base_width", "g_num_res_blocks",
                              "d_base_width", "patch_size")
            if getattr(stored, name) != getattr(expect_cfg, name)
        ]
        if mismatched:
            detail = ", ".join(
                f"{n}: checkpoint={getattr(stored, n)} requested={getattr(expect_cfg, n)}"
                for n in mismatched
            )
            raise CheckpointMismatchError(f"incompatible checkpoint ({detail})")
    payload["config_obj"] = stored
    return payload


def restore_networks(payload: dict) -> tuple[Generator, Discriminator, nn.Module, RunConfig]:
    """Rebuild the three networks from a loaded checkpoint payload."""
    cfg = payload["config_obj"]
    g = build_generator(cfg)
    d = build_discriminator(cfg)
    c = build_feature_extractor(cfg)
    g.load_state_dict(payload["generator"])
    d.load_state_dict(payload["discriminator"])
    c.load_state_dict(payload["extractor"])
    g.eval()
    d.eval()
    return g, d, c, cfg
