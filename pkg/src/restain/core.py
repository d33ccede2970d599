"""Shared domain types, value-range conventions and run configuration.

Images move through the pipeline as 4-axis tensors (batch, channel, height,
width) tagged with the value range they live in.  All network compute happens
in the signed unit range [-1, 1] (the generator output is tanh-bounded); the
byte range [0, 255] appears only at I/O boundaries.
"""

from __future__ import annotations

import dataclasses
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path

import torch


class RestainError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(RestainError):
    """Invalid configuration value or unusable component setup."""


class InputError(RestainError):
    """Operation input violates its contract (shape, range, label index)."""


class ManifestError(RestainError):
    """Dataset manifest is malformed or cannot be built as requested."""


class CheckpointMismatchError(RestainError):
    """Checkpoint is incompatible with the requested configuration."""


class NonFiniteLossError(RestainError):
    """A training loss became NaN/inf; the run is aborted with diagnostics."""


class RangeTag(str, enum.Enum):
    """Declared value range of an image tensor."""

    UNIT_SIGNED = "unit_signed"  # [-1, 1]
    UNIT = "unit"                # [0, 1]
    BYTE = "byte"                # [0, 255]


RANGE_BOUNDS = {
    RangeTag.UNIT_SIGNED: (-1.0, 1.0),
    RangeTag.UNIT: (0.0, 1.0),
    RangeTag.BYTE: (0.0, 255.0),
}


def rescale(data: torch.Tensor, src: RangeTag, dst: RangeTag) -> torch.Tensor:
    """Affinely map ``data`` from range ``src`` to range ``dst``.

    When the destination is the byte range the result is rounded
    half-away-from-zero and clamped to [0, 255] so that the byte encoding is
    deterministic; all other conversions are pure affine maps.  The
    byte -> unit_signed -> byte round trip is the identity.
    """
    for tag in (src, dst):
        if not isinstance(tag, RangeTag):
            raise ConfigurationError(f"unknown range tag: {tag!r}")
    if src == dst:
        return data
    s_lo, s_hi = RANGE_BOUNDS[src]
    d_lo, d_hi = RANGE_BOUNDS[dst]
    scale = (d_hi - d_lo) / (s_hi - s_lo)
    out = (data - s_lo) * scale + d_lo
    if dst == RangeTag.BYTE:
        # round half away from zero; values are non-negative after the shift
        out = torch.clamp(torch.floor(out + 0.5), 0.0, 255.0)
    return out


@dataclass(frozen=True)
class ImageTensor:
    """A batch of images: real tensor (batch, channel, height, width) plus range tag."""

    data: torch.Tensor
    range_tag: RangeTag = RangeTag.UNIT_SIGNED

    def __post_init__(self):
        d = self.data
        if d.ndim != 4:
            raise InputError(f"image tensor must have 4 axes, got shape {tuple(d.shape)}")
        if d.shape[1] not in (1, 3):
            raise InputError(f"channel count must be 1 or 3, got {d.shape[1]}")
        h, w = d.shape[2], d.shape[3]
        if h < 16 or w < 16 or h % 4 or w % 4:
            raise InputError(
                f"height/width must be >= 16 and divisible by 4, got {h}x{w}"
            )
        if not isinstance(self.range_tag, RangeTag):
            raise ConfigurationError(f"unknown range tag: {self.range_tag!r}")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def validate_range(self) -> None:
        """Assert every element lies within the declared range."""
        lo, hi = RANGE_BOUNDS[self.range_tag]
        dmin, dmax = self.data.min().item(), self.data.max().item()
        if dmin < lo or dmax > hi:
            raise InputError(
                f"values [{dmin:.6g}, {dmax:.6g}] outside declared "
                f"'{self.range_tag.value}' range [{lo}, {hi}]"
            )


def convert_range(img: ImageTensor, target_tag: RangeTag) -> ImageTensor:
    """Rescale an image batch to ``target_tag`` (see :func:`rescale`)."""
    if img.range_tag == target_tag:
        return img
    return ImageTensor(rescale(img.data, img.range_tag, target_tag), target_tag)


@dataclass(frozen=True)
class DomainLabel:
    """Integer domain index with one-hot encoding over ``num_domains`` classes."""

    index: int
    num_domains: int

    def __post_init__(self):
        if self.num_domains < 1:
            raise InputError(f"num_domains must be >= 1, got {self.num_domains}")
        if not 0 <= self.index < self.num_domains:
            raise InputError(
                f"domain index {self.index} outside [0, {self.num_domains})"
            )

    def onehot(self) -> torch.Tensor:
        v = torch.zeros(self.num_domains)
        v[self.index] = 1.0
        return v


def onehot_spatial(label: DomainLabel, h: int, w: int) -> torch.Tensor:
    """Broadcast a domain label to a (K, h, w) stack of constant planes.

    Plane ``label.index`` is all ones, every other plane all zeros.  This is
    the conditioning input concatenated depth-wise with the generator input.
    """
    if h <= 0 or w <= 0:
        raise InputError(f"spatial dims must be positive, got {h}x{w}")
    planes = torch.zeros(label.num_domains, h, w)
    planes[label.index] = 1.0
    return planes


def onehot_spatial_batch(indices: torch.Tensor, num_domains: int, h: int, w: int) -> torch.Tensor:
    """Vectorized :func:`onehot_spatial` for a batch of label indices."""
    if indices.ndim != 1:
        raise InputError("label indices must be a 1-D tensor")
    if int(indices.min()) < 0 or int(indices.max()) >= num_domains:
        raise InputError("label index outside [0, num_domains)")
    eye = torch.eye(num_domains, dtype=torch.float32)
    return eye[indices].view(len(indices), num_domains, 1, 1).expand(-1, -1, h, w).contiguous()


@dataclass(frozen=True)
class LossToggles:
    """Which generator/discriminator loss terms are active (ablation rows)."""

    adv: bool = True
    cyc: bool = True
    cls: bool = True
    perc: bool = True

    def __post_init__(self):
        if not self.adv:
            raise ConfigurationError("the adversarial term is the baseline and cannot be disabled")

    def tag(self) -> str:
        parts = ["adv"]
        if self.cyc:
            parts.append("cyc")
        if self.cls:
            parts.append("cls")
        if self.perc:
            parts.append("perc")
        return "_".join(parts) if len(parts) < 4 else "full"


@dataclass(frozen=True)
class RunConfig:
    """Every training/evaluation constant, defaulting to the published recipe.

    Width/depth fields scale the networks down for desk-scale runs; the
    defaults correspond to full 256x256 training.
    """

    num_domains: int = 3
    patch_size: int = 256
    batch_size: int = 16
    base_lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_gp: float = 10.0
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_perc: float = 0.75
    critic_ratio: int = 5
    epochs: int = 80
    lr_decay_interval_epochs: int = 10
    lr_decay_factor: float = 0.5
    seed: int = 0
    loss_toggles: LossToggles = field(default_factory=LossToggles)
    # network scaling
    g_base_width: int = 64
    g_num_res_blocks: int = 6
    d_base_width: int = 64
    d_num_layers: int = 0  # 0 -> derived: log2(patch_size) - 2
    feature_extractor: str = "fixed_random_convnet"
    c_widths: tuple[int, ...] = (16, 32, 32)
    c_strides: tuple[int, ...] = (1, 2, 2)
    # data pipeline
    train_count: int = 1250
    test_count: int = 200
    label_sampling: str = "uniform"  # or "permute"

    def __post_init__(self):
        if self.num_domains < 2:
            raise ConfigurationError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.patch_size < 16 or self.patch_size % 4:
            raise ConfigurationError("patch_size must be >= 16 and divisible by 4")
        for name in ("lambda_gp", "lambda_cls", "lambda_cyc", "lambda_perc"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.critic_ratio < 1:
            raise ConfigurationError("critic_ratio must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_decay_interval_epochs < 1 or self.lr_decay_factor <= 0:
            raise ConfigurationError("invalid learning-rate decay settings")
        if self.feature_extractor not in ("fixed_random_convnet", "pretrained_residual_34"):
            raise ConfigurationError(f"unknown feature extractor: {self.feature_extractor!r}")
        if self.label_sampling not in ("uniform", "permute"):
            raise ConfigurationError(f"unknown label sampling mode: {self.label_sampling!r}")
        if len(self.c_widths) != len(self.c_strides) or not self.c_widths:
            raise ConfigurationError("c_widths and c_strides must be non-empty and equal length")
        if self.g_num_res_blocks < 0 or self.g_base_width < 1 or self.d_base_width < 1:
            raise ConfigurationError("network width/depth settings must be positive")

    def discriminator_layers(self) -> int:
        """Depth rule: the patch score map is 4x4 at any configured size."""
        if self.d_num_layers:
            return self.d_num_layers
        n = (self.patch_size // 4).bit_length() - 1  # log2(patch_size) - 2
        return max(n, 1)

    def lr_at_epoch(self, epoch: int) -> float:
        """Step decay: base_lr * factor ** floor(epoch / interval)."""
        return self.base_lr * self.lr_decay_factor ** (epoch // self.lr_decay_interval_epochs)

    # --- flat key/value serialization -------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        toggles = d.pop("loss_toggles")
        for k, v in toggles.items():
            d[f"loss_{k}"] = v
        d["c_widths"] = ",".join(str(x) for x in self.c_widths)
        d["c_strides"] = ",".join(str(x) for x in self.c_strides)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        toggles = {}
        for k in ("adv", "cyc", "cls", "perc"):
            key = f"loss_{k}"
            if key in raw:
                toggles[k] = _as_bool(raw.pop(key))
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in fields:
                raise ConfigurationError(f"unknown config key: {key!r}")
            kwargs[key] = _coerce(value, fields[key].type)
        if toggles:
            kwargs["loss_toggles"] = LossToggles(**toggles)
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(format_config(self.to_dict()))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(parse_config(Path(path).read_text()))


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"cannot parse boolean from {v!r}")


def _coerce(value, annotation: str):
    """Coerce a config-file string to the dataclass field's type."""
    ann = str(annotation)
    if "tuple" in ann:
        if isinstance(value, (tuple, list)):
            return tuple(int(x) for x in value)
        return tuple(int(x) for x in str(value).split(",") if str(x).strip())
    if ann == "bool":
        return _as_bool(value)
    if ann == "int":
        return int(value)
    if ann == "float":
        return float(value)
    return str(value)


def format_config(d: dict) -> str:
    """Render a flat mapping as ``key = value`` lines (stable order)."""
    buf = io.StringIO()
    for key in sorted(d):
        v = d[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        buf.write(f"{key} = {v}\n")
    return buf.getvalue()


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class LossBundle:
    """Named scalar loss terms plus the composite objectives for one step.

    ``adv_d`` holds the two critic expectation terms (real minus fake);
    the gradient penalty is kept separate in ``gp`` so the logged adversarial
    value and the optimized composite can both be reconstructed.
    """

    adv_d: float
    adv_g: float
    gp: float
    cls_real: float
    cls_fake: float
    cyc: float
    perc: float
    total_d: float
    total_g: float

    def __post_init__(self):
        for name in ("gp", "cls_real", "cls_fake", "cyc", "perc"):
            v = getattr(self, name)
            if v < 0:
                raise InputError(f"{name} must be non-negative, got {v}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)
