"""Data pipeline: tiling, per-domain manifests, and a synthetic multi-domain corpus.

Large source images are split into non-overlapping fixed-size patches;
per-domain inventories with disjoint train/test splits are stored in a
human-readable manifest.  For desk-scale verification a synthetic generator
produces blob textures restyled by invertible per-domain color transforms,
one style class per domain, with no structural pairing across domains.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ManifestError, RunConfig

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# Textures stay inside this band so the inverse gamma stays well conditioned
# and byte quantization survives the transform round trip within one step.
TEXTURE_LO, TEXTURE_HI = 0.08, 0.92


@dataclass(frozen=True)
class PatchRecord:
    """One fixed-size patch cut from a source image."""

    source_image_id: str
    row: int
    col: int
    domain: int
    split: str = "train"
    path: str | None = None
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def key(self) -> tuple:
        return (self.domain, self.source_image_id, self.row, self.col)

    def to_dict(self) -> dict:
        return {
            "source_image_id": self.source_image_id,
            "row": self.row,
            "col": self.col,
            "domain": self.domain,
            "split": self.split,
            "path": self.path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchRecord":
        return cls(source_image_id=d["source_image_id"], row=d["row"], col=d["col"],
                   domain=d["domain"], split=d["split"], path=d.get("path"))


@dataclass
class DatasetManifest:
    """Per-domain patch inventories with train/test splits."""

    num_domains: int
    patch_size: int
    seed: int
    domain_names: list[str]
    records: list[PatchRecord]
    provenance: dict = field(default_factory=dict)
    root: Path | None = None

    def validate(self) -> None:
        if len(self.domain_names) != self.num_domains:
            raise ManifestError("domain name count does not match num_domains")
        seen: dict[tuple, str] = {}
        for rec in self.records:
            if not 0 <= rec.domain < self.num_domains:
                raise ManifestError(f"record domain {rec.domain} outside [0, {self.num_domains})")
            if rec.split not in ("train", "test"):
                raise ManifestError(f"unknown split {rec.split!r}")
            prev = seen.get(rec.key())
            if prev is not None and prev != rec.split:
                raise ManifestError(f"patch {rec.key()} appears in both splits")
            seen[rec.key()] = rec.split

    def records_for(self, domain: int, split: str | None = None) -> list[PatchRecord]:
        return [r for r in self.records
                if r.domain == domain and (split is None or r.split == split)]

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for d, name in enumerate(self.domain_names):
            recs = self.records_for(d)
            out[name] = {
                "train": sum(r.split == "train" for r in recs),
                "test": sum(r.split == "test" for r in recs),
            }
        return out

    def load_patch(self, rec: PatchRecord) -> np.ndarray:
        """Decode a record to uint8 (H, W, 3)."""
        if rec.pixels is not None:
            return rec.pixels
        if rec.path is None:
            raise ManifestError(f"record {rec.key()} has neither pixels nor a path")
        base = self.root if self.root is not None else Path(".")
        return load_image(base / rec.path)

    def save(self, path: str | Path) -> Path:
        """Write the manifest as deterministic, human-readable JSON."""
        path = Path(path)
        payload = {
            "num_domains": self.num_domains,
            "patch_size": self.patch_size,
            "seed": self.seed,
            "domain_names": self.domain_names,
            "provenance": self.provenance,
            "counts": self.counts(),
            "records": [r.to_dict() for r in self.records],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        manifest = cls(
            num_domains=payload["num_domains"],
            patch_size=payload["patch_size"],
            seed=payload["seed"],
            domain_names=payload["domain_names"],
            records=[PatchRecord.from_dict(d) for d in payload["records"]],
            provenance=payload.get("provenance", {}),
            root=path.parent,
        )
        manifest.validate()
        return manifest


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)


def tile_image(image: np.ndarray, source_image_id: str, patch_size: int,
               stride: int | None = None, domain: int = 0) -> list[PatchRecord]:
    """Cut an image into a grid of lossless patch crops.

    Yields floor(H/stride-ish) x floor(W/...) records; partial edge tiles are
    discarded rather than padded.  An image smaller than the patch size
    produces an empty list with a warning.
    """
    stride = patch_size if stride is None else stride
    h, w = image.shape[:2]
    if h < patch_size or w < patch_size:
        warnings.warn(
            f"image {source_image_id!r} is {h}x{w}, smaller than patch size "
            f"{patch_size}; no patches produced",
            stacklevel=2,
        )
        return []
    records = []
    for r, y in enumerate(range(0, h - patch_size + 1, stride)):
        for c, x in enumerate(range(0, w - patch_size + 1, stride)):
            crop = np.ascontiguousarray(image[y:y + patch_size, x:x + patch_size])
            records.append(PatchRecord(source_image_id=source_image_id, row=r, col=c,
                                       domain=domain, pixels=crop))
    return records


def mean_saturation(pixels: np.ndarray) -> float:
    """Mean HSV-style saturation; near-white background patches score low."""
    x = pixels.astype(np.float64) / 255.0
    mx = x.max(axis=2)
    mn = x.min(axis=2)
    sat = np.where(mx > 0, (mx - mn) / np.maximum(mx, 1e-12), 0.0)
    return float(sat.mean())


def build_manifest(domain_dirs: list[str | Path], out_dir: str | Path, cfg: RunConfig,
                   rng: np.random.Generator | None = None,
                   min_mean_saturation: float | None = None) -> DatasetManifest:
    """Tile every image per domain directory and sample train/test inventories.

    Sampling is without replacement to ``cfg.train_count``/``cfg.test_count``
    per domain; a domain with too few candidate patches raises a count error
    naming it.  Patches are stored one PNG per record under
    ``<domain>/<source>_<row>_<col>.png`` and the manifest is written beside
    them.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain_names = [Path(d).name for d in domain_dirs]
    records: list[PatchRecord] = []
    for domain, directory in enumerate(domain_dirs):
        directory = Path(directory)
        files = sorted(p for p in directory.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise ManifestError(f"domain directory {directory} holds no images")
        candidates: list[PatchRecord] = []
        for f in files:
            tiles = tile_image(load_image(f), f.stem, cfg.patch_size, domain=domain)
            if min_mean_saturation is not None:
                tiles = [t for t in tiles if mean_saturation(t.pixels) >= min_mean_saturation]
            candidates.extend(tiles)
        wanted = cfg.train_count + cfg.test_count
        if len(candidates) < wanted:
            raise ManifestError(
                f"domain {domain_names[domain]!r} yields {len(candidates)} patches, "
                f"need {wanted} ({cfg.train_count} train + {cfg.test_count} test)"
            )
        chosen = rng.choice(len(candidates), size=wanted, replace=False)
        for j, idx in enumerate(chosen):
            rec = candidates[int(idx)]
            split = "train" if j < cfg.train_count else "test"
            rel = Path(domain_names[domain]) / f"{rec.source_image_id}_{rec.row}_{rec.col}.png"
            save_image(out_dir / rel, rec.pixels)
            records.append(replace(rec, split=split, path=str(rel), pixels=None))
    manifest = DatasetManifest(
        num_domains=len(domain_dirs), patch_size=cfg.patch_size, seed=cfg.seed,
        domain_names=domain_names, records=records,
        provenance={"source_dirs": [str(d) for d in domain_dirs]},
        root=out_dir,
    )
    manifest.validate()
    manifest.save(out_dir / "manifest.json")
    return manifest


# --- synthetic corpus --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Invertible color restyling: per-channel gamma, channel mixing, tint.

    ``matrix`` rows are non-negative and sum to at most one so that outputs
    of [0, 1] inputs stay in [0, 1] after adding ``tint``; the matrix is
    well conditioned, making every domain an information-preserving restyle.
    """

    matrix: tuple[tuple[float, float, float], ...]
    gamma: tuple[float, float, float]
    tint: tuple[float, float, float]
    texture_seed: int = 0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ManifestError("channel-mixing matrix must be 3x3")
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond >= 1e3:
            raise ManifestError(f"channel-mixing matrix badly conditioned (cond={cond:.3g})")

    @classmethod
    def identity(cls, texture_seed: int = 0) -> "SyntheticDomainSpec":
        return cls(matrix=((1, 0, 0), (0, 1, 0), (0, 0, 1)),
                   gamma=(1.0, 1.0, 1.0), tint=(0.0, 0.0, 0.0),
                   texture_seed=texture_seed)

    @classmethod
    def sample(cls, rng: np.random.Generator, texture_seed: int = 0) -> "SyntheticDomainSpec":
        """Draw a distinct, invertible restyling.

        Diagonally dominant row-stochastic mixing scaled by a gain < 1 leaves
        headroom for the tint; gamma stays close to one so the inverse map is
        Lipschitz-bounded on the texture band.
        """
        gamma = tuple(rng.uniform(0.90, 1.12, size=3))
        gain = rng.uniform(0.85, 0.93)
        diag = rng.uniform(0.78, 0.90, size=3)
        m = np.zeros((3, 3))
        for i in range(3):
            off = rng.dirichlet((1.0, 1.0)) * (1.0 - diag[i])
            cols = [j for j in range(3) if j != i]
            m[i, i] = diag[i]
            m[i, cols[0]], m[i, cols[1]] = off
        m *= gain
        tint = rng.uniform(0.3, 1.0, size=3) * (1.0 - gain)
        return cls(matrix=tuple(map(tuple, m)), gamma=tuple(gamma),
                   tint=tuple(tint), texture_seed=texture_seed)

    def apply(self, img01: np.ndarray) -> np.ndarray:
        """Forward restyle of a float image in [0, 1], shape (H, W, 3)."""
        g = np.asarray(self.gamma)
        y = np.power(np.clip(img01, 0.0, 1.0), g)
        y = y @ np.asarray(self.matrix).T
        return y + np.asarray(self.tint)

    def invert(self, img01: np.ndarray) -> np.ndarray:
        """Numerical inverse of :meth:`apply` (matrix solve, then root)."""
        y = img01 - np.asarray(self.tint)
        inv = np.linalg.inv(np.asarray(self.matrix))
        y = y @ inv.T
        y = np.clip(y, 0.0, 1.0)
        return np.power(y, 1.0 / np.asarray(self.gamma))


def generate_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Blob texture: elliptical cell-like shapes on a low-frequency background.

    Returns float (size, size, 3) clipped to the texture band.  Blob count and
    radii scale with area relative to a 64x64 tile (8-20 blobs, radii 3-12 px
    at that size).
    """
    # smooth background around a light warm base color
    cells = max(size // 16, 2)
    base_color = np.array([0.78, 0.62, 0.72]) + rng.uniform(-0.06, 0.06, size=3)
    noise = rng.standard_normal((cells + 1, cells + 1, 3)) * 0.05
    zoom = (size / (cells + 1), size / (cells + 1), 1)
    bg = ndimage.zoom(noise, zoom, order=1)[:size, :size, :]
    img = base_color[None, None, :] + bg

    area_scale = (size / 64.0) ** 2
    n_blobs = int(round(rng.integers(8, 21) * area_scale))
    n_blobs = max(n_blobs, 1)
    r_lo, r_hi = 3.0 * size / 64.0, 12.0 * size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob_base = np.array([0.42, 0.26, 0.55])
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, size=2)
        ry = rng.uniform(r_lo, r_hi)
        rx = rng.uniform(r_lo, r_hi)
        theta = rng.uniform(0, np.pi)
        color = blob_base + rng.uniform(-0.10, 0.10, size=3)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        d = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        # ~1 px soft edge so structure survives resampling and similarity windows
        alpha = np.clip((1.0 - d) * min(rx, ry), 0.0, 1.0)[:, :, None]
        img = img * (1.0 - alpha) + color[None, None, :] * alpha
    return np.clip(img, TEXTURE_LO, TEXTURE_HI)


def quantize_to_byte(img01: np.ndarray) -> np.ndarray:
    """Round half away from zero and clamp, matching the range conventions."""
    return np.clip(np.floor(img01 * 255.0 + 0.5), 0, 255).astype(np.uint8)


def default_domain_transforms(num_domains: int, seed: int,
                              identity_first: bool = True) -> list[SyntheticDomainSpec]:
    """One restyling per domain; domain 0 defaults to the identity transform."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))
    specs = []
    for d in range(num_domains):
        if d == 0 and identity_first:
            specs.append(SyntheticDomainSpec.identity())
        else:
            specs.append(SyntheticDomainSpec.sample(rng))
    return specs


def synthesize_domain(out_dir: str | Path, n_images: int, patch_size: int,
                      texture_seed: int, transform: SyntheticDomainSpec,
                      name_prefix: str = "img") -> list[Path]:
    """Write ``n_images`` restyled textures (one patch each) into a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(texture_seed).spawn(n_images)
    paths = []
    for i, child in enumerate(seeds):
        texture = generate_texture(np.random.default_rng(child), patch_size)
        pixels = quantize_to_byte(transform.apply(texture))
        p = out_dir / f"{name_prefix}_{i:05d}.png"
        save_image(p, pixels)
        paths.append(p)
    return paths


def generate_synthetic_corpus(num_domains: int, n_per_domain: int, out_dir: str | Path,
                              patch_size: int = 64, test_fraction: float = 0.2,
                              seed: int = 0,
                              transforms: list[SyntheticDomainSpec] | None = None
                              ) -> DatasetManifest:
    """Build an unpaired multi-domain corpus of restyled blob textures.

    Texture seeds are disjoint across domains (no structural pairing), the
    style transform is constant within a domain, and each domain is split
    into train/test inventories.  Returns the saved manifest.
    """
    if num_domains < 2:
        raise ManifestError(f"need at least 2 domains, got {num_domains}")
    if not 0.0 <= test_fraction < 1.0:
        raise ManifestError("test_fraction must lie in [0, 1)")
    out_dir = Path(out_dir)
    if transforms is None:
        transforms = default_domain_transforms(num_domains, seed)
    if len(transforms) != num_domains:
        raise ManifestError("one transform per domain required")

    n_test = int(round(n_per_domain * test_fraction))
    n_train = n_per_domain - n_test
    records: list[PatchRecord] = []
    domain_names = [f"domain_{d}" for d in range(num_domains)]
    for d in range(num_domains):
        # disjoint texture seed stream per domain -> unpaired by construction
        texture_seed_entropy = np.random.SeedSequence([seed, 1 + d]).entropy
        domain_seed = int(np.random.default_rng(texture_seed_entropy).integers(2 ** 31))
        paths = synthesize_domain(out_dir / domain_names[d], n_per_domain, patch_size,
                                  texture_seed=domain_seed, transform=transforms[d],
                                  name_prefix=f"d{d}")
        for i, p in enumerate(paths):
            records.append(PatchRecord(
                source_image_id=p.stem, row=0, col=0, domain=d,
                split="train" if i < n_train else "test",
                path=str(p.relative_to(out_dir)),
            ))
    manifest = DatasetManifest(
        num_domains=num_domains, patch_size=patch_size, seed=seed,
        domain_names=domain_names, records=records,
        provenance={"kind": "synthetic", "n_per_domain": str(n_per_domain)},
        root=out_dir,
    )
    manifest.validate()
    manifest.save(out_dir / "manifest.json")
    return manifest


def generate_unseen_domain(out_dir: str | Path, n_images: int, patch_size: int,
                           seed: int = 0,
                           transform: SyntheticDomainSpec | None = None) -> Path:
    """Synthesize a style class never shown in training, for generalization tests."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFE]))
    if transform is None:
        transform = SyntheticDomainSpec.sample(rng)
    unseen_seed = int(rng.integers(2 ** 31))
    out_dir = Path(out_dir)
    synthesize_domain(out_dir, n_images, patch_size, texture_seed=unseen_seed,
                      transform=transform, name_prefix="unseen")
    return out_dir


@dataclass
class UnseenEvaluationSet:
    """Patches from a domain outside the trained label set (forward-only)."""

    name: str
    root: Path
    records: list[PatchRecord]

    def load_patch(self, rec: PatchRecord) -> np.ndarray:
        if rec.pixels is not None:
            return rec.pixels
        return load_image(self.root / rec.path)


def holdout_unseen_domain(manifest: DatasetManifest,
                          extra_domain_dir: str | Path) -> UnseenEvaluationSet:
    """Tile an extra domain directory at the manifest's patch size.

    The returned records carry domain index -1: they can be translated toward
    any trained domain but are never a translation target themselves.
    """
    extra_domain_dir = Path(extra_domain_dir)
    files = sorted(p for p in extra_domain_dir.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise ManifestError(f"unseen domain directory {extra_domain_dir} holds no images")
    records: list[PatchRecord] = []
    for f in files:
        for rec in tile_image(load_image(f), f.stem, manifest.patch_size, domain=0):
            records.append(replace(rec, domain=-1, split="test"))
    return UnseenEvaluationSet(name=extra_domain_dir.name, root=extra_domain_dir,
                               records=records)
