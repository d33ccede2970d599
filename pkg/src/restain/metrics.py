"""Image quality metrics and the pair-set evaluation report.

All metrics operate on single images in the byte range [0, 255] as float
arrays, grayscale (H, W) or color (3, H, W) / (H, W, 3).  Structural metrics
reduce color to the BT.601 luma channel; the Haar-wavelet index additionally
uses two chroma channels.  Results are plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .core import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0
PSNR_CAP_DB = 100.0

# canonical five-scale exponents for the multi-scale structural index
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

HAARPSI_C = 30.0
HAARPSI_ALPHA = 4.2

# BT.601 luma weights, declared once for every grayscale reduction
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _to_chw(img: np.ndarray) -> np.ndarray:
    """Canonicalize (H, W), (H, W, C) or (C, H, W) input to float (C, H, W)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim != 3:
        raise InputError(f"expected 2- or 3-axis image, got shape {a.shape}")
    if a.shape[0] in (1, 3) and a.shape[2] not in (1, 3):
        return a
    if a.shape[2] in (1, 3):
        return np.moveaxis(a, 2, 0)
    if a.shape[0] in (1, 3):
        return a
    raise InputError(f"cannot infer channel axis for shape {a.shape}")


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")


def to_gray(img: np.ndarray) -> np.ndarray:
    """Reduce to the luma channel (BT.601); pass grayscale through."""
    chw = _to_chw(img)
    if chw.shape[0] == 1:
        return chw[0]
    r, g, b = chw
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB over all channels and pixels.

    Identical inputs have infinite PSNR; the value is capped at ``cap_db`` so
    aggregates stay finite (applies identically to both argument orders).
    """
    x, y = _to_chw(a), _to_chw(b)
    _check_same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return cap_db
    return min(10.0 * math.log10(DATA_RANGE ** 2 / mse), cap_db)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Unit-sum isotropic Gaussian weighting window."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_moments(x: np.ndarray, y: np.ndarray, window: np.ndarray):
    """Weighted local means/variances/covariance over valid window positions."""
    corr = lambda img: signal.correlate2d(img, window, mode="valid")
    mu_x = corr(x)
    mu_y = corr(y)
    var_x = corr(x * x) - mu_x ** 2
    var_y = corr(y * y) - mu_y ** 2
    cov = corr(x * y) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity on the luma channel.

    11x11 Gaussian window (sigma 1.5), stabilizers C1=(K1*L)^2, C2=(K2*L)^2
    with K1=0.01, K2=0.03, L=255.  Result lies in [-1, 1]; identical inputs
    give exactly 1.
    """
    x, y = to_gray(a), to_gray(b)
    _check_same_shape(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise InputError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_x, mu_y, var_x, var_y, cov = _window_moments(x, y, gaussian_window())
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    return float(np.mean(lum * cs))


def _downsample2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling, odd trailing row/column dropped."""
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]) / 4.0


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale structural similarity with the canonical 5-scale exponents.

    Scales are dyadic via 2x2 average pooling.  Inputs too small for five
    scales use as many scales as fit the 11x11 window, with the leading
    exponents renormalized to sum to one.  Contrast-structure and luminance
    factors are floored at zero before exponentiation.
    """
    x, y = to_gray(a), to_gray(b)
    _check_same_shape(x, y)
    n_scales = 0
    size = min(x.shape)
    while n_scales < len(MS_SSIM_WEIGHTS) and size >= SSIM_WINDOW:
        n_scales += 1
        size //= 2
    if n_scales == 0:
        raise InputError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    weights = np.asarray(MS_SSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()

    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    window = gaussian_window()
    value = 1.0
    for j in range(n_scales):
        mu_x, mu_y, var_x, var_y, cov = _window_moments(x, y, window)
        cs = float(np.mean((2 * cov + c2) / (var_x + var_y + c2)))
        cs = max(cs, 0.0)
        if j == n_scales - 1:
            lum = float(np.mean((2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)))
            value *= max(lum, 0.0) ** weights[j] * cs ** weights[j]
        else:
            value *= cs ** weights[j]
            x, y = _downsample2(x), _downsample2(y)
    return float(value)


# --- Haar wavelet perceptual similarity --------------------------------------

def _conv2_same(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D convolution with centered 'same' alignment for even kernels."""
    rot = np.rot90(signal.convolve2d(np.rot90(image, 2), np.rot90(kernel, 2),
                                     mode="same"), 2)
    return rot


def _haar_filter(scale: int) -> np.ndarray:
    """Square Haar response filter of side 2**scale (top half negated)."""
    side = 2 ** scale
    f = np.ones((side, side)) / float(side)
    f[: side // 2, :] *= -1.0
    return f


def _rgb_to_yiq(chw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = chw
    y = 0.299 * r + 0.587 * g + 0.114 * b
    i = 0.596 * r - 0.274 * g - 0.322 * b
    q = 0.211 * r - 0.523 * g + 0.312 * b
    return y, i, q


def _subsample2(x: np.ndarray) -> np.ndarray:
    return _conv2_same(x, np.ones((2, 2)) / 4.0)[::2, ::2]


def _logistic(x: np.ndarray, alpha: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-alpha * x))


def haarpsi(a: np.ndarray, b: np.ndarray) -> float:
    """Haar wavelet-based perceptual similarity in [0, 1].

    Construction: luma plus two chroma channels for color input, a 2x
    mean-pool preprocessing step, three dyadic Haar scales per orientation;
    local similarities of the two finest scales through the stabilized ratio
    (2*g1*g2 + C) / (g1^2 + g2^2 + C); weight maps from the third-scale
    coefficient magnitudes; logistic squashing (alpha) inside the weighted
    average and the inverse logistic, squared, outside.  C=30, alpha=4.2.
    """
    x, y = _to_chw(a), _to_chw(b)
    _check_same_shape(x, y)
    if min(x.shape[1:]) < 8:
        raise InputError(f"image {x.shape} too small; needs min dimension >= 8")
    is_color = x.shape[0] == 3
    if is_color:
        x_y, x_i, x_q = _rgb_to_yiq(x)
        y_y, y_i, y_q = _rgb_to_yiq(y)
    else:
        x_y, y_y = x[0], y[0]

    x_y, y_y = _subsample2(x_y), _subsample2(y_y)
    if is_color:
        x_i, y_i = _subsample2(x_i), _subsample2(y_i)
        x_q, y_q = _subsample2(x_q), _subsample2(y_q)

    n_scales = 3
    coeffs_x = [[_conv2_same(x_y, _haar_filter(s + 1)) for s in range(n_scales)],
                [_conv2_same(x_y, _haar_filter(s + 1).T) for s in range(n_scales)]]
    coeffs_y = [[_conv2_same(y_y, _haar_filter(s + 1)) for s in range(n_scales)],
                [_conv2_same(y_y, _haar_filter(s + 1).T) for s in range(n_scales)]]

    c = HAARPSI_C
    sims = []
    weights = []
    for orientation in range(2):
        w = np.maximum(np.abs(coeffs_x[orientation][2]), np.abs(coeffs_y[orientation][2]))
        sim = np.zeros_like(w)
        for s in range(2):
            gx = np.abs(coeffs_x[orientation][s])
            gy = np.abs(coeffs_y[orientation][s])
            sim += (2 * gx * gy + c) / (gx ** 2 + gy ** 2 + c)
        sims.append(sim / 2.0)
        weights.append(w)

    if is_color:
        mean2 = np.ones((2, 2)) / 4.0
        cx_i = np.abs(_conv2_same(x_i, mean2))
        cy_i = np.abs(_conv2_same(y_i, mean2))
        cx_q = np.abs(_conv2_same(x_q, mean2))
        cy_q = np.abs(_conv2_same(y_q, mean2))
        sim_i = (2 * cx_i * cy_i + c) / (cx_i ** 2 + cy_i ** 2 + c)
        sim_q = (2 * cx_q * cy_q + c) / (cx_q ** 2 + cy_q ** 2 + c)
        sims.append((sim_i + sim_q) / 2.0)
        weights.append((weights[0] + weights[1]) / 2.0)

    sims = np.stack(sims)
    weights = np.stack(weights)
    alpha = HAARPSI_ALPHA
    score = float(np.sum(_logistic(sims, alpha) * weights) / np.sum(weights))
    return float((np.log(score / (1.0 - score)) / alpha) ** 2)


# --- CIELAB mean color difference ---------------------------------------------

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65_WHITE = (0.95047, 1.0, 1.08883)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB bytes to CIELAB under the D65 white point, output (3, H, W)."""
    chw = _to_chw(img)
    if chw.shape[0] != 3:
        raise InputError("CIELAB conversion requires a 3-channel image")
    s = chw / 255.0
    lin = np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,jhw->ihw", _SRGB_TO_XYZ, lin)
    t = xyz / np.asarray(_D65_WHITE)[:, None, None]
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)
    fx, fy, fz = f
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
    return lab


def _lab_normalized(img: np.ndarray) -> np.ndarray:
    lab = rgb_to_lab(img)
    scale = np.stack([lab[0] / 100.0, (lab[1] + 128.0) / 255.0, (lab[2] + 128.0) / 255.0])
    return scale


def mean_color_difference(input_img: np.ndarray, output_img: np.ndarray,
                          target_img: np.ndarray) -> float:
    """Change in mean CIELAB pixel distance to the target, output vs input.

    Channels are rescaled to unit range before the Euclidean distance
    (L/100, (a+128)/255, (b+128)/255).  Negative values mean the output sits
    closer to the target than the input did; output == input gives exactly 0.
    """
    li = _lab_normalized(input_img)
    lo = _lab_normalized(output_img)
    lt = _lab_normalized(target_img)
    if not (li.shape == lo.shape == lt.shape):
        raise InputError("input, output and target must share one shape")
    d_out = np.sqrt(((lo - lt) ** 2).sum(axis=0)).mean()
    d_in = np.sqrt(((li - lt) ** 2).sum(axis=0)).mean()
    return float(d_out - d_in)


# --- pair-set evaluation -------------------------------------------------------

REPORT_COLUMNS = ("pair_id", "psnr", "ssim", "ms_ssim", "haarpsi")


@dataclass(frozen=True)
class PairMetrics:
    pair_id: str
    psnr: float
    ssim: float
    ms_ssim: float
    haarpsi: float
    mcd: float | None = None


@dataclass
class MetricReport:
    """Per-pair metric rows plus arithmetic-mean aggregates."""

    rows: list[PairMetrics] = field(default_factory=list)

    @property
    def has_mcd(self) -> bool:
        return any(r.mcd is not None for r in self.rows)

    def aggregates(self) -> dict[str, float]:
        if not self.rows:
            return {}
        out = {}
        for name in ("psnr", "ssim", "ms_ssim", "haarpsi"):
            out[name] = float(np.mean([getattr(r, name) for r in self.rows]))
        mcds = [r.mcd for r in self.rows if r.mcd is not None]
        if mcds:
            out["mcd"] = float(np.mean(mcds))
        return out

    def to_table(self, sep: str = "\t") -> str:
        """Delimited text: documented header, one row per pair, mean footer."""
        cols = list(REPORT_COLUMNS) + (["mcd"] if self.has_mcd else [])
        lines = [sep.join(cols)]
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        for r in self.rows:
            vals = [r.pair_id, fmt(r.psnr), fmt(r.ssim), fmt(r.ms_ssim), fmt(r.haarpsi)]
            if self.has_mcd:
                vals.append(fmt(r.mcd))
            lines.append(sep.join(vals))
        agg = self.aggregates()
        footer = ["mean"] + [fmt(agg.get(c)) for c in cols[1:]]
        lines.append(sep.join(footer))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_table())
        return path


def compute_pair(a: np.ndarray, b: np.ndarray, pair_id: str,
                 target: np.ndarray | None = None) -> PairMetrics:
    """All metrics between one image pair; the color-difference term needs a target."""
    mcd = None if target is None else mean_color_difference(a, b, target)
    return PairMetrics(pair_id=pair_id, psnr=psnr(a, b), ssim=ssim(a, b),
                       ms_ssim=ms_ssim(a, b), haarpsi=haarpsi(a, b), mcd=mcd)


def evaluate_pair_set(checkpoint, manifest, pairs=None, split: str = "test",
                      batch_size: int = 16, max_per_pair: int | None = None,
                      target_lookup=None) -> MetricReport:
    """Translate test patches for each source->target pair and score them.

    Metrics compare each real patch against its own translation into the
    target domain.  ``checkpoint`` may be a path, a loaded archive payload or
    a ``(generator, config)`` tuple.  ``pairs`` defaults to all ordered domain
    pairs with distinct source and target.  ``target_lookup(record,
    target_domain)`` may supply a pixel-aligned target image to enable the
    color-difference column.
    """
    from . import networks

    if isinstance(checkpoint, tuple):
        generator, cfg = checkpoint
    else:
        payload = checkpoint if isinstance(checkpoint, dict) \
            else networks.load_checkpoint(checkpoint)
        generator, _, _, cfg = networks.restore_networks(payload)

    if pairs is None:
        pairs = [(s, t) for s in range(manifest.num_domains)
                 for t in range(manifest.num_domains) if s != t]

    report = MetricReport()
    for src, tgt in pairs:
        records = manifest.records_for(src, split)
        if max_per_pair is not None:
            records = records[:max_per_pair]
        images = [manifest.load_patch(r) for r in records]
        translations = networks.translate_arrays(generator, images, tgt,
                                                 batch_size=batch_size)
        src_name = manifest.domain_names[src]
        tgt_name = manifest.domain_names[tgt]
        for rec, real, fake in zip(records, images, translations):
            pair_id = f"{src_name}->{tgt_name}/{rec.source_image_id}_{rec.row}_{rec.col}"
            target = target_lookup(rec, tgt) if target_lookup is not None else None
            report.rows.append(compute_pair(real, fake, pair_id, target=target))
    return report
