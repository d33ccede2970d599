"""All training losses as pure functions from network outputs to scalars.

The critic terms follow the Wasserstein formulation with a gradient penalty
on interpolated samples; domain classification is softmax cross-entropy on
the discriminator's auxiliary head; reconstruction is an L1 cycle term; the
perceptual distance is a weighted per-channel mean-squared difference of
frozen feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import InputError, LossBundle, RunConfig


@dataclass(frozen=True)
class InterpolatedSample:
    """A convex mixture of real and fake batches with per-sample coefficients."""

    x_hat: torch.Tensor
    eps: torch.Tensor  # shape (batch,), each in [0, 1]


def interpolate_samples(x_real: torch.Tensor, x_fake: torch.Tensor,
                        eps: torch.Tensor | None = None,
                        rng: np.random.Generator | None = None) -> InterpolatedSample:
    """Mix real and fake per sample: eps*real + (1-eps)*fake, eps ~ U[0,1]."""
    if x_real.shape != x_fake.shape:
        raise InputError(
            f"shape mismatch: {tuple(x_real.shape)} vs {tuple(x_fake.shape)}"
        )
    b = x_real.shape[0]
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = torch.as_tensor(rng.uniform(size=b), dtype=x_real.dtype)
    eps = eps.to(x_real.dtype)
    mix = eps.view(b, *([1] * (x_real.ndim - 1)))
    x_hat = mix * x_real + (1.0 - mix) * x_fake
    return InterpolatedSample(x_hat=x_hat, eps=eps)


def adversarial_terms(d_real_scores: torch.Tensor,
                      d_fake_scores: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean-reduced critic terms.

    Returns ``(adv_critic, adv_gen)`` where ``adv_critic`` is mean(real) -
    mean(fake) and ``adv_gen`` is -mean(fake), the only term whose gradient
    reaches the generator (the real-score expectation is constant there).
    """
    adv_critic = d_real_scores.mean() - d_fake_scores.mean()
    adv_gen = -d_fake_scores.mean()
    return adv_critic, adv_gen


def _critic_scores(critic: Callable, x: torch.Tensor) -> torch.Tensor:
    out = critic(x)
    if isinstance(out, tuple):
        out = out[0]
    # per-sample score: mean over all non-batch elements of the source map
    return out.reshape(out.shape[0], -1).mean(dim=1)


def gradient_penalty(critic: Callable, x_real: torch.Tensor, x_fake: torch.Tensor,
                     eps: torch.Tensor | None = None,
                     rng: np.random.Generator | None = None) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from one.

    The gradient is taken with respect to the interpolated sample, per sample,
    with a flat L2 norm over all of its elements.  The penalty coefficient is
    applied by the caller inside the discriminator objective.
    """
    sample = interpolate_samples(x_real.detach(), x_fake.detach(), eps=eps, rng=rng)
    x_hat = sample.x_hat.requires_grad_(True)
    scores = _critic_scores(critic, x_hat)
    grads, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grads.reshape(grads.shape[0], -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def _class_nll(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.ndim != 2:
        raise InputError(f"logits must be (batch, K), got shape {tuple(logits.shape)}")
    labels = labels.long()
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InputError(
            f"label index outside [0, {logits.shape[1]}): {labels.tolist()}"
        )
    return F.cross_entropy(logits, labels)


def domain_classification_real(domain_logits: torch.Tensor,
                               y_org: torch.Tensor) -> torch.Tensor:
    """Mean NLL of the original domain under softmax(logits); trains the critic."""
    return _class_nll(domain_logits, y_org)


def domain_classification_fake(domain_logits_of_fake: torch.Tensor,
                               y_trg: torch.Tensor) -> torch.Tensor:
    """Same contract on translated images against the target domain.

    Gradients should reach the generator only: step the generator's optimizer
    and drop the critic gradients this term produces.
    """
    return _class_nll(domain_logits_of_fake, y_trg)


def cycle_reconstruction(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and its round-trip translation."""
    if x.shape != x_rec.shape:
        raise InputError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def perceptual_distance(feat_x: torch.Tensor, feat_y: torch.Tensor,
                        map_weights: Sequence[float] | None = None) -> torch.Tensor:
    """Weighted sum of per-feature-map mean squared differences.

    Each channel of the tap layer is one feature map.  With the default
    uniform weights (1/C each) the result equals the global mean squared
    difference.
    """
    if feat_x.shape != feat_y.shape:
        raise InputError(
            f"feature shape mismatch: {tuple(feat_x.shape)} vs {tuple(feat_y.shape)}"
        )
    diff2 = (feat_x - feat_y) ** 2
    per_map = diff2.mean(dim=(0, 2, 3)) if diff2.ndim == 4 else diff2.mean()
    if diff2.ndim != 4:
        return per_map
    c = per_map.shape[0]
    if map_weights is None:
        weights = torch.full((c,), 1.0 / c, dtype=per_map.dtype)
    else:
        if len(map_weights) != c:
            raise InputError(f"expected {c} map weights, got {len(map_weights)}")
        weights = torch.as_tensor(list(map_weights), dtype=per_map.dtype)
    return (weights * per_map).sum()


def discriminator_objective(*, adv_critic, grad_pen, cls_real, cfg: RunConfig):
    """Critic objective: -(adv - lambda_gp*gp) + lambda_C*cls_real.

    Disabled terms contribute exactly zero.  Accepts floats or tensors.
    """
    total = -adv_critic + cfg.lambda_gp * grad_pen
    if cfg.loss_toggles.cls:
        total = total + cfg.lambda_cls * cls_real
    return total


def generator_objective(*, adv_gen, cls_fake, cyc, perc, cfg: RunConfig):
    """Generator objective: adv + lambda_C*cls_fake + lambda_Cyc*cyc + lambda_P*perc.

    Disabled terms contribute exactly zero.  Accepts floats or tensors.
    """
    total = adv_gen
    t = cfg.loss_toggles
    if t.cls:
        total = total + cfg.lambda_cls * cls_fake
    if t.cyc:
        total = total + cfg.lambda_cyc * cyc
    if t.perc:
        total = total + cfg.lambda_perc * perc
    return total


def make_bundle(cfg: RunConfig, *, adv_d: float, adv_g: float, gp: float,
                cls_real: float, cls_fake: float, cyc: float, perc: float) -> LossBundle:
    """Assemble a loss record whose composites follow the two objectives."""
    total_d = float(discriminator_objective(
        adv_critic=adv_d, grad_pen=gp, cls_real=cls_real, cfg=cfg))
    total_g = float(generator_objective(
        adv_gen=adv_g, cls_fake=cls_fake, cyc=cyc, perc=perc, cfg=cfg))
    return LossBundle(adv_d=adv_d, adv_g=adv_g, gp=gp, cls_real=cls_real,
                      cls_fake=cls_fake, cyc=cyc, perc=perc,
                      total_d=total_d, total_g=total_g)
