"""Adversarial, cycle-consistency and segmentation-guidance losses.

Reductions are per-element means throughout so the cycle and segmentation
weights keep the same meaning at any tile or batch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import ContractError, is_frozen

EPS = 1e-7
GAN_MODES = ("lsgan", "log", "minimax")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    alpha: float = 10.0  # cycle
    beta: float = 0.3  # segmentation guidance

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    gan_opt: float
    gan_sar: float
    cyc: float
    seg: float
    total: float

    def as_dict(self) -> dict:
        return {"gan_opt": self.gan_opt, "gan_sar": self.gan_sar, "cyc": self.cyc,
                "seg": self.seg, "total": self.total}


class AdversarialTerms(NamedTuple):
    d_objective: torch.Tensor
    g_objective: torch.Tensor
    mode: str

    @property
    def d_loss(self) -> torch.Tensor:
        """What the discriminator's optimizer minimizes."""
        return self.d_objective if self.mode == "lsgan" else -self.d_objective


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"{name} is not finite")
    return value


def score_terms(d_real: torch.Tensor, d_fake_detached: torch.Tensor | None, d_fake: torch.Tensor | None,
                mode: str = "lsgan") -> AdversarialTerms:
    """Adversarial objectives from raw patch scores.

    ``d_fake_detached`` feeds the discriminator objective, ``d_fake`` (scores of
    a non-detached fake) the generator objective; either may be None.

    log / minimax: scores go through a sigmoid, d_objective = E log D(real) +
    E log(1 - D(fake)) is maximized. The generator minimizes that same value
    (minimax) or -E log D(fake) (log, non-saturating).
    lsgan: d_objective = 0.5 E (D(real) - 1)^2 + 0.5 E D(fake)^2 is minimized,
    the generator minimizes E (D(fake) - 1)^2.
    """
    if mode not in GAN_MODES:
        raise ValueError(f"unknown adversarial mode {mode!r}")
    zero = d_real.new_zeros(())
    if mode == "lsgan":
        d_obj = 0.5 * ((d_real - 1) ** 2).mean()
        if d_fake_detached is not None:
            d_obj = d_obj + 0.5 * (d_fake_detached ** 2).mean()
        g_obj = ((d_fake - 1) ** 2).mean() if d_fake is not None else zero
    else:
        p_real = torch.sigmoid(d_real).clamp(EPS, 1 - EPS)
        d_obj = torch.log(p_real).mean()
        if d_fake_detached is not None:
            d_obj = d_obj + torch.log(1 - torch.sigmoid(d_fake_detached).clamp(EPS, 1 - EPS)).mean()
        if d_fake is None:
            g_obj = zero
        else:
            p_fake = torch.sigmoid(d_fake).clamp(EPS, 1 - EPS)
            if mode == "minimax":
                g_obj = torch.log(p_real.detach()).mean() + torch.log(1 - p_fake).mean()
            else:
                g_obj = -torch.log(p_fake).mean()
    return AdversarialTerms(_check_finite("discriminator objective", d_obj),
                            _check_finite("generator objective", g_obj), mode)


def adversarial_loss(generator: nn.Module, discriminator: nn.Module, real_target: torch.Tensor,
                     real_source: torch.Tensor, mode: str = "lsgan", fake: torch.Tensor | None = None
                     ) -> AdversarialTerms:
    """Both sides of one direction's adversarial game; patch scores are averaged."""
    if fake is None:
        fake = generator(real_source)
    d_real = discriminator(real_target)
    return score_terms(d_real, discriminator(fake.detach()), discriminator(fake), mode)


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractError(f"reconstruction shape {tuple(a.shape)} != input shape {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(g_opt: nn.Module, g_sar: nn.Module, rs: torch.Tensor, ro: torch.Tensor,
               fake_opt: torch.Tensor | None = None, fake_sar: torch.Tensor | None = None) -> torch.Tensor:
    """Mean L1 of SAR->OPT->SAR plus OPT->SAR->OPT reconstruction errors."""
    fake_opt = g_opt(rs) if fake_opt is None else fake_opt
    fake_sar = g_sar(ro) if fake_sar is None else fake_sar
    loss = l1_mean(g_sar(fake_opt), rs) + l1_mean(g_opt(fake_sar), ro)
    return _check_finite("cycle loss", loss)


def cross_entropy_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean -log p(label) for class probabilities [N, K, H, W]."""
    picked = probs.gather(1, labels.long().unsqueeze(1)).clamp_min(EPS)
    return -torch.log(picked).mean()


def seg_loss(g_opt: nn.Module, segmenter: nn.Module, rs: torch.Tensor, gt_seg: torch.Tensor,
             fake_opt: torch.Tensor | None = None) -> torch.Tensor:
    """Unweighted pixel cross-entropy of the frozen segmenter on translated SAR."""
    if not is_frozen(segmenter):
        raise ContractError("segmentation guidance requires a frozen segmenter")
    fake_opt = g_opt(rs) if fake_opt is None else fake_opt
    logits = segmenter(fake_opt)
    if logits.shape[-2:] != gt_seg.shape[-2:]:
        raise ContractError("segmentation labels are not aligned with the SAR batch")
    return _check_finite("segmentation loss", F.cross_entropy(logits, gt_seg.long()))


def total_objective(weights: LossWeights, gan_opt, gan_sar, cyc, seg):
    """gan_opt + gan_sar + alpha * cyc + beta * seg.

    Works on floats or tensors; with tensors the result stays differentiable.
    """
    for name, v in (("gan_opt", gan_opt), ("gan_sar", gan_sar), ("cyc", cyc), ("seg", seg)):
        finite = bool(torch.isfinite(v).all()) if torch.is_tensor(v) else math.isfinite(v)
        if not finite:
            raise NonFiniteLossError(f"{name} term is not finite")
    return gan_opt + gan_sar + weights.alpha * cyc + weights.beta * seg


def breakdown(weights: LossWeights, gan_opt, gan_sar, cyc, seg) -> LossBreakdown:
    vals = [v.item() if torch.is_tensor(v) else float(v) for v in (gan_opt, gan_sar, cyc, seg)]
    return LossBreakdown(*vals, total=float(total_objective(weights, *vals)))
