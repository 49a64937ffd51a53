"""Adversarial, cycle-consistency and total objectives.

Naming: G1 maps X -> Y and is judged by D1 (on Y); G2 maps Y -> X and is
judged by D2 (on X).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .ssim import SsimConfig, ssim_loss
from .tensor_core import ShapeError, Tensor, ops

PROB_EPS = 1e-7


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-1/2 * (mean log D(real) + mean log(1 - D(fake))); 0 for a perfect discriminator."""
    real_term = ops.mean(ops.log(d_real, PROB_EPS))
    fake_term = ops.mean(ops.log(1.0 - d_fake, PROB_EPS))
    return (real_term + fake_term) * -0.5


def generator_adv_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating generator loss, -mean log D(G(x))."""
    return -ops.mean(ops.log(d_fake, PROB_EPS))


def saturating_generator_loss(d_fake: Tensor) -> Tensor:
    """mean log(1 - D(G(x))), the original minimax form; kept for comparison only."""
    return ops.mean(ops.log(1.0 - d_fake, PROB_EPS))


def cycle_loss(x: Tensor, x_rec: Tensor, y: Tensor, y_rec: Tensor, lam: float, pixel_max: float = 1.0) -> Tensor:
    """lam * (mean |x_rec - x| + mean |y_rec - y|), with images divided by ``pixel_max`` first."""
    if lam < 0:
        raise ValueError("cycle weight must be non-negative")
    for a, b, tag in ((x, x_rec, "x"), (y, y_rec, "y")):
        if a.shape != b.shape:
            raise ShapeError(f"cycle_loss: {tag} shape {a.shape} != reconstruction shape {b.shape}")
    l1 = ops.mean(ops.abs(x_rec - x)) + ops.mean(ops.abs(y_rec - y))
    return l1 * (lam / pixel_max)


@dataclass
class LossReport:
    adv_g: float = 0.0
    adv_d1: float = 0.0
    adv_d2: float = 0.0
    cycle: float = 0.0
    ssim: float = 0.0
    total: float = 0.0

    @property
    def adv_d(self) -> float:
        return self.adv_d1 + self.adv_d2

    CSV_HEADER = "step,adv_g,adv_d1,adv_d2,cycle,ssim,total"

    def csv_row(self, step: int) -> str:
        vals = [getattr(self, f.name) for f in fields(self)]
        return f"{step}," + ",".join(repr(float(v)) for v in vals)


@dataclass
class CycleTerms:
    """Everything one generator step needs, as produced by the forward passes."""

    x: Tensor
    y: Tensor
    fake_y: Tensor        # G1(x)
    fake_x: Tensor        # G2(y)
    rec_x: Tensor         # G2(G1(x))
    rec_y: Tensor         # G1(G2(y))
    d1_fake: Tensor       # D1(G1(x))
    d2_fake: Tensor       # D2(G2(y))


@dataclass
class GeneratorObjective:
    total: Tensor
    adv: Tensor
    cycle: Tensor
    ssim: Tensor | None


def generator_objective(terms: CycleTerms, lam: float, lambda_ssim: float,
                        ssim_cfg: SsimConfig = SsimConfig(), pixel_max: float = 255.0) -> GeneratorObjective:
    """Adversarial (both directions) + cycle + SSIM over P = (x, G1(x)) and Q = (y, G2(y)).

    With ``lambda_ssim == 0`` the SSIM term is left out of the graph entirely.
    """
    adv = generator_adv_loss(terms.d1_fake) + generator_adv_loss(terms.d2_fake)
    cyc = cycle_loss(terms.x, terms.rec_x, terms.y, terms.rec_y, lam, pixel_max)
    total = adv + cyc
    ssim_term = None
    if lambda_ssim > 0:
        ssim_term = (ssim_loss([(terms.x, terms.fake_y)], ssim_cfg, lambda_ssim)
                     + ssim_loss([(terms.y, terms.fake_x)], ssim_cfg, lambda_ssim))
        total = total + ssim_term
    return GeneratorObjective(total, adv, cyc, ssim_term)


def total_objective(terms: CycleTerms, lam: float, lambda_ssim: float, ssim_cfg: SsimConfig = SsimConfig(),
                    pixel_max: float = 255.0, d1: tuple[Tensor, Tensor] | None = None,
                    d2: tuple[Tensor, Tensor] | None = None) -> tuple[LossReport, Tensor, tuple[Tensor | None, Tensor | None]]:
    """Generator objective plus, when (real, fake) discriminator outputs are given, the D1/D2 losses.

    Returns the report, the generator scalar and the two discriminator scalars.
    """
    g = generator_objective(terms, lam, lambda_ssim, ssim_cfg, pixel_max)
    d1_loss = discriminator_loss(*d1) if d1 is not None else None
    d2_loss = discriminator_loss(*d2) if d2 is not None else None
    report = LossReport(
        adv_g=g.adv.item(),
        adv_d1=d1_loss.item() if d1_loss is not None else 0.0,
        adv_d2=d2_loss.item() if d2_loss is not None else 0.0,
        cycle=g.cycle.item(),
        ssim=g.ssim.item() if g.ssim is not None else 0.0,
        total=g.total.item(),
    )
    return report, g.total, (d1_loss, d2_loss)
