"""Scalar objectives for translation and feature learning.

All image-space L1 terms are element means, so the weights do not depend on
image size. Discriminators return raw score maps; the log form squashes them
through a sigmoid and treats the patch mean as the probability of "real".
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

from .networks import NetworkBundle, frozen
from .pairs import build_pairs

EPS = 1e-7


class AdversarialForm(str, enum.Enum):
    LOG = "log"
    LEAST_SQUARES = "least_squares"


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, iteration: int | None = None, components: Mapping | None = None,
                 history: list | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.components = dict(components or {})
        self.history = list(history or [])


@dataclass
class LossWeights:
    alpha: float = 10.0
    beta: float = 5.0
    gamma: float = 2.0
    lam: float = 5.0
    margin: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        check_margin(self.margin)


def check_margin(m: float) -> None:
    if not 0.0 <= m <= 2.0:
        raise ConfigError(f"contrastive margin must lie in [0, 2], got {m}")


# ---------------------------------------------------------------------------
# adversarial

def _clamped_log_sigmoid(s: torch.Tensor) -> torch.Tensor:
    """log(clamp(sigmoid(s), EPS, 1 - EPS)), evaluated without cancellation.

    1 - sigmoid(s) equals sigmoid(-s), so both log terms go through logsigmoid.
    """
    return F.logsigmoid(s).clamp(math.log(EPS), math.log1p(-EPS))


def discriminator_loss(D: Callable, real: torch.Tensor, fake: torch.Tensor,
                       form: AdversarialForm | str = AdversarialForm.LEAST_SQUARES) -> torch.Tensor:
    """Negated discriminator objective; ``fake`` is detached so only D learns."""
    form = AdversarialForm(form)
    s_real, s_fake = D(real), D(fake.detach())
    if form is AdversarialForm.LOG:
        return -(_clamped_log_sigmoid(s_real).mean() + _clamped_log_sigmoid(-s_fake).mean())
    return (s_real - 1).pow(2).mean() + s_fake.pow(2).mean()


def generator_adversarial_loss(D, fake: torch.Tensor,
                               form: AdversarialForm | str = AdversarialForm.LEAST_SQUARES) -> torch.Tensor:
    """Non-saturating generator term; D's parameters are kept out of the graph."""
    form = AdversarialForm(form)
    params = list(D.parameters()) if hasattr(D, "parameters") else []
    with frozen(*([D] if params else [])):
        s_fake = D(fake)
    if form is AdversarialForm.LOG:
        return -_clamped_log_sigmoid(s_fake).mean()
    return (s_fake - 1).pow(2).mean()


def adversarial_loss(D, real, fake, form=AdversarialForm.LEAST_SQUARES) -> tuple[torch.Tensor, torch.Tensor]:
    """``(loss_D, loss_G)`` for one generator/discriminator pair."""
    return discriminator_loss(D, real, fake, form), generator_adversarial_loss(D, fake, form)


# ---------------------------------------------------------------------------
# reconstruction terms

def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def cycle_loss(G, F_, x_s, x_t) -> torch.Tensor:
    return l1(F_(G(x_s)), x_s) + l1(G(F_(x_t)), x_t)


def identity_loss(G, F_, x_s, x_t) -> torch.Tensor:
    return l1(F_(x_s), x_s) + l1(G(x_t), x_t)


# ---------------------------------------------------------------------------
# contrastive / classification

def contrastive_loss(i, e1: torch.Tensor, e2: torch.Tensor, m: float = 2.0,
                     reduction: str = "mean") -> torch.Tensor:
    """(1 - i) * max(0, m - d)^2 + i * d^2 with d the Euclidean distance.

    ``e1``/``e2`` are single embeddings or ``[N, D]`` rows; ``i`` is 0/1 per row.
    """
    check_margin(m)
    e1, e2 = torch.atleast_2d(e1), torch.atleast_2d(e2)
    i = torch.as_tensor(i, dtype=e1.dtype, device=e1.device).reshape(-1)
    d2 = (e1 - e2).pow(2).sum(dim=1)
    # sqrt has an infinite slope at 0; the positive term uses d^2 directly
    d = torch.sqrt(d2.clamp_min(1e-30))
    loss = (1 - i) * (m - d).clamp_min(0).pow(2) + i * d2
    if reduction == "none":
        return loss
    if reduction == "sum":
        return loss.sum()
    return loss.mean()


def contrastive_term(M, pairs, m: float) -> torch.Tensor:
    """Contrastive loss of ``pairs`` under embedder ``M``: summed over the four
    pair kinds, averaged over batch elements."""
    lefts = torch.cat([p.left for p in pairs])
    rights = torch.cat([p.right for p in pairs])
    labels = torch.cat([torch.full((p.left.shape[0],), float(p.label_i), dtype=lefts.dtype) for p in pairs])
    emb = M(torch.cat([lefts, rights]))
    e_left, e_right = emb[: len(lefts)], emb[len(lefts):]
    per_pair = contrastive_loss(labels, e_left, e_right, m, reduction="none")
    return per_pair.sum() / pairs[0].left.shape[0]


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = logits.shape[1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def classification_loss(C, batch: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of ``C``'s identity logits."""
    return cross_entropy(C(batch), labels)


# ---------------------------------------------------------------------------
# composite objectives

@dataclass
class LossRecord:
    components: dict[str, torch.Tensor] = field(default_factory=dict)
    total: torch.Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        if self.total is not None:
            out["total"] = float(self.total.detach())
        return out


@dataclass
class Translations:
    fake_t: torch.Tensor
    fake_s: torch.Tensor
    rec_s: torch.Tensor
    rec_t: torch.Tensor
    idt_s: torch.Tensor | None
    idt_t: torch.Tensor | None


def translate_all(G, F_, x_s, x_t, with_identity: bool = True) -> Translations:
    fake_t, fake_s = G(x_s), F_(x_t)
    return Translations(
        fake_t=fake_t, fake_s=fake_s, rec_s=F_(fake_t), rec_t=G(fake_s),
        idt_s=F_(x_s) if with_identity else None, idt_t=G(x_t) if with_identity else None,
    )


def _cyclegan_terms(bundle: NetworkBundle, x_s, x_t, weights: LossWeights, form) -> tuple[dict, Translations]:
    tr = translate_all(bundle.G, bundle.F, x_s, x_t, with_identity=True)
    comps = {
        "adv_G": generator_adversarial_loss(bundle.D_T, tr.fake_t, form),
        "adv_F": generator_adversarial_loss(bundle.D_S, tr.fake_s, form),
        "rec": l1(tr.rec_s, x_s) + l1(tr.rec_t, x_t),
        "ide": l1(tr.idt_s, x_s) + l1(tr.idt_t, x_t),
    }
    return comps, tr


def _weighted_base(comps: dict, weights: LossWeights) -> torch.Tensor:
    return comps["adv_G"] + comps["adv_F"] + weights.alpha * comps["rec"] + weights.beta * comps["ide"]


def cyclegan_objective(bundle: NetworkBundle, batch_s, batch_t, weights: LossWeights,
                       form=AdversarialForm.LEAST_SQUARES) -> tuple[LossRecord, Translations]:
    comps, tr = _cyclegan_terms(bundle, batch_s, batch_t, weights, form)
    return LossRecord(comps, _weighted_base(comps, weights)), tr


def spgan_objective(bundle: NetworkBundle, batch_s, batch_t, weights: LossWeights,
                    form=AdversarialForm.LEAST_SQUARES) -> tuple[LossRecord, Translations]:
    """Generator-side SPGAN objective: cycle + beta * identity + gamma * contrastive."""
    comps, tr = _cyclegan_terms(bundle, batch_s, batch_t, weights, form)
    total = _weighted_base(comps, weights)
    # a zero-weighted term stays out of the graph so gradients match the plain objective bit for bit
    with torch.set_grad_enabled(torch.is_grad_enabled() and weights.gamma != 0):
        pairs = build_pairs(batch_s, batch_t, translated=(tr.fake_t, tr.fake_s))
        comps["con"] = contrastive_term(bundle.M, pairs, weights.margin)
    if weights.gamma != 0:
        total = total + weights.gamma * comps["con"]
    return LossRecord(comps, total), tr


def espgan_objective(bundle: NetworkBundle, batch_s, labels_s, batch_t, weights: LossWeights,
                     form=AdversarialForm.LEAST_SQUARES) -> tuple[LossRecord, Translations]:
    """Translator-side eSPGAN objective: cycle + beta * identity + lambda * L_c(G(x_s)).

    The learner runs frozen and in eval mode, so the classification signal only
    reaches the generator.
    """
    comps, tr = _cyclegan_terms(bundle, batch_s, batch_t, weights, form)
    was_training = bundle.C.training
    bundle.C.eval()
    try:
        with frozen(bundle.C), torch.set_grad_enabled(torch.is_grad_enabled() and weights.lam != 0):
            comps["cls"] = classification_loss(bundle.C, tr.fake_t, labels_s)
    finally:
        bundle.C.train(was_training)
    total = _weighted_base(comps, weights)
    if weights.lam != 0:
        total = total + weights.lam * comps["cls"]
    return LossRecord(comps, total), tr


def check_finite(record: LossRecord | Mapping[str, float], iteration: int | None = None,
                 history: list | None = None) -> None:
    values = record.values() if isinstance(record, LossRecord) else dict(record)
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLossError(
            f"non-finite loss at iteration {iteration}: {bad} (all components: {values})",
            iteration, values, history)
