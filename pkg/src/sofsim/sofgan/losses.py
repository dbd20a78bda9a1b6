"""Adversarial, best-of-k and CVAE objectives. All return batch means; logs clamp at 1e-12."""
from __future__ import annotations

import numpy as np

from .. import ndiff as nd
from ..ndiff import Tensor


def discriminator_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Negative of ``log D(real) + log(1 - D(fake))``, averaged over rows."""
    real = nd.mean(nd.log(real_scores))
    fake = nd.mean(nd.log(nd.sub(1.0, fake_scores)))
    return nd.mul(nd.add(real, fake), -1.0)


def generator_loss(fake_scores: Tensor, form: str = "non_saturating") -> Tensor:
    """``-log D(fake)`` (non-saturating) or ``log(1 - D(fake))`` (minimax)."""
    if form == "non_saturating":
        return nd.mul(nd.mean(nd.log(fake_scores)), -1.0)
    if form == "minimax":
        return nd.mean(nd.log(nd.sub(1.0, fake_scores)))
    raise ValueError(f"unknown generator loss {form!r}")


def adversarial_losses(real_scores: Tensor, fake_scores: Tensor, form: str = "non_saturating"):
    """(d_loss, g_loss) for one set of scores."""
    return discriminator_loss(real_scores, fake_scores), generator_loss(fake_scores, form)


def variety_loss(samples: Tensor, target) -> Tensor:
    """Mean over pedestrians of ``min_k ||Y_k - X||`` with the norm over all steps.

    ``samples`` is (B, k, T, 2); ``target`` is (B, T, 2).
    """
    b, k = samples.shape[:2]
    flat = nd.reshape(samples, (b, k, -1))
    target = np.asarray(target.value if isinstance(target, Tensor) else target)
    err = nd.sub(flat, nd.constant(target.reshape(b, 1, -1), dtype=samples.value.dtype))
    return nd.mean(nd.min(nd.l2_norm(err, axis=2), axis=1))


def kl_divergence(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Mean over rows of KL(N(mu, sigma^2) || N(0, I)) in closed form."""
    sigma2 = nd.exp(nd.mul(log_sigma, 2.0))
    terms = nd.sub(nd.add(sigma2, nd.square(mu)), nd.add(nd.mul(log_sigma, 2.0), 1.0))
    return nd.mean(nd.mul(nd.sum(terms, axis=1), 0.5))


def goal_loss(goal_samples: Tensor, goal_gt) -> Tensor:
    """Mean over pedestrians of the best of k goal errors; ``goal_samples`` is (B, k, 2)."""
    gt = np.asarray(goal_gt)[:, None, :]
    err = nd.sub(goal_samples, nd.constant(gt, dtype=goal_samples.value.dtype))
    return nd.mean(nd.min(nd.l2_norm(err, axis=2), axis=1))


def cvae_loss(mu: Tensor, log_sigma: Tensor, goal_samples: Tensor, goal_gt,
              lambda2: float = 1.0, lambda3: float = 0.5) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (weighted total, kl, goal term)."""
    kl = kl_divergence(mu, log_sigma)
    goal = goal_loss(goal_samples, goal_gt)
    return nd.add(nd.mul(kl, lambda2), nd.mul(goal, lambda3)), kl, goal


def total_loss(adversarial: Tensor, variety: Tensor, cvae: Tensor | None, lambda1: float = 0.5) -> Tensor:
    out = nd.add(adversarial, nd.mul(variety, lambda1))
    return out if cvae is None else nd.add(out, cvae)
