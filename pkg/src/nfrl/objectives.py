"""Trainable objectives on a FlowModel.

mle_loss fits the model to samples by exact negative log-likelihood, with
optional per-step Gaussian noising of the inputs. vi_loss fits the model to
an unnormalized target density by minimizing
    mean[ log q(x) - log p_tilde(x) ],  x = f^{-1}(z), z ~ prior,
the pathwise (reparameterized) form of KL(q || p) up to the constant log Z.
denoised_sample undoes the training-time noising to first order by stepping
along the learned score; apply_mask implements the conditional/marginal
joint-training mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tape
from .errors import ContractError, NumericError
from .flow import ConditionContext, FlowModel


@dataclass
class MleBatch:
    x: Array  # (B, d)
    ctx: ConditionContext
    noise_std: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if self.x.shape[0] < 1:
            raise ContractError("empty MLE batch")
        if self.x.shape[0] != self.ctx.batch:
            raise ContractError("batch size mismatch between x and ctx")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")


@dataclass
class ViTarget:
    """Unnormalized log-density: log_unnorm(x) -> (log p-tilde (B,), grad (B, d))."""

    log_unnorm: Callable
    domain_dim: int


def mle_loss(model: FlowModel, batch: MleBatch, tape: Tape,
             rng: np.random.Generator) -> float:
    """-mean log p(x + sigma*eps | ctx); backward is run, gradients populated."""
    x = batch.x
    if batch.noise_std > 0:
        x = x + batch.noise_std * rng.standard_normal(x.shape)
    lp = model.log_prob(x, batch.ctx, tape)
    bad = ~np.isfinite(lp.value)
    if np.any(bad):
        raise NumericError(f"mle loss, batch row {int(np.flatnonzero(bad)[0])}")
    loss = ad.neg(ad.vmean(lp))
    tape.backward(loss)
    return float(loss.value)


def vi_loss(model: FlowModel, target: ViTarget, batch_size: int, tape: Tape,
            rng: np.random.Generator) -> float:
    """Reparameterized KL(q || p) up to log Z; backward is run on the tape."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if target.domain_dim != model.d:
        raise ContractError("target dimension does not match model")
    ctx = ConditionContext.unconditional(batch_size)
    x, log_q = model.sample(ctx, rng, tape)
    log_pt = ad.external_grad(x, target.log_unnorm, "vi target")
    loss = ad.vmean(ad.sub(log_q, log_pt))
    if not np.isfinite(loss.value):
        raise NumericError("vi loss")
    tape.backward(loss)
    return float(loss.value)


def denoised_sample(model: FlowModel, ctx: ConditionContext,
                    rng: np.random.Generator, sigma: float) -> Array:
    """Draw y from the model, then return y + sigma^2 * grad_y log p(y | ctx).

    With sigma matching the training noise this undoes the noising to first
    order (the model's density is the sigma-smoothed data density).
    """
    y, _ = model.sample_values(ctx, rng)
    if sigma == 0.0:
        return y
    return y + sigma * sigma * model.score_wrt_input(y, ctx)


def apply_mask(ctx: ConditionContext, mask_prob: float,
               rng: np.random.Generator) -> ConditionContext:
    """Independently set each row's mask bit with probability mask_prob."""
    if not 0.0 <= mask_prob <= 1.0:
        raise ContractError("mask_prob must be in [0, 1]")
    return ctx.with_mask(rng.random(ctx.batch) < mask_prob)
