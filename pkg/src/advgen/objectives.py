"""Training objectives and the temperature schedule.

All losses consume row-normalized embedding batches and return a LossValue
whose ``value`` field is a differentiable scalar tensor. Softmax terms are
evaluated through logsumexp so small temperatures (logits near +-14 at
tau=0.07) stay finite.
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigError, ContractError, InvalidInputError

ROW_NORM_TOL = 1e-4  # loose enough for 32-bit encoder output


@dataclass(frozen=True)
class TemperatureSchedule:
    """Geometric decay from tau0 to tau_final over horizon steps, then constant."""

    tau0: float = 1.0
    tau_final: float = 0.07
    horizon: int = 10000

    def __post_init__(self):
        if self.tau0 <= 0 or self.tau_final <= 0:
            raise ConfigError(f"temperatures must be positive, got tau0={self.tau0} tau_final={self.tau_final}")
        if self.horizon <= 0:
            raise ConfigError(f"schedule horizon must be positive, got {self.horizon}")

    @property
    def decay_rate(self):
        # per-step exponential rate: tau(t) = tau0 * exp(-decay_rate * t) on [0, horizon]
        return math.log(self.tau0 / self.tau_final) / self.horizon


def temperature(schedule: TemperatureSchedule, t) -> float:
    """Temperature at step t: tau0 * (tau_final/tau0)^(t/horizon), held at tau_final past the horizon."""
    if not math.isfinite(t):
        raise InvalidInputError(f"step index must be finite, got {t}")
    if t < 0:
        raise InvalidInputError(f"step index must be >= 0, got {t}")
    frac = min(float(t), float(schedule.horizon)) / float(schedule.horizon)
    return schedule.tau0 * (schedule.tau_final / schedule.tau0) ** frac


@dataclass
class LossValue:
    """Scalar loss plus the per-sample terms it averages."""

    value: torch.Tensor  # 0-dim, differentiable
    batch_size: int
    per_sample_terms: Optional[torch.Tensor] = None  # (n,)

    def validate(self):
        if self.per_sample_terms is not None:
            gap = abs(float(self.value.detach()) - float(self.per_sample_terms.detach().mean()))
            if gap > 1e-9:
                raise ContractError("loss value does not equal the mean of its per-sample terms")
        return self


def _check_pair(z: torch.Tensor, z_adv: torch.Tensor):
    if z.dim() != 2 or z_adv.dim() != 2:
        raise ContractError(f"embedding batches must be 2-d, got {tuple(z.shape)} and {tuple(z_adv.shape)}")
    if z.shape != z_adv.shape:
        raise ContractError(f"embedding batches must share shape, got {tuple(z.shape)} vs {tuple(z_adv.shape)}")
    for name, m in (("z", z), ("z_adv", z_adv)):
        with torch.no_grad():
            err = float((m.norm(dim=1) - 1.0).abs().max())
        if not math.isfinite(err):
            raise ContractError(f"{name} contains non-finite entries")
        if err > ROW_NORM_TOL:
            raise ContractError(f"{name} rows are not unit-norm (max deviation {err:.3e})")


def contrastive_loss(z: torch.Tensor, z_adv: torch.Tensor, tau: float) -> LossValue:
    """InfoNCE over one direction: row i of z against all rows of z_adv.

    L = -(1/n) sum_i log( exp(z_i . z_i_adv / tau) / sum_j exp(z_i . z_j_adv / tau) ),
    i.e. n positive pairs on the diagonal and n(n-1) negatives off it.
    """
    if tau <= 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    _check_pair(z, z_adv)
    logits = z @ z_adv.T / tau  # (n, n)
    terms = torch.logsumexp(logits, dim=1) - logits.diagonal()
    return LossValue(terms.mean(), z.shape[0], terms)


def bidirectional_infonce(z: torch.Tensor, z_adv: torch.Tensor, tau: float) -> LossValue:
    """Mean of both directional InfoNCE terms, symmetric under argument swap."""
    if tau <= 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    _check_pair(z, z_adv)
    logits = z @ z_adv.T / tau
    diag = logits.diagonal()
    fwd = torch.logsumexp(logits, dim=1) - diag  # softmax over z_adv
    bwd = torch.logsumexp(logits, dim=0) - diag  # softmax over z
    terms = 0.5 * (fwd + bwd)
    return LossValue(terms.mean(), z.shape[0], terms)


def cosine_loss(z: torch.Tensor, z_adv: torch.Tensor) -> LossValue:
    """1 minus mean pairwise cosine; 0 at perfect alignment, 2 at antipodal."""
    _check_pair(z, z_adv)
    terms = 1.0 - (z * z_adv).sum(dim=1)
    return LossValue(terms.mean(), z.shape[0], terms)


OBJECTIVES = ("contrastive", "bidirectional", "cosine")


def objective_fn(name: str):
    if name == "contrastive":
        return contrastive_loss
    if name == "bidirectional":
        return bidirectional_infonce
    if name == "cosine":
        return lambda z, za, tau=None: cosine_loss(z, za)
    raise ConfigError(f"unknown objective {name!r}, expected one of {OBJECTIVES}")


def ensemble_loss(ensemble, targets: torch.Tensor, adversarial: torch.Tensor,
                  objective: str, tau: float) -> LossValue:
    """Weighted sum of the objective across ensemble members.

    Each encoder embeds both image batches with its own preprocessing; target
    embeddings are treated as constants (no gradient through the target branch).
    """
    from .encoders import encode

    fn = objective_fn(objective)
    total = None
    terms = None
    n = targets.shape[0]
    for enc, w in zip(ensemble.members, ensemble.weights):
        with torch.no_grad():
            zt = encode(enc, targets)
        za = encode(enc, adversarial)
        lv = fn(zt, za, tau)
        total = w * lv.value if total is None else total + w * lv.value
        terms = w * lv.per_sample_terms if terms is None else terms + w * lv.per_sample_terms
    return LossValue(total, n, terms)
