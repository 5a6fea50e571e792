"""Fusion, scoring and the composite training objective.

Every loss here is a mean over its set (pairs, users), not a raw sum, so the
weights keep their meaning across batch sizes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import autograd as ag

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class LossWeights:
    lambda_t: float = 0.1
    lambda_cl: float = 0.01
    lambda_sl: float = 0.01
    beta: float = 1e-4
    tau: float = 0.1
    stage_weights: dict | None = None  # stage -> lambda_t override

    def __post_init__(self):
        for name in ("lambda_t", "lambda_cl", "lambda_sl", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    def for_stage(self, t):
        if self.stage_weights and t in self.stage_weights:
            return self.stage_weights[t]
        return self.lambda_t


@dataclass
class LossBreakdown:
    stage_losses: dict = field(default_factory=dict)  # stage -> L_t
    consistency: float = 0.0
    smoothness: float = 0.0
    l2: float = 0.0  # beta * ||theta||^2
    total: float = 0.0
    data_loss: object = None  # Var: everything except the l2 term

    def as_dict(self):
        out = {f"L_t{t}": v for t, v in sorted(self.stage_losses.items())}
        out.update(consistency=self.consistency, smoothness=self.smoothness, l2=self.l2, total=self.total)
        return out


def fuse(parts):
    """Sum of the available embedding parts (Nones skipped)."""
    parts = [p for p in parts if p is not None]
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def fused_logit(user_vec, item_vec):
    return (ag.as_var(user_vec) * item_vec).sum(axis=-1)


def fuse_and_score(user_parts, item_parts):
    """``sigmoid((sum user parts) . (sum item parts))`` row-wise."""
    return ag.sigmoid(fused_logit(fuse(user_parts), fuse(item_parts)))


def bce_loss(pred, labels):
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    pred = ag.as_var(pred)
    y = np.asarray(labels, dtype=pred.dtype)
    if y.size == 0:
        log.warning("empty prediction set; BCE contributes 0")
        return ag.Var(np.zeros((), pred.dtype))
    p = ag.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    ll = ag.log(p) * y + ag.log(1.0 - p) * (1.0 - y)
    return -ll.mean()


def consistency_loss(evolved, global_users, target, tau, n_users=None):
    """InfoNCE between each temporal user row and the global rows of the batch.

    ``evolved`` is (P, d): one row per (user, stage) pair; ``global_users`` is
    (B, d) for the distinct users of the batch; ``target[p]`` is the column
    of the pair's own user.  Per-pair terms are summed over stages and
    averaged over the ``n_users`` distinct users (default B).
    """
    evolved = ag.as_var(evolved)
    logits = ag.matmul(evolved, ag.swapaxes(ag.as_var(global_users), 0, 1)) * (1.0 / tau)
    logp = ag.log_softmax(logits, axis=-1)
    rows = np.arange(len(target))
    picked = ag.getitem(logp, (rows, np.asarray(target)))
    denom = float(n_users if n_users is not None else global_users.shape[0])
    return -picked.sum() / denom


def smoothness_loss(evolved_seq):
    """``sum_{t>=1} ||e_t - e_{t-1}||^2`` averaged over users.

    ``evolved_seq`` is a list over stages of (B, d) user rows."""
    if len(evolved_seq) < 2:
        first = ag.as_var(evolved_seq[0]) if evolved_seq else None
        return ag.Var(np.zeros((), first.dtype if first is not None else np.float64))
    n = evolved_seq[0].shape[0]
    total = None
    for prev, cur in zip(evolved_seq[:-1], evolved_seq[1:]):
        diff = ag.as_var(cur) - prev
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total / float(n)


def l2_penalty(params):
    return float(sum(float(np.sum(np.square(p, dtype=np.float64))) for p in params.values()))


def total_loss(stage_losses, consistency, smoothness, weights: LossWeights, params):
    """Assemble the weighted objective.

    ``stage_losses`` maps stage -> Var; ``consistency``/``smoothness`` are Vars
    or None.  The l2 term is reported numerically; its gradient
    ``2 * beta * theta`` is applied by the optimiser."""
    data = None
    br = LossBreakdown()
    for t, lt in stage_losses.items():
        term = lt * weights.for_stage(t)
        data = term if data is None else data + term
        br.stage_losses[t] = float(lt.data)
    if consistency is not None:
        br.consistency = float(consistency.data)
        if weights.lambda_cl:
            data = data + consistency * weights.lambda_cl
    if smoothness is not None:
        br.smoothness = float(smoothness.data)
        if weights.lambda_sl:
            data = data + smoothness * weights.lambda_sl
    if data is None:
        data = ag.Var(np.zeros(()))
    br.l2 = weights.beta * l2_penalty(params)
    br.data_loss = data
    br.total = float(data.data) + br.l2
    return br
