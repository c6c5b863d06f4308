"""Plug-in post-training updates consumed by the learner.

``HGDagger`` is supervised learning on expert-labelled frames only.
``Recap`` trains an indicator-conditioned head next to the marginal head,
with indicators stamped from a frozen linear value function.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .policy import BLOCK_ACTION, BLOCK_MARGINAL, PolicyParams, nll_terms, sgd_step, zero_grad

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.99
# Under a value function fit to expert data, expert steps have TD advantage ~0
# and wasted steps about -(1 - gamma) * V; the default threshold sits between.
DEFAULT_EPSILON = -0.005


class HGDagger:
    name = "hgdagger"

    def __init__(self, lr: float = 0.05):
        self.lr = lr

    def update(self, params: PolicyParams, batch):
        """One NLL step on the marginal head using expert-labelled items.

        Returns the new params and the marginal-head NLL of every item.
        """
        losses, _ = nll_terms(params, batch.obs, batch.actions)
        mask = np.asarray(batch.expert, dtype=bool)
        if not mask.any():
            return params, losses
        _, g = nll_terms(params, batch.obs[mask], batch.actions[mask])
        grad = zero_grad(params)
        grad[BLOCK_MARGINAL] = g
        return sgd_step(params, grad, self.lr), losses

    def prepare_record(self, record):
        return record


@dataclass
class Recap:
    lr: float = 0.05
    gamma: float = DEFAULT_GAMMA
    epsilon: dict = field(default_factory=dict)  # task -> threshold
    beta_rollout: float = 1.0
    beta_eval: float = 2.0
    value_weights: np.ndarray | None = None
    name: str = "recap"

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def threshold(self, task: int) -> float:
        return float(self.epsilon.get(task, DEFAULT_EPSILON))

    def indicators(self, obs, next_obs, rewards, terminal, tasks) -> np.ndarray:
        if self.value_weights is None:
            raise RuntimeError("value function not fitted")
        eps = np.array([self.threshold(int(t)) for t in np.atleast_1d(tasks)])
        return advantage_indicator(self.value_weights, obs, next_obs, rewards, terminal,
                                   eps, self.gamma)

    def prepare_record(self, record):
        """Stamp per-frame indicators onto an episode (done once, at ingest)."""
        n = len(record)
        if n == 0:
            return record
        nxt = np.zeros_like(record.observations)
        nxt[:-1] = record.observations[1:]
        term = np.zeros(n, dtype=bool)
        term[-1] = True
        record.advantage = self.indicators(record.observations, nxt, record.rewards, term,
                                           np.full(n, record.task_id)).astype(np.float64)
        return record

    def update(self, params: PolicyParams, batch):
        ind = np.asarray(batch.indicator, dtype=np.float64)
        if np.isnan(ind).any():
            raise ValueError("batch contains frames without advantage indicators")
        return recap_update(params, batch.obs, batch.actions, ind, self.lr)


def recap_update(params: PolicyParams, obs, actions, indicators, lr: float):
    """Joint NLL step: conditioned head on (features, indicator), marginal on features."""
    cond_losses, g_cond = nll_terms(params, obs, actions, indicators)
    _, g_marg = nll_terms(params, obs, actions)
    grad = zero_grad(params)
    grad[BLOCK_ACTION] = g_cond
    grad[BLOCK_MARGINAL] = g_marg
    return sgd_step(params, grad, lr), cond_losses


def recap_grad(params: PolicyParams, obs, actions, indicators):
    """Loss and gradient of the summed conditioned + marginal mean NLL."""
    cond_losses, g_cond = nll_terms(params, obs, actions, indicators)
    marg_losses, g_marg = nll_terms(params, obs, actions)
    grad = zero_grad(params)
    grad[BLOCK_ACTION] = g_cond
    grad[BLOCK_MARGINAL] = g_marg
    return float(cond_losses.mean() + marg_losses.mean()), grad


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def fit_value(records, gamma: float = DEFAULT_GAMMA, ridge: float = 1e-6) -> np.ndarray:
    """Least-squares fit of a linear value function to Monte-Carlo returns."""
    records = list(records)
    if not records or sum(len(r) for r in records) == 0:
        raise ValueError("cannot fit a value function on an empty buffer")
    x = np.concatenate([r.observations for r in records])
    y = np.concatenate([discounted_returns(r.rewards, gamma) for r in records])
    return solve_least_squares(x, y, ridge)


def solve_least_squares(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    gram = x.T @ x
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        log.info("degenerate design matrix; using ridge %.1e", ridge)
        return np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), x.T @ y)
    return np.linalg.lstsq(x, y, rcond=None)[0]


def advantage_indicator(value_weights, obs, next_obs, rewards, terminal, epsilon,
                        gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """1 where r + gamma * V(s') - V(s) > epsilon, with V(s') = 0 on terminal frames."""
    w = np.asarray(value_weights, dtype=np.float64)
    v = np.asarray(obs, dtype=np.float64) @ w
    v_next = np.where(np.asarray(terminal, dtype=bool), 0.0,
                      np.asarray(next_obs, dtype=np.float64) @ w)
    adv = np.asarray(rewards, dtype=np.float64) + gamma * v_next - v
    return (adv > np.asarray(epsilon, dtype=np.float64)).astype(np.int64)


def make_algorithm(name: str, lr: float = 0.05, **kwargs):
    if name == "hgdagger":
        return HGDagger(lr)
    if name == "recap":
        return Recap(lr=lr, **kwargs)
    raise ValueError(f"unknown algorithm {name!r}")
