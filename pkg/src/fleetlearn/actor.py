"""Edge-client side: rollouts with gated expert takeover, and the actor loop
that uploads episodes and adopts new checkpoints only between episodes."""
from __future__ import annotations

import collections
import logging
import time
import uuid
from dataclasses import dataclass

import numpy as np

from . import envsim
from .envsim import DomainParam, Status
from .policy import (CheckpointFormatError, PolicyParams, StaleBaseError, apply_delta,
                     decode_checkpoint, decode_delta, forward, CKPT_MAGIC, DELTA_MAGIC)
from .store import EpisodeMeta, EpisodeRecord, Source, spans_from_flags

log = logging.getLogger(__name__)

EPISODES_TOPIC = "episodes"
PARAMS_TOPIC = "params"
LATEST_CKPT_KEY = "checkpoints/latest"

ROLLOUT_MODES = ("greedy", "sample", "recap")


@dataclass(frozen=True)
class ActorConfig:
    actor_id: str
    task_id: int
    domain_seed: int
    horizon: int = envsim.DEFAULT_HORIZON
    gate_window: int = 3
    intervention_enabled: bool = True
    rollout_mode: str = "sample"
    beta: float = 1.0
    buffer_capacity: int = 64

    def __post_init__(self):
        if self.gate_window < 2:
            raise ValueError("gate_window must be >= 2")
        if self.rollout_mode not in ROLLOUT_MODES:
            raise ValueError(f"rollout_mode must be one of {ROLLOUT_MODES}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


class ExpertPolicy:
    """Scripted expert used as a policy (demo collection, upper-bound eval)."""

    version = 0

    def act(self, state, domain, obs, rng):
        return envsim.expert_action(state, domain)


def recap_combine(p_marginal, p_conditioned, beta: float) -> np.ndarray:
    """Normalized ``p_marginal**(1 - beta) * p_conditioned**beta``.

    An action is in the support only if every head carrying a nonzero
    exponent gives it positive probability.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    pm = np.asarray(p_marginal, dtype=np.float64)
    pc = np.asarray(p_conditioned, dtype=np.float64)
    logp = np.zeros(np.broadcast(pm, pc).shape)
    support = np.ones(logp.shape, dtype=bool)
    for p, expo in ((pm, 1.0 - beta), (pc, beta)):
        if expo != 0.0:
            support &= p > 0
            logp = logp + expo * np.log(np.where(p > 0, p, 1.0))
    logp = np.where(support, logp, -np.inf)
    top = np.max(logp, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ValueError("no action has positive probability under the combined policy")
    w = np.exp(logp - top)
    return w / w.sum(axis=-1, keepdims=True)


def recap_sample_dist(params: PolicyParams, obs, beta: float) -> np.ndarray:
    return recap_combine(forward(params, obs), forward(params, obs, indicator=1), beta)


def policy_distribution(params: PolicyParams, obs, mode: str, beta: float = 1.0) -> np.ndarray:
    if mode == "recap":
        return recap_sample_dist(params, obs, beta)
    return forward(params, obs)


def select_action(params: PolicyParams, obs, mode: str, rng: np.random.Generator,
                  beta: float = 1.0) -> int:
    probs = policy_distribution(params, obs, mode, beta)
    if mode == "greedy":
        return int(np.argmax(probs))
    return min(int(np.searchsorted(np.cumsum(probs), rng.random(), side="right")), len(probs) - 1)


def new_episode_id(rng: np.random.Generator) -> uuid.UUID:
    return uuid.UUID(bytes=rng.bytes(16))


def rollout(policy, domain: DomainParam, config: ActorConfig, rng: np.random.Generator,
            on_step=None) -> EpisodeRecord:
    """Run one episode from reset to a terminal status.

    ``policy`` is a :class:`PolicyParams` or any object with ``act`` and
    ``version``. ``on_step(t, version)`` is an audit hook.
    """
    episode_id = new_episode_id(rng)
    state = envsim.reset(domain, rng, config.horizon)
    obs = envsim.observe(state, domain, rng)
    gate = envsim.InterventionGate(config.gate_window) if config.intervention_enabled else None
    version = policy.version
    observations, actions, rewards, flags = [], [], [], []
    status = Status.RUNNING
    while status == Status.RUNNING:
        engaged = gate is not None and gate.update(domain.distance(state.agent_cell))
        if engaged:
            action = envsim.expert_action(state, domain)
        elif isinstance(policy, PolicyParams):
            action = select_action(policy, obs, config.rollout_mode, rng, config.beta)
        else:
            action = policy.act(state, domain, obs, rng)
        if on_step is not None:
            on_step(len(actions), policy.version)
        result = envsim.step(state, action, domain, rng)
        observations.append(obs)
        actions.append(action)
        rewards.append(result.reward)
        flags.append(engaged)
        state, obs, status = result.state, result.next_observation, result.status
    return EpisodeRecord(episode_id, domain.task_id, config.domain_seed, version,
                         np.array(observations), actions, rewards, flags, status,
                         spans_from_flags(flags), Source.ONLINE, len(actions))


def demo_episode(domain: DomainParam, rng: np.random.Generator, horizon: int,
                 domain_seed: int) -> EpisodeRecord:
    """Expert demonstration, flagged as expert over its full length."""
    cfg = ActorConfig("demo", domain.task_id, domain_seed, horizon=horizon,
                      intervention_enabled=False)
    rec = rollout(ExpertPolicy(), domain, cfg, rng)
    rec.expert_flags[:] = True
    rec.intervention_spans = [(0, len(rec))] if len(rec) else []
    rec.source = Source.OFFLINE
    return rec


def encode_notification(record_or_meta) -> bytes:
    """Episode event: episode_id (16 B), task_id (u32), key length (u16), key."""
    key = record_or_meta.storage_key.encode()
    return (record_or_meta.episode_id.bytes + int(record_or_meta.task_id).to_bytes(4, "little")
            + len(key).to_bytes(2, "little") + key)


def decode_notification(payload: bytes) -> EpisodeMeta:
    if len(payload) < 22:
        raise ValueError("notification too short")
    eid = uuid.UUID(bytes=payload[:16])
    task = int.from_bytes(payload[16:20], "little")
    n = int.from_bytes(payload[20:22], "little")
    key = payload[22:22 + n].decode()
    if len(key) != n:
        raise ValueError("truncated notification key")
    return EpisodeMeta(eid, task, 0, key)


class Actor:
    """One fleet member. Owns a single domain and a single active params slot.

    Incoming checkpoints land in a pending queue via :meth:`poll_checkpoints`
    and are adopted only in :meth:`adopt_pending`, which the loop calls
    between episodes.
    """

    def __init__(self, config: ActorConfig, domain: DomainParam, bus, store,
                 initial_params: PolicyParams, rng: np.random.Generator, on_step=None):
        self.config = config
        self.domain = domain
        self.bus = bus
        self.store = store
        self.params = initial_params
        self.rng = rng
        self.on_step = on_step
        self.outbox: collections.deque[EpisodeRecord] = collections.deque()
        self.dropped = 0
        self.episodes_started = 0
        self.recoveries = 0
        self._pending: list = []
        self._params_sub = bus.subscribe(PARAMS_TOPIC, fanout=True, member=config.actor_id)

    def poll_checkpoints(self) -> None:
        while (env := self._params_sub.poll()) is not None:
            self._pending.append(env.payload)
            self._params_sub.ack(env)

    def adopt_pending(self) -> None:
        self.poll_checkpoints()
        pending, self._pending = self._pending, []
        for payload in pending:
            try:
                self._adopt(payload)
            except CheckpointFormatError as exc:
                log.warning("actor %s: rejected checkpoint (%s); fetching full checkpoint",
                            self.config.actor_id, exc)
                self.recoveries += 1
                self._fetch_full()

    def _adopt(self, payload: bytes) -> None:
        if payload.startswith(CKPT_MAGIC):
            params = decode_checkpoint(payload)
            if params.version >= self.params.version:
                self.params = params
            return
        if not payload.startswith(DELTA_MAGIC):
            raise CheckpointFormatError("unknown params payload")
        delta = decode_delta(payload)
        if delta.new_version <= self.params.version:
            return
        try:
            self.params = apply_delta(self.params, delta)
        except StaleBaseError:
            self._fetch_full()

    def _fetch_full(self) -> None:
        try:
            params = decode_checkpoint(self.store.get_bytes(LATEST_CKPT_KEY))
        except Exception as exc:  # keep serving the current params
            log.warning("actor %s: full checkpoint unavailable (%s)", self.config.actor_id, exc)
            return
        if params.version >= self.params.version:
            self.params = params

    def run_episode(self) -> EpisodeRecord:
        self.adopt_pending()
        self.episodes_started += 1
        record = rollout(self.params, self.domain, self.config, self.rng, self.on_step)
        if len(self.outbox) >= self.config.buffer_capacity:
            self.outbox.popleft()
            self.dropped += 1
        self.outbox.append(record)
        return record

    def flush(self) -> int:
        """Upload and announce buffered episodes; stops at the first failure."""
        sent = 0
        while self.outbox:
            record = self.outbox[0]
            try:
                key = self.store.put_episode(record)
                self.bus.publish(EPISODES_TOPIC, encode_notification(record),
                                 producer=self.config.actor_id)
            except Exception as exc:
                log.warning("actor %s: upload failed (%s); %d buffered",
                            self.config.actor_id, exc, len(self.outbox))
                return sent
            assert key == record.storage_key
            self.outbox.popleft()
            sent += 1
        return sent


def run_actor(config: ActorConfig, bus, store, initial_params: PolicyParams,
              domain: DomainParam | None = None, rng=None, episodes: int | None = None,
              stop=None, backoff: float = 0.05, max_backoff: float = 2.0) -> Actor:
    """Actor main loop: adopt checkpoint, roll out, upload, announce."""
    domain = domain or envsim.sample_domain(config.task_id, config.domain_seed)
    rng = rng if rng is not None else np.random.default_rng([config.domain_seed, config.task_id])
    actor = Actor(config, domain, bus, store, initial_params, rng)
    delay = backoff
    while episodes is None or actor.episodes_started < episodes:
        if stop is not None and stop.is_set():
            break
        actor.run_episode()
        if actor.flush() == 0 and actor.outbox:
            time.sleep(delay)
            delay = min(max_backoff, delay * 2)
        else:
            delay = backoff
    while actor.outbox and not (stop is not None and stop.is_set()):
        if actor.flush() == 0:
            time.sleep(delay)
            delay = min(max_backoff, delay * 2)
    return actor
