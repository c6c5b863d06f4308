"""Centralized learner: per-task online/offline frame buffers, the
loss-driven online/offline mixing sampler, episode ingest, and the training
loop that publishes checkpoints every ``publish_interval`` steps."""
from __future__ import annotations

import collections
import logging
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .actor import EPISODES_TOPIC, LATEST_CKPT_KEY, PARAMS_TOPIC, decode_notification
from .policy import PolicyParams, delta_encode, encode_checkpoint, encode_delta
from .store import EpisodeIndex, EpisodeMeta, EpisodeRecord, IntegrityError, NotFoundError

log = logging.getLogger(__name__)

ONLINE, OFFLINE = 0, 1
_BATCH_FIELDS = ("obs", "next_obs", "actions", "rewards", "expert", "terminal", "indicator")


@dataclass
class TrainConfig:
    num_tasks: int = 3
    batch_size: int = 64
    publish_interval: int = 25
    lr: float = 0.05
    total_steps: int = 1000
    algorithm: str = "hgdagger"
    alpha: float = 1.5
    window: int = 200
    clip_lo: float = 0.2
    clip_hi: float = 0.8
    online_capacity: int = 200_000
    seed: int = 0

    def __post_init__(self):
        if self.publish_interval < 1:
            raise ValueError("publish_interval must be >= 1")
        if self.batch_size < self.num_tasks:
            raise ValueError("batch_size must be >= num_tasks")
        if not self.alpha > 1:
            raise ValueError("alpha must exceed 1")
        if not 0 < self.clip_lo < self.clip_hi < 1:
            raise ValueError("clip bounds must satisfy 0 < lo < hi < 1")


class FrameBuffer:
    """FIFO ring of frames with per-frame episode provenance.

    Storage grows by doubling until ``capacity``; after that the oldest frame
    is overwritten.
    """

    def __init__(self, feature_dim: int, capacity: int):
        self.capacity = capacity
        self.feature_dim = feature_dim
        self._alloc(min(capacity, 1024))
        self.size = 0
        self._head = 0  # next write slot once full

    def _alloc(self, n):
        d = self.feature_dim
        self.obs = np.zeros((n, d))
        self.next_obs = np.zeros((n, d))
        self.actions = np.zeros(n, dtype=np.int64)
        self.rewards = np.zeros(n)
        self.expert = np.zeros(n, dtype=bool)
        self.terminal = np.zeros(n, dtype=bool)
        self.indicator = np.full(n, np.nan)
        self.episode = np.zeros(n, dtype=np.int64)

    _FIELDS = ("obs", "next_obs", "actions", "rewards", "expert", "terminal", "indicator", "episode")

    def _grow(self, need):
        n = len(self.actions)
        if need <= n or n >= self.capacity:
            return
        new_n = min(self.capacity, max(need, 2 * n))
        old = {f: getattr(self, f) for f in self._FIELDS}
        self._alloc(new_n)
        for f, arr in old.items():
            getattr(self, f)[:self.size] = arr[:self.size]

    def __len__(self):
        return self.size

    def add_episode(self, record: EpisodeRecord, episode_no: int) -> None:
        n = len(record)
        if n == 0:
            return
        obs = record.observations
        nxt = np.empty_like(obs)
        nxt[:-1] = obs[1:]
        nxt[-1] = 0.0
        term = np.zeros(n, dtype=bool)
        term[-1] = True
        cols = {"obs": obs, "next_obs": nxt, "actions": record.actions, "rewards": record.rewards,
                "expert": record.expert_flags, "terminal": term, "indicator": record.advantage,
                "episode": np.full(n, episode_no)}
        if n > self.capacity:
            cols = {k: v[-self.capacity:] for k, v in cols.items()}
            n = self.capacity
        if self.size + n <= self.capacity:
            self._grow(self.size + n)
            slots = np.arange(self.size, self.size + n)
            self.size += n
        else:
            self._grow(self.capacity)
            fill = self.capacity - self.size
            wrapped = (self._head + np.arange(n - fill)) % self.capacity
            slots = np.concatenate([np.arange(self.size, self.capacity), wrapped])
            self._head = (self._head + n - fill) % self.capacity
            self.size = self.capacity
        for f, v in cols.items():
            getattr(self, f)[slots] = v

    def episode_ids(self) -> set[int]:
        return set(np.unique(self.episode[:self.size]).tolist())


@dataclass
class Batch:
    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    expert: np.ndarray
    terminal: np.ndarray
    indicator: np.ndarray
    tasks: np.ndarray
    origins: np.ndarray

    def __len__(self):
        return len(self.actions)


class BufferSet:
    """Per-task online (streaming, bounded) and offline (static) buffers."""

    def __init__(self, num_tasks: int, feature_dim: int, online_capacity: int = 200_000):
        self.num_tasks = num_tasks
        self.feature_dim = feature_dim
        self.online = [FrameBuffer(feature_dim, online_capacity) for _ in range(num_tasks)]
        self.offline: list[FrameBuffer | None] = [None] * num_tasks
        self.lock = threading.Lock()
        self._episode_numbers: dict = {}

    def _episode_no(self, episode_id) -> int:
        return self._episode_numbers.setdefault(episode_id, len(self._episode_numbers))

    def load_offline(self, records) -> None:
        by_task: dict[int, list[EpisodeRecord]] = collections.defaultdict(list)
        for r in records:
            by_task[r.task_id].append(r)
        for task, recs in by_task.items():
            total = sum(len(r) for r in recs)
            buf = FrameBuffer(self.feature_dim, max(total, 1))
            for r in recs:
                buf.add_episode(r, self._episode_no(r.episode_id))
            self.offline[task] = buf

    def add_online(self, record: EpisodeRecord) -> None:
        with self.lock:
            self.online[record.task_id].add_episode(record, self._episode_no(record.episode_id))

    def online_sizes(self) -> list[int]:
        return [len(b) for b in self.online]

    def offline_sizes(self) -> list[int]:
        return [len(b) if b is not None else 0 for b in self.offline]


def clip_mix(value: float, lo: float = 0.2, hi: float = 0.8) -> float:
    return min(hi, max(lo, value))


def mix_ratio(mean_online: float, mean_offline: float, alpha: float) -> float:
    """exp(a*l_on) / (exp(a*l_on) + exp(l_off)), written as a logistic."""
    z = mean_offline - alpha * mean_online
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


class AdaptiveSampler:
    """Sliding windows of per-item losses for each (task, origin) pair."""

    def __init__(self, num_tasks: int, alpha: float = 1.5, window: int = 200,
                 clip: tuple[float, float] = (0.2, 0.8), cold_start: float = 0.5):
        if not alpha > 1:
            raise ValueError("alpha must exceed 1")
        lo, hi = clip
        if not 0 < lo < hi < 1:
            raise ValueError("clip bounds must satisfy 0 < lo < hi < 1")
        self.num_tasks = num_tasks
        self.alpha = alpha
        self.window = window
        self.clip = (lo, hi)
        self.cold_start = cold_start
        self.windows = {(m, o): collections.deque(maxlen=window)
                        for m in range(num_tasks) for o in (ONLINE, OFFLINE)}
        self.dropped = 0

    def record_losses(self, tasks, origins, losses) -> None:
        for m, o, loss in zip(np.asarray(tasks).tolist(), np.asarray(origins).tolist(),
                              np.asarray(losses, dtype=np.float64).tolist()):
            if not math.isfinite(loss):
                self.dropped += 1
                log.warning("dropping non-finite loss for task %d origin %d", m, o)
                continue
            self.windows[(m, o)].append(loss)

    def mean(self, task: int, origin: int) -> float | None:
        w = self.windows[(task, origin)]
        return sum(w) / len(w) if w else None

    def raw_mix(self, task: int) -> float | None:
        on, off = self.mean(task, ONLINE), self.mean(task, OFFLINE)
        if on is None or off is None:
            return None
        return mix_ratio(on, off, self.alpha)

    def compute_mix(self, task: int) -> float:
        raw = self.raw_mix(task)
        if raw is None:
            return self.cold_start
        return clip_mix(raw, *self.clip)


def compute_mix(mean_online: float, mean_offline: float, alpha: float,
                clip: tuple[float, float] = (0.2, 0.8)) -> float:
    return clip_mix(mix_ratio(mean_online, mean_offline, alpha), *clip)


def sample_batch(buffers: BufferSet, sampler: AdaptiveSampler, batch_size: int,
                 rng: np.random.Generator) -> Batch:
    """Uniform task per item, then online with prob. omega_on (if nonempty), else offline."""
    m = buffers.num_tasks
    for t in range(m):
        if buffers.offline[t] is None or len(buffers.offline[t]) == 0:
            if len(buffers.online[t]) == 0:
                raise ValueError(f"task {t} has no frames in any buffer")
    with buffers.lock:
        tasks = rng.integers(m, size=batch_size)
        coins = rng.random(batch_size)
        picks = rng.random(batch_size)
        origins = np.empty(batch_size, dtype=np.int64)
        index = np.empty(batch_size, dtype=np.int64)
        for t in range(m):
            sel = tasks == t
            if not sel.any():
                continue
            n_on = len(buffers.online[t])
            off = buffers.offline[t]
            n_off = len(off) if off is not None else 0
            omega = sampler.compute_mix(t) if n_on and n_off else (1.0 if n_on else 0.0)
            org = np.where(coins[sel] < omega, ONLINE, OFFLINE)
            sizes = np.where(org == ONLINE, n_on, n_off)
            origins[sel] = org
            index[sel] = np.minimum((picks[sel] * sizes).astype(np.int64), sizes - 1)
        out = {}
        d = buffers.feature_dim
        out["obs"] = np.empty((batch_size, d))
        out["next_obs"] = np.empty((batch_size, d))
        out["actions"] = np.empty(batch_size, dtype=np.int64)
        out["rewards"] = np.empty(batch_size)
        out["expert"] = np.empty(batch_size, dtype=bool)
        out["terminal"] = np.empty(batch_size, dtype=bool)
        out["indicator"] = np.empty(batch_size)
        for t in range(m):
            for o, buf in ((ONLINE, buffers.online[t]), (OFFLINE, buffers.offline[t])):
                sel = (tasks == t) & (origins == o)
                if not sel.any():
                    continue
                idx = index[sel]
                for f in _BATCH_FIELDS:
                    out[f][sel] = getattr(buf, f)[idx]
    return Batch(tasks=tasks, origins=origins, **out)


class Learner:
    """Single-threaded trainer fed by episode notifications.

    ``algorithm`` is any object with ``update(params, batch)`` returning
    ``(params, per_item_losses)`` and ``prepare_record(record)``.
    ``on_metrics`` receives one dict per training step.
    """

    def __init__(self, config: TrainConfig, params: PolicyParams, bus, store, algorithm,
                 offline_records=(), on_metrics=None, group: str = "learner",
                 publish_retries: int = 3):
        self.config = config
        self.params = params
        self.published = params
        self.bus = bus
        self.store = store
        self.algorithm = algorithm
        self.on_metrics = on_metrics
        self.publish_retries = publish_retries
        self.buffers = BufferSet(config.num_tasks, params.feature_dim, config.online_capacity)
        self.buffers.load_offline(algorithm.prepare_record(r) for r in offline_records)
        self.sampler = AdaptiveSampler(config.num_tasks, config.alpha, config.window,
                                       (config.clip_lo, config.clip_hi))
        self.index = EpisodeIndex()
        self.rng = np.random.default_rng([config.seed, 0x1EA4])
        self.steps = 0
        self.publishes = 0
        self.failed_publishes = 0
        self.skipped_steps = 0
        self.duplicates = 0
        self.quarantined: list[str] = []
        self._t0 = time.monotonic()
        self._sub = bus.subscribe(EPISODES_TOPIC, group, member="learner") if bus is not None else None

    # -- ingest ----------------------------------------------------------
    def ingest(self, meta: EpisodeMeta) -> bool:
        """Fetch and buffer one announced episode.

        Returns True if the episode was added, False if it was a duplicate or
        quarantined. :class:`NotFoundError` and other store errors propagate
        so the caller can leave the notification unacked.
        """
        if meta.episode_id in self.index:
            self.duplicates += 1
            return False
        try:
            record = self.store.get_episode(meta.storage_key)
            if record.episode_id != meta.episode_id:
                raise IntegrityError("notification and payload disagree on episode id")
        except IntegrityError as exc:
            log.warning("quarantining %s: %s", meta.storage_key, exc)
            try:
                self.quarantined.append(self.store.quarantine(meta.storage_key))
            except OSError:
                self.quarantined.append(meta.storage_key)
            return False
        record = self.algorithm.prepare_record(record)
        if not self.index.insert(EpisodeMeta.from_record(record, meta.storage_key)):
            self.duplicates += 1
            return False
        self.buffers.add_online(record)
        return True

    def drain(self, limit: int | None = None) -> int:
        """Process pending notifications; unfetchable ones stay unacked for redelivery."""
        if self._sub is None:
            return 0
        added = handled = 0
        while limit is None or handled < limit:
            env = self._sub.poll()
            if env is None:
                break
            handled += 1
            try:
                meta = decode_notification(env.payload)
            except ValueError as exc:
                log.warning("dropping malformed notification seq %d: %s", env.seq, exc)
                self._sub.ack(env)
                continue
            try:
                added += self.ingest(meta)
            except (NotFoundError, OSError) as exc:
                log.info("fetch of %s failed (%s); awaiting redelivery", meta.storage_key, exc)
                continue
            self._sub.ack(env)
        return added

    # -- training ----------------------------------------------------------
    def step(self) -> None:
        cfg = self.config
        batch = sample_batch(self.buffers, self.sampler, cfg.batch_size, self.rng)
        try:
            params, losses = self.algorithm.update(self.params, batch)
        except (ValueError, FloatingPointError) as exc:
            self.skipped_steps += 1
            log.warning("step %d skipped: %s", self.steps + 1, exc)
            losses = None
        else:
            self.params = params
            self.sampler.record_losses(batch.tasks, batch.origins, losses)
        self.steps += 1
        if self.steps % cfg.publish_interval == 0:
            self.publish()
        if self.on_metrics is not None:
            self.on_metrics(self._metrics_row(batch, losses))

    def publish(self) -> bool:
        """Write the full checkpoint to the store, then announce the delta."""
        delta = delta_encode(self.published, self.params)
        payload = encode_delta(delta)
        for attempt in range(1, self.publish_retries + 1):
            try:
                if self.store is not None:
                    self.store.put_bytes(LATEST_CKPT_KEY, encode_checkpoint(self.params))
                if self.bus is not None:
                    self.bus.publish(PARAMS_TOPIC, payload, producer="learner")
            except Exception as exc:
                log.warning("publish attempt %d failed: %s", attempt, exc)
                continue
            self.published = self.params
            self.publishes += 1
            return True
        self.failed_publishes += 1
        return False

    def train(self, steps: int | None = None, stop=None) -> PolicyParams:
        """Drain and step until ``steps`` more steps (default: up to ``total_steps``)."""
        target = self.steps + steps if steps is not None else self.config.total_steps
        while self.steps < target:
            if stop is not None and stop.is_set():
                break
            self.drain()
            self.step()
        return self.params

    def _metrics_row(self, batch: Batch, losses) -> dict:
        m = self.config.num_tasks
        row = {"step": self.steps, "wall_ms": round((time.monotonic() - self._t0) * 1000.0, 3),
               "loss": float(np.mean(losses)) if losses is not None else float("nan"),
               "online_fraction": float(np.mean(batch.origins == ONLINE)),
               "publishes": self.publishes, "version": self.params.version,
               "episodes": len(self.index)}
        for t in range(m):
            sel = batch.tasks == t
            row[f"loss_{t}"] = float(np.mean(losses[sel])) if losses is not None and sel.any() else float("nan")
            row[f"omega_{t}"] = self.sampler.compute_mix(t)
            row[f"online_{t}"] = len(self.buffers.online[t])
            row[f"offline_{t}"] = self.buffers.offline_sizes()[t]
        return row


def train_loop(config: TrainConfig, learner: Learner, stop=None) -> PolicyParams:
    return learner.train(stop=stop)
