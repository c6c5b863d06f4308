"""Experiment protocols on a simulated clock.

One *tick* is one environment step of one actor; ``sim_rate`` ticks make a
simulated second. The learner advances ``learner_rate`` steps per tick. Runs
are discrete-event simulations over the real actor, learner, bus and store
components, so every number except ``wall_ms`` is a function of
``(config, seed)``.

Seed ranges keep data sources disjoint: demo domains start at 10_000, actor
stations at 50_000 and evaluation domains at ``eval_seed`` (900_000).
"""
from __future__ import annotations

import csv
import heapq
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import envsim
from .actor import LATEST_CKPT_KEY, Actor, ActorConfig, ExpertPolicy, demo_episode, rollout
from .algorithms import Recap, advantage_indicator, discounted_returns, make_algorithm
from .bus import Broker
from .config import RunConfig
from .envsim import Status
from .estimators import BCPolicy, LinearValue
from .learner import Learner
from .policy import PolicyParams, encode_checkpoint, save_checkpoint
from .store import EpisodeRecord, EpisodeStore

log = logging.getLogger(__name__)

DEMO_SEED_BASE = 10_000
STATION_SEED_BASE = 50_000

RUN_FIELDS = ("actors", "algorithm", "seed", "wall_ms", "sim_seconds", "sim_steps",
              "learner_step", "eval_success", "episodes_completed", "interventions",
              "publishes")


def parse_fraction(text) -> float:
    try:
        value = float(Fraction(str(text)))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"bad fraction {text!r}") from None
    if not 0 < value <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {text}")
    return value


# -- demo corpus and pretraining ------------------------------------------

def demo_corpus(cfg: RunConfig, per_task: int | None = None) -> list[EpisodeRecord]:
    """Expert demos, interleaved by task; episode ``i`` of task ``t`` depends only on ``(t, i)``.

    Each episode gets its own domain and RNG, so any prefix is a nested subset.
    """
    n = cfg.demo_per_task if per_task is None else per_task
    out = []
    for i in range(n):
        for t in range(cfg.num_tasks):
            ds = DEMO_SEED_BASE + i
            dom = envsim.sample_domain(t, ds, num_tasks=cfg.num_tasks)
            out.append(demo_episode(dom, np.random.default_rng([cfg.demo_seed, t, i]),
                                    cfg.horizon, ds))
    return out


def select_fraction(corpus: list[EpisodeRecord], fraction: float, num_tasks: int):
    """Prefix holding ``round(fraction * per_task)`` demos of every task."""
    per_task = len(corpus) // num_tasks
    keep = max(1, int(round(fraction * per_task)))
    return corpus[:keep * num_tasks]


def stack(records, name: str) -> np.ndarray:
    return np.concatenate([getattr(r, name) for r in records])


def fit_value_records(records, gamma: float) -> np.ndarray:
    x = stack(records, "observations")
    y = np.concatenate([discounted_returns(r.rewards, gamma) for r in records])
    return LinearValue().fit(x, y).coef_


def demo_indicators(records, value_weights, cfg: RunConfig) -> np.ndarray:
    out = []
    for r in records:
        nxt = np.zeros_like(r.observations)
        nxt[:-1] = r.observations[1:]
        term = np.zeros(len(r), dtype=bool)
        term[-1] = True
        out.append(advantage_indicator(value_weights, r.observations, nxt, r.rewards, term,
                                       cfg.epsilon_for(r.task_id), cfg.gamma))
    return np.concatenate(out)


def pretrain(cfg: RunConfig, fraction: float, seed: int, corpus=None) -> PolicyParams:
    """Behavior-clone a base policy on a demo prefix.

    Also fits the frozen value function on the same demos and trains the
    indicator-conditioned head, so the checkpoint serves either algorithm.
    """
    fraction = parse_fraction(fraction)
    corpus = corpus if corpus is not None else demo_corpus(cfg)
    recs = select_fraction(corpus, fraction, cfg.num_tasks)
    vw = fit_value_records(recs, cfg.gamma)
    bc = BCPolicy(epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                  random_state=seed)
    bc.fit(stack(recs, "observations"), stack(recs, "actions"),
           indicator=demo_indicators(recs, vw, cfg), value_weights=vw)
    return bc.params_


# -- evaluation ---------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    success_rate: float
    throughput: float  # completed episodes per simulated hour
    trials: int
    env_steps: int


def eval_mode(cfg: RunConfig, algorithm: str) -> tuple[str, float]:
    return ("recap", cfg.beta_eval) if algorithm == "recap" else ("sample", 1.0)


def evaluate_policy(policy, cfg: RunConfig, trials: int, seed=0, tasks=None,
                    mode: str = "sample", beta: float = 1.0) -> EvalResult:
    """Roll out ``trials`` held-out episodes without interventions.

    ``policy`` is params or an object with ``act``. Nothing is stored, so
    evaluation episodes can never reach a training buffer.
    """
    tasks = tuple(tasks) if tasks is not None else tuple(range(cfg.num_tasks))
    success = steps = 0
    for i in range(trials):
        t = tasks[i % len(tasks)]
        ds = cfg.eval_seed + i
        dom = envsim.sample_domain(t, ds, num_tasks=cfg.num_tasks)
        ac = ActorConfig("eval", t, ds, horizon=cfg.horizon, intervention_enabled=False,
                         rollout_mode=mode, beta=beta)
        rec = rollout(policy, dom, ac, np.random.default_rng([*np.atleast_1d(seed).tolist(), i]))
        success += rec.status == Status.SUCCESS
        steps += len(rec)
    hours = steps / cfg.sim_rate / 3600.0
    return EvalResult(success / trials, trials / hours if hours > 0 else math.inf, trials, steps)


# -- fleet run -------------------------------------------------------------

class SimClock:
    def __init__(self, sim_rate: float):
        self.sim_rate = sim_rate
        self.tick = 0.0

    def now(self) -> float:
        return self.tick / self.sim_rate


class CsvSink:
    """Serialized CSV writer; columns come from the first row."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = None

    def __call__(self, row: dict) -> None:
        if self._writer is None:
            self._writer = csv.DictWriter(self._fh, fieldnames=list(row))
            self._writer.writeheader()
        self._writer.writerow(row)

    def close(self) -> None:
        self._fh.close()


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    target: float = 0.8

    @property
    def final_success(self) -> float | None:
        return self.rows[-1]["eval_success"] if self.rows else None

    @property
    def time_to_target(self) -> float | None:
        """First simulated second at which a frozen-policy evaluation reached the target."""
        for row in self.rows:
            if row["eval_success"] >= self.target:
                return row["sim_seconds"]
        return None

    @property
    def throughput(self) -> float | None:
        """Completed training episodes per simulated hour."""
        if not self.rows or self.rows[-1]["sim_seconds"] <= 0:
            return None
        last = self.rows[-1]
        return last["episodes_completed"] / last["sim_seconds"] * 3600.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RUN_FIELDS)
            w.writeheader()
            w.writerows(self.rows)


def station_seed(seed: int, actor_index: int) -> int:
    return STATION_SEED_BASE + 1000 * seed + actor_index


def build_algorithm(cfg: RunConfig, algorithm: str, base: PolicyParams, offline):
    if algorithm == "recap":
        vw = base.value_weights
        if not np.any(vw):
            vw = fit_value_records(offline, cfg.gamma)
        eps = {t: cfg.epsilon_for(t) for t in range(cfg.num_tasks)}
        return Recap(lr=cfg.lr, gamma=cfg.gamma, epsilon=eps, beta_rollout=cfg.beta_rollout,
                     beta_eval=cfg.beta_eval, value_weights=vw)
    return make_algorithm(algorithm, lr=cfg.lr)


def run_sop(cfg: RunConfig, actors: int, algorithm: str, budget: int, seed: int,
            base: PolicyParams, corpus=None, out_dir=None, on_step=None):
    """Simulate ``actors`` stations plus one learner for ``budget`` learner steps.

    Returns ``(RunMetrics, final_params, learner)``. Evaluations happen at
    step 0 and every ``eval_interval`` steps (and at the end if the budget is
    not a multiple of it).
    """
    if actors < 0 or budget < 0:
        raise ValueError("actors and budget must be nonnegative")
    cfg = cfg.replace(seed=seed, algorithm=algorithm)
    corpus = corpus if corpus is not None else demo_corpus(cfg)
    offline = select_fraction(corpus, cfg.pretrain_fraction, cfg.num_tasks)
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="sop-run-")
        out_dir = tmp.name
    os.makedirs(out_dir, exist_ok=True)
    store = EpisodeStore(os.path.join(out_dir, "store"), fsync=False)
    clock = SimClock(cfg.sim_rate)
    broker = Broker(clock=clock.now)
    sink = CsvSink(os.path.join(out_dir, "learner_metrics.csv"))
    try:
        algo = build_algorithm(cfg, algorithm, base, offline)
        if algorithm == "recap":
            base = base.replace(value_weights=algo.value_weights)
        learner = Learner(cfg.train_config(budget), base, broker, store, algo, offline,
                          on_metrics=sink)
        store.put_bytes(LATEST_CKPT_KEY, encode_checkpoint(base))
        mode = "recap" if algorithm == "recap" else "sample"
        fleet = []
        for i in range(actors):
            t = cfg.tasks[i % len(cfg.tasks)]
            ds = station_seed(seed, i)
            ac = ActorConfig(f"actor-{i}", t, ds, horizon=cfg.horizon,
                             gate_window=cfg.gate_window, rollout_mode=mode,
                             beta=cfg.beta_rollout)
            dom = envsim.sample_domain(t, ds, num_tasks=cfg.num_tasks)
            fleet.append(Actor(ac, dom, broker, store, base, np.random.default_rng([seed, i]),
                               on_step=None if on_step is None else _bind(on_step, i)))
        metrics = RunMetrics(target=cfg.target)
        eval_tasks = sorted(set(cfg.tasks))
        ev_mode, ev_beta = eval_mode(cfg, algorithm)
        counters = {"episodes": 0, "steps": 0, "interventions": 0}
        t0 = time.monotonic()

        def evaluate_now(k: int):
            res = evaluate_policy(learner.params, cfg, cfg.eval_trials, seed=(seed, k),
                                  tasks=eval_tasks, mode=ev_mode, beta=ev_beta)
            metrics.rows.append({
                "actors": actors, "algorithm": algorithm, "seed": seed,
                "wall_ms": round((time.monotonic() - t0) * 1000.0, 1),
                "sim_seconds": clock.now(), "sim_steps": counters["steps"],
                "learner_step": learner.steps, "eval_success": res.success_rate,
                "episodes_completed": counters["episodes"],
                "interventions": counters["interventions"], "publishes": learner.publishes})

        events = []
        for i, actor in enumerate(fleet):
            rec = actor.run_episode()
            heapq.heappush(events, (len(rec), i))
        evaluate_now(0)
        while learner.steps < budget:
            t_step = (learner.steps + 1) / cfg.learner_rate
            while events and events[0][0] <= t_step:
                tick, i = heapq.heappop(events)
                clock.tick = tick
                actor = fleet[i]
                done = actor.outbox[-1]
                if actor.flush() == 0:
                    raise RuntimeError(f"actor {i} failed to upload")
                counters["episodes"] += 1
                counters["steps"] += len(done)
                counters["interventions"] += len(done.intervention_spans)
                rec = actor.run_episode()
                heapq.heappush(events, (tick + len(rec), i))
            clock.tick = t_step
            learner.drain()
            learner.step()
            if learner.steps % cfg.eval_interval == 0 or learner.steps == budget:
                evaluate_now(learner.steps)
        if out_dir is not None and tmp is None:
            metrics.write_csv(os.path.join(out_dir, "run_metrics.csv"))
            save_checkpoint(learner.params, os.path.join(out_dir, "final.ckpt"))
        return metrics, learner.params, learner
    finally:
        sink.close()
        if tmp is not None:
            tmp.cleanup()


def _bind(fn, index):
    return lambda t, version: fn(index, t, version)


# -- reports -----------------------------------------------------------------

SUMMARY_FIELDS = ("file", "actors", "algorithm", "seed", "final_success", "time_to_target",
                  "throughput", "speedup")


def read_run_metrics(path, target: float = 0.8) -> RunMetrics:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, raw in enumerate(reader, 2):
            try:
                row = {"actors": int(raw["actors"]), "algorithm": raw["algorithm"],
                       "seed": int(raw["seed"])}
                for k in ("wall_ms", "sim_seconds", "eval_success"):
                    row[k] = float(raw[k])
                for k in ("sim_steps", "learner_step", "episodes_completed", "interventions",
                          "publishes"):
                    row[k] = int(raw[k])
                if not 0.0 <= row["eval_success"] <= 1.0:
                    raise ValueError("success rate outside [0, 1]")
            except (KeyError, TypeError, ValueError) as exc:
                log.warning("%s:%d: skipping malformed row (%s)", path, lineno, exc)
                continue
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no metrics rows")
    return RunMetrics(rows, target)


def summarize(paths, baseline: int = 0, target: float = 0.8) -> list[dict]:
    """One summary row per metrics file; speedup is relative to ``paths[baseline]``."""
    if not paths:
        raise ValueError("need at least one metrics file")
    runs = [read_run_metrics(p, target) for p in paths]
    base_ttt = runs[baseline].time_to_target
    out = []
    for path, run in zip(paths, runs):
        first = run.rows[0]
        ttt = run.time_to_target
        speedup = ""
        if len(runs) > 1 and base_ttt is not None and ttt:
            speedup = base_ttt / ttt
        out.append({"file": os.fspath(path), "actors": first["actors"],
                    "algorithm": first["algorithm"], "seed": first["seed"],
                    "final_success": run.final_success,
                    "time_to_target": "" if ttt is None else ttt,
                    "throughput": "" if run.throughput is None else run.throughput,
                    "speedup": speedup})
    return out


def write_summary(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
    w.writeheader()
    w.writerows(rows)


def expert_eval(cfg: RunConfig, trials: int, seed: int = 0) -> EvalResult:
    return evaluate_policy(ExpertPolicy(), cfg, trials, seed)
