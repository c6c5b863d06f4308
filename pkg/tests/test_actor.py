import logging

import numpy as np
import pytest

from fleetlearn import actor as actor_mod
from fleetlearn import envsim
from fleetlearn.actor import (EPISODES_TOPIC, LATEST_CKPT_KEY, PARAMS_TOPIC, Actor, ActorConfig,
                              ExpertPolicy, decode_notification, encode_notification,
                              recap_combine, rollout, run_actor, select_action)
from fleetlearn.bus import Broker
from fleetlearn.envsim import Status
from fleetlearn.policy import (PolicyParams, delta_encode, encode_checkpoint, encode_delta,
                               sgd_step, zero_grad)
from fleetlearn.store import EpisodeStore

from conftest import quiet_domain

D = envsim.feature_dim()


def bump(params, k=1):
    for _ in range(k):
        params = sgd_step(params, zero_grad(params), 0.1)
    return params


def test_interventions_make_every_episode_succeed():
    p = PolicyParams.zeros(D)
    for seed in range(100):
        dom = quiet_domain(seed % 3, seed)
        rec = rollout(p, dom, ActorConfig("a", dom.task_id, seed), np.random.default_rng(seed))
        assert rec.status == Status.SUCCESS
        rec.validate()
        assert rec.expert_flags.any() == bool(rec.intervention_spans)


def test_uniform_policy_times_out_on_short_horizon():
    p = PolicyParams.zeros(D)
    timeouts = 0
    for seed in range(200):
        dom = envsim.sample_domain(seed % 3, seed)
        cfg = ActorConfig("a", dom.task_id, seed, horizon=10, intervention_enabled=False)
        timeouts += rollout(p, dom, cfg, np.random.default_rng(seed)).status == Status.TIMEOUT
    assert timeouts / 200 > 0.9


def test_expert_policy_needs_no_interventions():
    for seed in range(30):
        dom = quiet_domain(seed % 3, seed)
        rec = rollout(ExpertPolicy(), dom, ActorConfig("a", dom.task_id, seed),
                      np.random.default_rng(seed))
        assert rec.intervention_spans == [] and not rec.expert_flags.any()


def test_record_carries_params_version():
    p = bump(PolicyParams.zeros(D), 9)
    dom = envsim.sample_domain(0, 1)
    rec = rollout(p, dom, ActorConfig("a", 0, 1), np.random.default_rng(0))
    assert rec.policy_version == 9 and rec.sim_duration == len(rec)


def test_config_validation():
    with pytest.raises(ValueError):
        ActorConfig("a", 0, 0, gate_window=1)
    with pytest.raises(ValueError):
        ActorConfig("a", 0, 0, rollout_mode="recap", beta=-1)
    with pytest.raises(ValueError):
        ActorConfig("a", 0, 0, rollout_mode="boltzmann")


def test_greedy_and_recap_modes():
    rng = np.random.default_rng(0)
    w = np.zeros((5, D))
    w[2] = 1.0
    p = PolicyParams.zeros(D).replace(marginal_weights=w)
    obs = np.ones(D)
    assert select_action(p, obs, "greedy", rng) == 2
    # with beta 0 recap sampling follows the marginal head
    draws = [select_action(p, obs, "recap", rng, beta=0.0) for _ in range(2000)]
    probs = np.exp(w @ obs) / np.exp(w @ obs).sum()
    assert abs(np.mean(np.array(draws) == 2) - probs[2]) < 0.03


def test_recap_combine_support():
    # beta 1 drops the marginal factor entirely
    assert np.allclose(recap_combine([0.5, 0.5, 0.0], [0.9, 0.0, 0.1], 1.0), [0.9, 0.0, 0.1])
    out = recap_combine([0.5, 0.5, 0.0], [0.9, 0.0, 0.1], 0.5)
    assert out.tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        recap_combine([1.0, 0.0], [0.0, 1.0], 0.5)


def test_notification_codec():
    dom = envsim.sample_domain(1, 3)
    rec = rollout(ExpertPolicy(), dom, ActorConfig("a", 1, 3), np.random.default_rng(0))
    meta = decode_notification(encode_notification(rec))
    assert (meta.episode_id, meta.task_id, meta.storage_key) == (rec.episode_id, 1, rec.storage_key)
    with pytest.raises(ValueError):
        decode_notification(b"short")


def make_actor(tmp_path, params, bus=None, store=None, seed=0, task=0, on_step=None):
    bus = bus or Broker()
    store = store or EpisodeStore(tmp_path, fsync=False)
    dom = envsim.sample_domain(task, 50_000 + seed)
    cfg = ActorConfig(f"actor-{seed}", task, 50_000 + seed)
    return Actor(cfg, dom, bus, store, params, np.random.default_rng([7, seed]), on_step=on_step)


def test_checkpoint_published_mid_episode_applies_at_boundary(tmp_path):
    bus = Broker()
    old = PolicyParams.zeros(D)
    new = bump(old, 25)
    published = []

    def on_step(t, version):
        if actor.episodes_started == 5 and t == 1 and not published:
            bus.publish(PARAMS_TOPIC, encode_delta(delta_encode(old, new)))
            published.append(t)

    actor = make_actor(tmp_path, old, bus=bus, on_step=on_step)
    versions = [actor.run_episode().policy_version for _ in range(10)]
    assert published
    assert versions == [0] * 5 + [25] * 5


def test_steps_within_an_episode_see_one_version(tmp_path):
    bus = Broker()
    params = [PolicyParams.zeros(D)]
    seen = []

    def on_step(t, version):
        seen.append((actor.episodes_started, version))
        nxt = bump(params[-1])
        bus.publish(PARAMS_TOPIC, encode_delta(delta_encode(params[-1], nxt)))
        params.append(nxt)

    actor = make_actor(tmp_path, params[0], bus=bus, on_step=on_step)
    for _ in range(20):
        rec = actor.run_episode()
        versions = {v for ep, v in seen if ep == actor.episodes_started}
        assert versions == {rec.policy_version}
    assert actor.params.version > 20


def test_corrupted_delta_keeps_previous_params(tmp_path, caplog):
    bus = Broker()
    store = EpisodeStore(tmp_path, fsync=False)
    old = PolicyParams.zeros(D)
    actor = make_actor(tmp_path, old, bus=bus, store=store)
    new = old.replace(version=3, value_weights=np.ones(D))
    raw = bytearray(encode_delta(delta_encode(old, new)))
    raw[-12] ^= 0x01
    bus.publish(PARAMS_TOPIC, bytes(raw))
    with caplog.at_level(logging.WARNING):
        rec = actor.run_episode()
    assert rec.policy_version == 0 and actor.params == old
    assert actor.recoveries == 1 and "rejected checkpoint" in caplog.text


def test_corrupted_delta_recovers_from_store_checkpoint(tmp_path):
    bus = Broker()
    store = EpisodeStore(tmp_path, fsync=False)
    old = PolicyParams.zeros(D)
    new = bump(old, 4)
    store.put_bytes(LATEST_CKPT_KEY, encode_checkpoint(new))
    actor = make_actor(tmp_path, old, bus=bus, store=store)
    bus.publish(PARAMS_TOPIC, b"SOPDLT1garbage")
    assert actor.run_episode().policy_version == 4


def test_stale_delta_fetches_full_checkpoint(tmp_path):
    bus = Broker()
    store = EpisodeStore(tmp_path, fsync=False)
    p0 = PolicyParams.zeros(D)
    p1, p2 = bump(p0, 1), bump(p0, 2)
    store.put_bytes(LATEST_CKPT_KEY, encode_checkpoint(p2))
    actor = make_actor(tmp_path, p0, bus=bus, store=store)
    bus.publish(PARAMS_TOPIC, encode_delta(delta_encode(p1, p2)))  # missed p0 -> p1
    actor.run_episode()
    assert actor.params == p2


def test_uploads_write_store_then_notify(tmp_path):
    bus = Broker()
    sub = bus.subscribe(EPISODES_TOPIC, "learner")
    actor = make_actor(tmp_path, PolicyParams.zeros(D), bus=bus)
    recs = [actor.run_episode() for _ in range(3)]
    assert actor.flush() == 3
    metas = [decode_notification(e.payload) for e in sub]
    assert [m.episode_id for m in metas] == [r.episode_id for r in recs]
    for m, r in zip(metas, recs):
        assert actor.store.get_episode(m.storage_key).equals(r)


class FakeTime:
    def __init__(self):
        self.now = 0.0

    def sleep(self, s):
        self.now += s

    def monotonic(self):
        return self.now


class OutageBus:
    """Broker wrapper whose publish fails until the fake clock passes ``until``."""

    def __init__(self, inner, clock, until):
        self.inner, self.clock, self.until = inner, clock, until
        self.failures = 0

    def subscribe(self, *a, **kw):
        return self.inner.subscribe(*a, **kw)

    def publish(self, topic, payload, producer=""):
        if self.clock.now < self.until:
            self.failures += 1
            raise ConnectionError("broker unreachable")
        return self.inner.publish(topic, payload, producer)


def test_bus_outage_loses_nothing(tmp_path, monkeypatch):
    fake = FakeTime()
    monkeypatch.setattr(actor_mod, "time", fake)
    broker = Broker()
    sub = broker.subscribe(EPISODES_TOPIC, "learner")
    bus = OutageBus(broker, fake, until=30.0)
    store = EpisodeStore(tmp_path, fsync=False)
    cfg = ActorConfig("a", 0, 5)
    actor = run_actor(cfg, bus, store, PolicyParams.zeros(D), episodes=12,
                      rng=np.random.default_rng(0), backoff=1.0, max_backoff=4.0)
    assert bus.failures > 0 and fake.now >= 30.0
    assert actor.episodes_started == 12 and actor.dropped == 0 and not actor.outbox
    ids = [decode_notification(e.payload).episode_id for e in sub]
    assert len(ids) == len(set(ids)) == 12
    assert len(store.keys("episodes/")) == 12


class FailingStore(EpisodeStore):
    def __init__(self, root, failures):
        super().__init__(root, fsync=False)
        self.failures = failures

    def put_bytes(self, key, data):
        if self.failures > 0:
            self.failures -= 1
            raise OSError("transient")
        return super().put_bytes(key, data)


def test_store_outage_within_buffer_capacity(tmp_path):
    bus = Broker()
    sub = bus.subscribe(EPISODES_TOPIC, "learner")
    store = FailingStore(tmp_path, failures=40)
    actor = make_actor(tmp_path, PolicyParams.zeros(D), bus=bus, store=store)
    started = 0
    for _ in range(60):
        actor.run_episode()
        started += 1
        actor.flush()  # fails on the first 40 attempts
    while actor.outbox:
        actor.flush()
    assert actor.dropped == 0
    assert len(list(sub)) == started == len(store.keys("episodes/"))


def test_buffer_overflow_drops_oldest(tmp_path):
    store = FailingStore(tmp_path, failures=10**6)
    actor = make_actor(tmp_path, PolicyParams.zeros(D), store=store)
    actor.config = ActorConfig("a", 0, 50_000, buffer_capacity=4)
    recs = [actor.run_episode() for _ in range(6)]
    assert actor.dropped == 2
    assert [r.episode_id for r in actor.outbox] == [r.episode_id for r in recs[2:]]


def test_actors_are_isolated(tmp_path):
    p = PolicyParams.zeros(D)

    def stream(n_actors):
        bus = Broker()
        store = EpisodeStore(tmp_path / f"n{n_actors}", fsync=False)
        fleet = [make_actor(tmp_path, p, bus=bus, store=store, seed=i, task=i % 3)
                 for i in range(n_actors)]
        out = []
        for _ in range(8):
            for i, a in enumerate(fleet):
                rec = a.run_episode()
                a.flush()
                if i == 0:
                    out.append(rec)
        return out

    alone, crowded = stream(1), stream(4)
    assert all(a.equals(b) for a, b in zip(alone, crowded))
