import os
import uuid

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fleetlearn.envsim import Status
from fleetlearn.store import (EpisodeIndex, EpisodeMeta, EpisodeRecord, EpisodeStore,
                              IntegrityError, NotFoundError, Source, decode_episode,
                              encode_episode, spans_from_flags)

D = 16


def make_record(rng, n=20, task=0, version=0, spans=None):
    flags = np.zeros(n, dtype=bool)
    spans = spans if spans is not None else ([(2, 5)] if n > 5 else [])
    for a, b in spans:
        flags[a:b] = True
    rewards = np.zeros(n)
    status = Status.TIMEOUT
    if n and rng.random() < 0.5:
        rewards[-1] = 1.0
        status = Status.SUCCESS
    return EpisodeRecord(uuid.UUID(bytes=rng.bytes(16)), task, int(rng.integers(2**63)), version,
                         rng.normal(size=(n, D)), rng.integers(5, size=n), rewards, flags, status,
                         spans, Source.ONLINE, n)


def test_put_get_round_trip(tmp_path):
    store = EpisodeStore(tmp_path)
    rec = make_record(np.random.default_rng(0))
    key = store.put_episode(rec)
    assert key == f"episodes/0/{rec.episode_id.hex}"
    assert store.get_bytes(key) == encode_episode(rec)
    assert store.get_episode(key).equals(rec)


def test_thousand_frame_episode(tmp_path):
    store = EpisodeStore(tmp_path, fsync=False)
    rec = make_record(np.random.default_rng(1), n=1000, spans=[(0, 10), (500, 1000)])
    assert store.get_episode(store.put_episode(rec)).equals(rec)


def test_duplicate_put_is_idempotent(tmp_path):
    store = EpisodeStore(tmp_path, fsync=False)
    rec = make_record(np.random.default_rng(2))
    store.put_episode(rec)
    first = store.get_bytes(rec.storage_key)
    store.put_episode(rec)
    assert store.get_bytes(rec.storage_key) == first
    assert store.keys() == [rec.storage_key]


def test_unknown_key(tmp_path):
    with pytest.raises(NotFoundError):
        EpisodeStore(tmp_path).get_episode("episodes/0/nothing")


def test_every_flipped_byte_is_detected():
    raw = encode_episode(make_record(np.random.default_rng(3), n=6))
    for i in range(len(raw)):
        for bit in (0x01, 0x80):
            bad = bytearray(raw)
            bad[i] ^= bit
            with pytest.raises(IntegrityError):
                decode_episode(bytes(bad))


def test_flipped_byte_on_disk(tmp_path):
    store = EpisodeStore(tmp_path, fsync=False)
    key = store.put_episode(make_record(np.random.default_rng(4)))
    path = os.path.join(tmp_path, *key.split("/"))
    data = bytearray(open(path, "rb").read())
    data[len(data) // 2] ^= 0x10
    open(path, "wb").write(bytes(data))
    with pytest.raises(IntegrityError):
        store.get_episode(key)


def test_truncated_payload():
    raw = encode_episode(make_record(np.random.default_rng(5)))
    for n in (0, 5, 30, len(raw) - 1):
        with pytest.raises(IntegrityError):
            decode_episode(raw[:n])


def test_invalid_records_rejected_on_encode():
    rng = np.random.default_rng(6)
    rec = make_record(rng, n=10, spans=[(2, 5)])
    rec.expert_flags[7] = True
    with pytest.raises(ValueError):
        encode_episode(rec)
    rec = make_record(rng, n=10, spans=[(4, 6), (5, 8)])
    with pytest.raises(ValueError):
        encode_episode(rec)


def test_spans_from_flags():
    assert spans_from_flags([0, 1, 1, 0, 1]) == [(1, 3), (4, 5)]
    assert spans_from_flags([]) == []
    assert spans_from_flags([1, 1]) == [(0, 2)]


@st.composite
def records(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(0, 60))
    cuts = sorted(draw(st.lists(st.integers(0, n), max_size=6, unique=True)))
    spans = [(a, b) for a, b in zip(cuts[::2], cuts[1::2]) if a < b]
    rng = np.random.default_rng(seed)
    rec = make_record(rng, n=n, task=draw(st.integers(0, 2)), version=draw(st.integers(0, 2**40)),
                      spans=spans)
    if draw(st.booleans()):
        adv = rng.integers(2, size=n).astype(float)
        adv[rng.random(n) < 0.2] = np.nan
        rec.advantage = adv
    rec.source = draw(st.sampled_from(list(Source)))
    return rec


@settings(max_examples=150, deadline=None)
@given(records())
def test_codec_round_trip(rec):
    assert decode_episode(encode_episode(rec)).equals(rec)


def test_write_failure_leaves_nothing(tmp_path):
    store = EpisodeStore(tmp_path, chunk_size=64, fsync=False)
    rec = make_record(np.random.default_rng(7), n=30)

    def boom(point):
        if point == "write:128":
            raise OSError("disk full")
    store._fault_hook = boom
    with pytest.raises(OSError):
        store.put_episode(rec)
    assert not store.exists(rec.storage_key)
    assert os.listdir(os.path.join(tmp_path, "episodes", "0")) == []


def _crash_points(chunk_size, size):
    return ["open"] + [f"write:{i}" for i in range(0, size, chunk_size)] + ["fsync", "renamed"]


def crash_injection(root, n_points=50):
    """Fork a writer per crash point and ``_exit`` it there; returns (visible, absent)."""
    rng = np.random.default_rng(8)
    rec = make_record(rng, n=40)
    size = len(encode_episode(rec))
    writes = n_points - 3  # plus open, fsync and renamed
    chunk = next(c for c in range(1, size + 1) if -(-size // c) == writes)
    points = _crash_points(chunk, size)
    assert len(points) == n_points
    outcomes = []
    for point in points:
        rec.episode_id = uuid.UUID(bytes=rng.bytes(16))
        store = EpisodeStore(root, chunk_size=chunk, fsync=False)

        def hook(name, target=point):
            if name == target:
                os._exit(17)
        pid = os.fork()
        if pid == 0:
            store._fault_hook = hook
            try:
                store.put_episode(rec)
            finally:
                os._exit(0)
        _, status = os.waitpid(pid, 0)
        assert os.WEXITSTATUS(status) == 17
        reader = EpisodeStore(root)
        if reader.exists(rec.storage_key):
            assert reader.get_episode(rec.storage_key).equals(rec)
            outcomes.append((point, "complete"))
        else:
            outcomes.append((point, "absent"))
        reader.sweep_temp()
    return outcomes


@pytest.mark.skipif(not hasattr(os, "fork"), reason="needs fork")
def test_crash_injection_all_or_nothing(tmp_path):
    outcomes = crash_injection(tmp_path)
    assert len(outcomes) == 50
    assert all(state == "absent" for point, state in outcomes if point != "renamed")
    assert dict(outcomes)["renamed"] == "complete"
    leftovers = [f for _, _, files in os.walk(tmp_path) for f in files if f.startswith(".tmp-")]
    assert leftovers == []


def test_sweep_removes_orphans(tmp_path):
    store = EpisodeStore(tmp_path)
    os.makedirs(tmp_path / "episodes" / "1")
    (tmp_path / "episodes" / "1" / ".tmp-abc").write_bytes(b"partial")
    assert store.keys() == []
    assert store.sweep_temp() == 1


def test_quarantine_moves_blob(tmp_path):
    store = EpisodeStore(tmp_path, fsync=False)
    key = store.put_episode(make_record(np.random.default_rng(9)))
    dest = store.quarantine(key)
    assert not store.exists(key) and store.exists(dest)


def test_invalid_keys(tmp_path):
    store = EpisodeStore(tmp_path)
    for key in ("/abs", "a/../b"):
        with pytest.raises(ValueError):
            store.put_bytes(key, b"x")


def _meta(i, task):
    return EpisodeMeta(uuid.UUID(int=i), task, 10, f"episodes/{task}/{i:032x}")


def test_index_dedupes_and_keeps_order():
    idx = EpisodeIndex()
    assert idx.list_by_task(0) == []
    assert idx.insert(_meta(1, 0)) and not idx.insert(_meta(1, 0))
    idx.insert(_meta(2, 0))
    assert [m.episode_id.int for m in idx.list_by_task(0)] == [1, 2]
    assert len(idx) == 2


def test_index_partitions_by_task():
    rng = np.random.default_rng(10)
    tasks = rng.integers(3, size=10_000)
    idx = EpisodeIndex()
    for i, t in enumerate(tasks):
        idx.insert(_meta(i, int(t)))
    lists = [idx.list_by_task(t) for t in range(3)]
    assert [len(v) for v in lists] == np.bincount(tasks).tolist()
    ids = [m.episode_id for v in lists for m in v]
    assert len(set(ids)) == 10_000
    assert all(m.task_id == t for t in range(3) for m in lists[t])


def test_index_rejects_bad_meta():
    with pytest.raises(ValueError):
        EpisodeIndex().insert(EpisodeMeta(uuid.uuid4(), 0, -1, "k"))
    with pytest.raises(ValueError):
        EpisodeIndex().insert(EpisodeMeta(uuid.uuid4(), 0, 1, "k", sampling_weight=0.0))


def test_index_is_small_relative_to_payloads(tmp_path):
    # horizon-length episodes, as produced by timeouts
    store = EpisodeStore(tmp_path, fsync=False)
    idx = EpisodeIndex()
    rng = np.random.default_rng(11)
    payload = 0
    for i in range(10_000):
        rec = make_record(rng, n=80, task=i % 3)
        key = store.put_episode(rec)
        payload += os.path.getsize(os.path.join(tmp_path, *key.split("/")))
        idx.insert(EpisodeMeta.from_record(rec, key))
    assert idx.nbytes() < 0.01 * payload
