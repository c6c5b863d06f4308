"""Linear-softmax policy with a marginal head, an indicator-conditioned head
and a linear value head, plus versioning, hashing and checkpoint codecs.

Parameters are immutable values: every update returns a new
:class:`PolicyParams` with ``version + 1`` and a fresh content hash.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .envsim import NUM_ACTIONS

BLOCK_ACTION = 0  # conditioned head pi(a | I, s)
BLOCK_MARGINAL = 1  # marginal head pi(a | s)
BLOCK_VALUE = 2
BLOCK_NAMES = {BLOCK_ACTION: "action_weights", BLOCK_MARGINAL: "marginal_weights",
               BLOCK_VALUE: "value_weights"}

CKPT_MAGIC = b"SOPCKPT1"
DELTA_MAGIC = b"SOPDLT1"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class ContractViolation(ValueError):
    pass


class NonFiniteUpdateError(ValueError):
    pass


class StaleBaseError(Exception):
    """Delta base does not match the params it is applied to."""


class CheckpointFormatError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _canonical_bytes(blocks: dict[int, np.ndarray]) -> bytes:
    return b"".join(struct.pack("<BI", bid, blocks[bid].size)
                    + np.ascontiguousarray(blocks[bid], dtype="<f8").tobytes()
                    for bid in sorted(blocks))


@dataclass(frozen=True, eq=False)
class PolicyParams:
    version: int
    action_weights: np.ndarray
    marginal_weights: np.ndarray
    value_weights: np.ndarray
    content_hash: int = field(init=False)

    def __post_init__(self):
        for name in ("action_weights", "marginal_weights", "value_weights"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteUpdateError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        a, d1 = self.action_weights.shape
        if self.marginal_weights.shape != (a, d1 - 1) or self.value_weights.shape != (d1 - 1,):
            raise ContractViolation(
                f"inconsistent block shapes {self.action_weights.shape}, "
                f"{self.marginal_weights.shape}, {self.value_weights.shape}")
        object.__setattr__(self, "content_hash", fnv1a64(_canonical_bytes(self.blocks())))

    @classmethod
    def zeros(cls, feature_dim: int, num_actions: int = NUM_ACTIONS, version: int = 0):
        return cls(version, np.zeros((num_actions, feature_dim + 1)),
                   np.zeros((num_actions, feature_dim)), np.zeros(feature_dim))

    @property
    def feature_dim(self) -> int:
        return self.value_weights.shape[0]

    @property
    def num_actions(self) -> int:
        return self.marginal_weights.shape[0]

    def blocks(self) -> dict[int, np.ndarray]:
        return {BLOCK_ACTION: self.action_weights, BLOCK_MARGINAL: self.marginal_weights,
                BLOCK_VALUE: self.value_weights}

    def replace(self, version=None, **blocks) -> PolicyParams:
        return PolicyParams(
            self.version if version is None else version,
            blocks.get("action_weights", self.action_weights),
            blocks.get("marginal_weights", self.marginal_weights),
            blocks.get("value_weights", self.value_weights))

    def same_weights(self, other: PolicyParams) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.blocks().values(),
                                                        other.blocks().values()))

    def __eq__(self, other):
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.version == other.version and self.same_weights(other)

    __hash__ = None

    def __repr__(self):
        return (f"PolicyParams(version={self.version}, feature_dim={self.feature_dim}, "
                f"hash={self.content_hash:016x})")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _design(params: PolicyParams, features, indicator):
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != params.feature_dim:
        raise ContractViolation(f"feature length {x.shape[-1]} != {params.feature_dim}")
    if indicator is None:
        return x, params.marginal_weights
    bit = np.broadcast_to(np.asarray(indicator, dtype=np.float64), x.shape[:-1])
    return np.concatenate([x, bit[..., None]], axis=-1), params.action_weights


def forward(params: PolicyParams, features, indicator=None) -> np.ndarray:
    """Action probabilities; ``indicator=None`` selects the marginal head.

    Works on a single feature vector or a 2-D batch.
    """
    x, w = _design(params, features, indicator)
    return softmax(x @ w.T)


def nll_terms(params: PolicyParams, features, actions, indicator=None):
    """Per-item NLL and the gradient of the mean NLL w.r.t. the chosen head."""
    x, w = _design(params, np.atleast_2d(features), indicator)
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    n = actions.shape[0]
    if n == 0:
        raise ContractViolation("empty batch")
    logits = x @ w.T
    logits = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    losses = logz - logits[np.arange(n), actions]
    probs = np.exp(logits - logz[:, None])
    probs[np.arange(n), actions] -= 1.0
    grad = probs.T @ x / n
    return losses, grad


def zero_grad(params: PolicyParams) -> dict[int, np.ndarray]:
    return {bid: np.zeros_like(arr) for bid, arr in params.blocks().items()}


def nll_grad(params: PolicyParams, features, actions, indicator=None):
    """Mean negative log-likelihood and its exact gradient (dict keyed by block id)."""
    losses, g = nll_terms(params, features, actions, indicator)
    grad = zero_grad(params)
    grad[BLOCK_MARGINAL if indicator is None else BLOCK_ACTION] = g
    return float(losses.mean()), grad


def sgd_step(params: PolicyParams, grad: dict[int, np.ndarray], lr: float) -> PolicyParams:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for bid, g in grad.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteUpdateError(f"non-finite gradient in block {BLOCK_NAMES[bid]}")
    new = {BLOCK_NAMES[bid]: arr - lr * grad[bid] if bid in grad else arr
           for bid, arr in params.blocks().items()}
    return PolicyParams(params.version + 1, **new)


def value(params: PolicyParams, features) -> np.ndarray | float:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != params.feature_dim:
        raise ContractViolation(f"feature length {x.shape[-1]} != {params.feature_dim}")
    v = x @ params.value_weights
    return float(v) if np.ndim(v) == 0 else v


# -- checkpoints and deltas -------------------------------------------------

@dataclass(frozen=True)
class CheckpointDelta:
    base_version: int
    new_version: int
    changed_blocks: tuple[tuple[int, np.ndarray], ...]
    full_hash: int


def delta_encode(old: PolicyParams, new: PolicyParams) -> CheckpointDelta:
    if old.feature_dim != new.feature_dim or old.num_actions != new.num_actions:
        raise ContractViolation("delta between params of different shapes")
    changed = tuple((bid, arr.ravel().copy()) for bid, arr in new.blocks().items()
                    if not np.array_equal(arr, old.blocks()[bid]))
    return CheckpointDelta(old.version, new.version, changed, new.content_hash)


def apply_delta(params: PolicyParams, delta: CheckpointDelta) -> PolicyParams:
    if params.version != delta.base_version:
        raise StaleBaseError(f"have version {params.version}, delta expects {delta.base_version}")
    blocks = params.blocks()
    new = {}
    for bid, flat in delta.changed_blocks:
        if bid not in blocks or flat.size != blocks[bid].size:
            raise CheckpointFormatError(f"bad block {bid} in delta")
        new[BLOCK_NAMES[bid]] = np.asarray(flat, dtype=np.float64).reshape(blocks[bid].shape)
    out = params.replace(version=delta.new_version, **new)
    if out.content_hash != delta.full_hash:
        raise CheckpointFormatError(
            f"hash mismatch after delta: {out.content_hash:016x} != {delta.full_hash:016x}")
    return out


def _pack_blocks(blocks) -> bytes:
    parts = [struct.pack("<I", len(blocks))]
    for bid, arr in blocks:
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        parts.append(struct.pack("<BI", bid, flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def _unpack_blocks(buf: bytes, off: int):
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    blocks = []
    for _ in range(count):
        bid, n = struct.unpack_from("<BI", buf, off)
        off += 5
        end = off + 8 * n
        if end > len(buf):
            raise CheckpointFormatError("truncated block")
        blocks.append((bid, np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)))
        off = end
    return blocks, off


def encode_checkpoint(params: PolicyParams) -> bytes:
    body = CKPT_MAGIC + struct.pack("<Q", params.version)
    body += _pack_blocks(sorted(params.blocks().items()))
    return body + struct.pack("<Q", params.content_hash)


def decode_checkpoint(buf: bytes) -> PolicyParams:
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointFormatError("not a checkpoint")
    try:
        (version,) = struct.unpack_from("<Q", buf, len(CKPT_MAGIC))
        blocks, off = _unpack_blocks(buf, len(CKPT_MAGIC) + 8)
        (stored_hash,) = struct.unpack_from("<Q", buf, off)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    by_id = dict(blocks)
    if set(by_id) != set(BLOCK_NAMES):
        raise CheckpointFormatError("checkpoint must carry all three blocks")
    d = by_id[BLOCK_VALUE].size
    a = by_id[BLOCK_MARGINAL].size // max(d, 1)
    try:
        params = PolicyParams(version, by_id[BLOCK_ACTION].reshape(a, d + 1),
                              by_id[BLOCK_MARGINAL].reshape(a, d), by_id[BLOCK_VALUE])
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from None
    if params.content_hash != stored_hash:
        raise CheckpointFormatError("checkpoint hash mismatch")
    return params


def encode_delta(delta: CheckpointDelta) -> bytes:
    body = DELTA_MAGIC + struct.pack("<QQ", delta.base_version, delta.new_version)
    body += _pack_blocks(delta.changed_blocks)
    return body + struct.pack("<Q", delta.full_hash)


def decode_delta(buf: bytes) -> CheckpointDelta:
    if not buf.startswith(DELTA_MAGIC):
        raise CheckpointFormatError("not a delta")
    try:
        base, new = struct.unpack_from("<QQ", buf, len(DELTA_MAGIC))
        blocks, off = _unpack_blocks(buf, len(DELTA_MAGIC) + 16)
        (full_hash,) = struct.unpack_from("<Q", buf, off)
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated delta: {exc}") from None
    return CheckpointDelta(base, new, tuple(blocks), full_hash)


def save_checkpoint(params: PolicyParams, path) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(encode_checkpoint(params))
    os.replace(tmp, path)


def load_checkpoint(path) -> PolicyParams:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
