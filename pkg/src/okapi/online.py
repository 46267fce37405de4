"""Online matching machinery: EMA target, FIFO memory bank, schedules,
consistency loss and the per-iteration matching step."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DegenerateVector, DimensionMismatch, MIN_NORM, MatchRecord, ValidationError
from .matcher import CaliperParams, MatchRequest, MatchSide, caliper_nn_indices, to_records
from .propensity import PropensityModel, inverse_frequency_weights, ps_loss_and_grad, score


class LengthMismatch(DimensionMismatch):
    pass


class BatchLargerThanBank(ValidationError):
    pass


class QuerySource(enum.Enum):
    TARGET = "target"
    ONLINE = "online"


@dataclass
class EmaState:
    """Shadow parameters with a linearly scheduled decay ``zeta``."""

    shadow: np.ndarray
    zeta_start: float = 0.996
    zeta_end: float = 1.0
    total_steps: int = 1
    step: int = 0

    def __post_init__(self):
        self.shadow = np.array(self.shadow, dtype=np.float64)
        for z in (self.zeta_start, self.zeta_end):
            if not 0.0 <= z <= 1.0:
                raise ValidationError(f"zeta must lie in [0, 1], got {z}")
        if self.total_steps <= 0:
            raise ValidationError("total_steps must be positive")

    def zeta(self, step: Optional[int] = None) -> float:
        step = self.step if step is None else step
        if self.zeta_start == self.zeta_end:
            return self.zeta_start
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        # interpolation form keeps both endpoints exact
        z = self.zeta_start * (1.0 - frac) + self.zeta_end * frac
        return min(max(z, 0.0), 1.0)

    def update(self, online_params) -> "EmaState":
        online_params = np.asarray(online_params, dtype=np.float64)
        if online_params.shape != self.shadow.shape:
            raise LengthMismatch(f"online params {online_params.shape} vs shadow {self.shadow.shape}")
        z = self.zeta()
        self.shadow = z * self.shadow + (1.0 - z) * online_params
        self.step += 1
        return self


def ema_update(state: EmaState, online_params) -> EmaState:
    """Return a new state advanced by one EMA step; ``state`` is left untouched."""
    return copy.deepcopy(state).update(online_params)


@dataclass(frozen=True)
class LambdaSchedule:
    final_value: float = 1.0
    warmup_fraction: float = 0.1
    total_steps: int = 1

    def __call__(self, step: int) -> float:
        warm = self.warmup_fraction * self.total_steps
        if warm <= 0:
            return self.final_value
        return self.final_value * min(1.0, step / warm)


class MemoryBank:
    """Fixed-capacity FIFO of target encodings with companion domain labels and ids."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValidationError("bank capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._z = np.zeros((capacity, dim))
        self._s = np.zeros(capacity, dtype=np.int64)
        self._ids = np.zeros(capacity, dtype=np.uint64)
        self.size = 0
        self.write_cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, z, s, ids=None) -> "MemoryBank":
        z = np.asarray(z, dtype=np.float64)
        s = np.asarray(s, dtype=np.int64)
        b = len(z)
        if b > self.capacity:
            raise BatchLargerThanBank(f"batch of {b} exceeds bank capacity {self.capacity}")
        if z.ndim != 2 or z.shape[1] != self.dim or len(s) != b:
            raise DimensionMismatch("bank push needs a (B, dim) array and B labels")
        ids = np.zeros(b, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
        pos = (self.write_cursor + np.arange(b)) % self.capacity
        self._z[pos] = z
        self._s[pos] = s
        self._ids[pos] = ids
        self.write_cursor = int((self.write_cursor + b) % self.capacity)
        self.size = min(self.size + b, self.capacity)
        return self

    def _order(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.write_cursor + np.arange(self.capacity)) % self.capacity

    def contents(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stored ``(z, s, ids)``, oldest first."""
        o = self._order()
        return self._z[o].copy(), self._s[o].copy(), self._ids[o].copy()

    def state_arrays(self) -> dict:
        return {"z": self._z, "s": self._s, "ids": self._ids}

    def restore(self, z, s, ids, size: int, write_cursor: int) -> None:
        self._z[...] = z
        self._s[...] = s
        self._ids[...] = ids
        self.size = size
        self.write_cursor = write_cursor


def bank_push(bank: MemoryBank, z, s, ids=None) -> MemoryBank:
    """Push a batch into a copy of ``bank`` (oldest entries overwritten first)."""
    return copy.deepcopy(bank).push(z, s, ids)


def _normalize_with_norm(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((z * z).sum(axis=-1))
    if (norms <= MIN_NORM).any():
        raise DegenerateVector("cannot normalise a zero encoding")
    return z / norms[..., None], norms


def consistency_loss(z_q, neighbors) -> tuple[float, np.ndarray]:
    """Mean squared distance between the normalised query and each normalised neighbour.

    The gradient is taken with respect to ``z_q`` only (neighbours are treated
    as constants) and includes the Jacobian of the normalisation. An empty
    neighbour set gives zero loss and zero gradient.
    """
    z_q = np.asarray(z_q, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if neighbors.size == 0:
        return 0.0, np.zeros_like(z_q)
    neighbors = neighbors.reshape(-1, z_q.shape[-1])
    q_hat, q_norm = _normalize_with_norm(z_q[None, :])
    n_hat, _ = _normalize_with_norm(neighbors)
    q_hat, q_norm = q_hat[0], q_norm[0]
    diff = q_hat[None, :] - n_hat
    k = len(neighbors)
    loss = float((diff * diff).sum() / k)
    g_hat = 2.0 * diff.sum(axis=0) / k
    grad = (g_hat - q_hat * (q_hat @ g_hat)) / q_norm
    return loss, grad


def batch_consistency_loss(z_q: np.ndarray, neighbor_sets: list[np.ndarray]) -> tuple[float, np.ndarray]:
    """Per-sample consistency losses averaged over the whole batch (unmatched count as 0)."""
    z_q = np.asarray(z_q, dtype=np.float64)
    grad = np.zeros_like(z_q)
    total = 0.0
    b = len(z_q)
    for i, nb in enumerate(neighbor_sets):
        if len(nb) == 0:
            continue
        loss, g = consistency_loss(z_q[i], nb)
        total += loss
        grad[i] = g
    return total / b, grad / b


@dataclass
class MatchStepResult:
    records: list[MatchRecord]
    neighbors: list[np.ndarray]  # per query: (k, d) target encodings, or (0, d)
    neighbor_domains: list[np.ndarray]
    bank: MemoryBank
    model: PropensityModel
    ps_loss: Optional[float] = None
    mean_distance: Optional[float] = None

    @property
    def retention(self) -> float:
        return sum(r.matched for r in self.records) / len(self.records) if self.records else 0.0


def okapi_match_step(
    z_target: np.ndarray,
    domains: np.ndarray,
    ids: np.ndarray,
    bank: MemoryBank,
    model: PropensityModel,
    params: CaliperParams,
    k: int = 1,
    query_source: QuerySource = QuerySource.TARGET,
    z_online: Optional[np.ndarray] = None,
    lr: float = 0.0,
    threads: int = 1,
) -> MatchStepResult:
    """One iteration of online matching.

    Keys are the batch's target encodings followed by the bank contents.
    Queries are the target encodings, or the online ones for
    ``QuerySource.ONLINE``. After matching, the batch is pushed into ``bank``
    (mutated in place) and the propensity scorer takes one gradient step on
    the keys; the updated scorer is returned and ``model`` is not modified.
    """
    z_target = np.asarray(z_target, dtype=np.float64)
    domains = np.asarray(domains, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.uint64)
    if len(z_target) > bank.capacity:
        raise BatchLargerThanBank("bank capacity must be at least the batch size")
    bz, bs, bids = bank.contents()
    key_z = np.concatenate([z_target, bz])
    key_s = np.concatenate([domains, bs])
    key_ids = np.concatenate([ids, bids])
    keys = MatchSide(key_ids, key_z, key_s, score(model, key_z, params.tau))
    if query_source is QuerySource.ONLINE:
        if z_online is None:
            raise ValidationError("online queries need z_online")
        qz = np.asarray(z_online, dtype=np.float64)
        queries = MatchSide(ids, qz, domains, score(model, qz, params.tau))
    else:
        queries = keys.take(np.arange(len(z_target)))
    req = MatchRequest(queries, keys, k, params)
    sets = caliper_nn_indices(req, threads)
    records = to_records(req, sets)
    neighbors = [key_z[ns.index] for ns in sets]
    neighbor_domains = [key_s[ns.index] for ns in sets]
    dists = [d for ns in sets for d in ns.distances]

    bank.push(z_target, domains, ids)

    ps_loss = None
    if len(np.unique(key_s)) >= 2:
        w = inverse_frequency_weights(key_s, model.domain_count)
        ps_loss, (gw, gb) = ps_loss_and_grad(model, key_z, key_s, w)
        if lr > 0:
            model = model.step(gw, gb, lr)
    return MatchStepResult(
        records=records,
        neighbors=neighbors,
        neighbor_domains=neighbor_domains,
        bank=bank,
        model=model,
        ps_loss=ps_loss,
        mean_distance=float(np.mean(dists)) if dists else None,
    )

