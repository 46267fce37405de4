"""CaliperNN: cross-domain k-nearest neighbours with propensity-score calipers.

Two independent implementations share one contract. :func:`caliper_nn` is the
vectorised kernel used everywhere; :func:`brute_force_nn` is a literal
pure-Python scan kept as its test oracle. Both compute distances with the
same left-to-right float64 summation, so their outputs agree bit for bit.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import DimensionMismatch, EmbeddingSet, Filtered, MatchRecord, ValidationError, normalize_rows
from .propensity import PropensityModel, score

CHUNK = 128


class ArityMismatch(ValidationError):
    pass


class TooFewScores(ValidationError):
    pass


@dataclass(frozen=True)
class CaliperParams:
    """Fixed-caliper threshold, std-caliper multiplier and temperature."""

    t_fixed: float = 0.0
    t_std: float = math.inf
    tau: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.t_fixed < 0.5:
            raise ValidationError(f"t_fixed must lie in [0, 0.5), got {self.t_fixed}")
        if not self.t_std > 0:
            raise ValidationError(f"t_std must be positive or inf, got {self.t_std}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValidationError(f"tau must be a positive real, got {self.tau}")

    def as_dict(self) -> dict:
        return {"t_fixed": self.t_fixed, "t_std": self.t_std, "tau": self.tau}


CALIPERS_OFF = CaliperParams(0.0, math.inf, 1.0)


@dataclass(frozen=True, eq=False)
class MatchSide:
    """Queries or keys: ids, raw encodings, domain labels and propensity scores."""

    ids: np.ndarray
    z: np.ndarray
    domains: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.uint64))
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim == 1 and z.size == 0:
            z = z.reshape(0, 0)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "domains", np.asarray(self.domains, dtype=np.int64))
        e = np.asarray(self.scores, dtype=np.float64)
        if e.ndim == 1 and e.size == 0:
            e = e.reshape(0, 0)
        object.__setattr__(self, "scores", e)
        n = len(self.ids)
        if self.z.ndim != 2 or len(self.z) != n or len(self.domains) != n or len(self.scores) != n:
            raise DimensionMismatch("ids, encodings, domains and scores must align")

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "MatchSide":
        return MatchSide(self.ids[idx], self.z[idx], self.domains[idx], self.scores[idx])

    @staticmethod
    def concat(parts: Sequence["MatchSide"]) -> "MatchSide":
        return MatchSide(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.z for p in parts]),
            np.concatenate([p.domains for p in parts]),
            np.concatenate([p.scores for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class MatchRequest:
    queries: MatchSide
    keys: MatchSide
    k: int
    params: CaliperParams = CALIPERS_OFF

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be at least 1")

    def check(self) -> None:
        q, kk = self.queries, self.keys
        if len(q) and len(kk):
            if q.z.shape[1] != kk.z.shape[1]:
                raise DimensionMismatch(f"query dim {q.z.shape[1]} != key dim {kk.z.shape[1]}")
            if q.scores.shape[1] != kk.scores.shape[1]:
                raise ArityMismatch("queries and keys carry propensity scores of different arity")


# --------------------------------------------------------------------------
# Calipers


def fixed_caliper_pass(e, t_fixed: float) -> bool:
    """Whether a single propensity score lies inside the common-support band."""
    e = np.asarray(e, dtype=np.float64)
    if len(e) == 2:
        return bool(t_fixed <= e[1] <= 1.0 - t_fixed)
    return bool(e.max() <= 1.0 - t_fixed)


def fixed_caliper_mask(scores: np.ndarray, t_fixed: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[1] == 2:
        return (scores[:, 1] >= t_fixed) & (scores[:, 1] <= 1.0 - t_fixed)
    return scores.max(axis=1) <= 1.0 - t_fixed


def propensity_scalar(scores: np.ndarray) -> np.ndarray:
    """Scalar summary used by the std-caliper: e[1] for two domains, else the max."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores[:, 1] if scores.shape[1] == 2 else scores.max(axis=1)


def std_caliper_threshold(all_scores, t_std: float) -> float:
    """``t_std`` times the population standard deviation of the propensity scalar."""
    if math.isinf(t_std):
        return math.inf
    all_scores = np.asarray(all_scores, dtype=np.float64)
    if len(all_scores) < 2:
        raise TooFewScores("the std-caliper needs at least two scores")
    return float(t_std * np.std(propensity_scalar(all_scores)))


def _pool_threshold(req: MatchRequest) -> float:
    # Pool = keys plus any query not already present among the keys (by id).
    if math.isinf(req.params.t_std):
        return math.inf
    extra = ~np.isin(req.queries.ids, req.keys.ids)
    pool = np.concatenate([req.keys.scores, req.queries.scores[extra]])
    if len(pool) < 2:
        return 0.0
    return std_caliper_threshold(pool, req.params.t_std)


# --------------------------------------------------------------------------
# Vectorised kernel


@dataclass(frozen=True, eq=False)
class NeighborSet:
    """Matches for one query as positions into the key side."""

    index: np.ndarray
    distances: np.ndarray
    filtered: Filtered


def _squared_distances(qn: np.ndarray, kn: np.ndarray) -> np.ndarray:
    acc = np.zeros((len(qn), len(kn)))
    for j in range(qn.shape[1]):
        diff = qn[:, j, None] - kn[None, :, j]
        acc += diff * diff
    return acc


def caliper_nn_indices(req: MatchRequest, threads: int = 1) -> list[NeighborSet]:
    """Run CaliperNN and return neighbour positions into ``req.keys``."""
    req.check()
    q, keys, k, p = req.queries, req.keys, req.k, req.params
    if len(q) == 0:
        return []
    empty = np.zeros(0, dtype=np.int64), np.zeros(0)
    q_ok = fixed_caliper_mask(q.scores, p.t_fixed)
    if len(keys) == 0:
        return [
            NeighborSet(*empty, Filtered.NO_VALID_KEYS if ok else Filtered.QUERY_CALIPER) for ok in q_ok
        ]
    thr = _pool_threshold(req)
    qn = normalize_rows(q.z)
    kn = normalize_rows(keys.z)
    k_ok = fixed_caliper_mask(keys.scores, p.t_fixed)
    q_sc, k_sc = propensity_scalar(q.scores), propensity_scalar(keys.scores)

    def run(lo: int) -> list[NeighborSet]:
        hi = min(lo + CHUNK, len(q))
        valid = (
            k_ok[None, :]
            & (q.domains[lo:hi, None] != keys.domains[None, :])
            & (np.abs(q_sc[lo:hi, None] - k_sc[None, :]) <= thr)
            & (q.ids[lo:hi, None] != keys.ids[None, :])
        )
        dist = _squared_distances(qn[lo:hi], kn)
        out = []
        for r in range(hi - lo):
            if not q_ok[lo + r]:
                out.append(NeighborSet(*empty, Filtered.QUERY_CALIPER))
                continue
            cand = np.flatnonzero(valid[r])
            if len(cand) < k:
                out.append(NeighborSet(*empty, Filtered.NO_VALID_KEYS))
                continue
            d = dist[r, cand]
            if len(cand) > k:
                # keep everything tied with the k-th distance, then order exactly
                kth = np.partition(d, k - 1)[k - 1]
                keep = d <= kth
                cand, d = cand[keep], d[keep]
            order = np.lexsort((cand, keys.ids[cand], d))[:k]
            out.append(NeighborSet(cand[order], d[order], Filtered.NONE))
        return out

    starts = range(0, len(q), CHUNK)
    if threads > 1 and len(q) > CHUNK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(lo) for lo in starts]
    return [ns for chunk in chunks for ns in chunk]


def to_records(req: MatchRequest, sets: Sequence[NeighborSet]) -> list[MatchRecord]:
    key_ids = req.keys.ids
    return [
        MatchRecord(
            int(qid),
            tuple(int(key_ids[i]) for i in ns.index),
            tuple(float(x) for x in ns.distances),
            ns.filtered,
        )
        for qid, ns in zip(req.queries.ids, sets)
    ]


def caliper_nn(req: MatchRequest, threads: int = 1) -> list[MatchRecord]:
    """Cross-domain k-NN over L2-normalised encodings, filtered by both calipers.

    A query failing the fixed caliper yields ``QUERY_CALIPER``. Otherwise the
    candidates are keys from another domain that pass the fixed caliper, lie
    within the std-caliper of the query, and are not the query itself; fewer
    than ``k`` of them yields ``NO_VALID_KEYS``. Ties in distance go to the
    smaller key id. Output order follows query order for any ``threads``.
    """
    return to_records(req, caliper_nn_indices(req, threads))


# --------------------------------------------------------------------------
# Brute-force oracle


def _bf_normalize(v: list[float]) -> list[float]:
    m = max(abs(x) for x in v)
    u = [x / m for x in v]
    acc = 0.0
    for x in u:
        acc += x * x
    n = math.sqrt(acc)
    return [x / n for x in u]


def _bf_pstdev(xs: list[float]) -> float:
    mean = math.fsum(xs) / len(xs)
    return math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / len(xs))


def brute_force_nn(req: MatchRequest) -> list[MatchRecord]:
    """Literal O(Q*K) scan with the same contract as :func:`caliper_nn`."""
    req.check()
    p, k = req.params, req.k
    queries = [
        (int(req.queries.ids[i]), [float(x) for x in req.queries.z[i]], int(req.queries.domains[i]),
         [float(x) for x in req.queries.scores[i]])
        for i in range(len(req.queries))
    ]
    keys = [
        (int(req.keys.ids[i]), [float(x) for x in req.keys.z[i]], int(req.keys.domains[i]),
         [float(x) for x in req.keys.scores[i]])
        for i in range(len(req.keys))
    ]

    def passes(e):
        if len(e) == 2:
            return p.t_fixed <= e[1] and e[1] <= 1.0 - p.t_fixed
        return max(e) <= 1.0 - p.t_fixed

    def scalar(e):
        return e[1] if len(e) == 2 else max(e)

    if math.isinf(p.t_std):
        thr = math.inf
    else:
        key_ids = {kid for kid, _, _, _ in keys}
        pool = [scalar(e) for _, _, _, e in keys] + [scalar(e) for qid, _, _, e in queries if qid not in key_ids]
        thr = p.t_std * _bf_pstdev(pool) if len(pool) >= 2 else 0.0

    out = []
    for qid, qz, qs, qe in queries:
        if not passes(qe):
            out.append(MatchRecord(qid, filtered=Filtered.QUERY_CALIPER))
            continue
        qn = _bf_normalize(qz)
        cands = []
        for pos, (kid, kz, ks, ke) in enumerate(keys):
            if ks == qs or kid == qid:
                continue
            if not passes(ke):
                continue
            if not abs(scalar(qe) - scalar(ke)) <= thr:
                continue
            kn = _bf_normalize(kz)
            d = 0.0
            for a, b in zip(qn, kn):
                d += (a - b) * (a - b)
            cands.append((d, kid, pos))
        if len(cands) < k:
            out.append(MatchRecord(qid, filtered=Filtered.NO_VALID_KEYS))
            continue
        best = sorted(cands)[:k]
        out.append(MatchRecord(qid, tuple(c[1] for c in best), tuple(c[0] for c in best)))
    return out


# --------------------------------------------------------------------------
# Offline driver


class Direction(enum.Enum):
    L_TO_U = "l2u"
    U_TO_L = "u2l"
    BOTH = "both"
    ALL = "all"


def matched_samples(
    data: EmbeddingSet,
    model: PropensityModel,
    params: CaliperParams,
    k: int = 1,
    direction: Direction | str = Direction.BOTH,
    binary: bool = True,
    threads: int = 1,
    nn: Callable[..., list[MatchRecord]] | None = None,
) -> list[MatchRecord]:
    """Offline matching over a whole :class:`EmbeddingSet`.

    Every sample is scored once at ``params.tau``. With ``binary`` the domain
    label is the labelled/unlabelled split; otherwise the stored domains are
    used and the model must have one output per domain. ``L_TO_U`` queries the
    labelled samples against the unlabelled ones, ``U_TO_L`` the reverse,
    ``BOTH`` concatenates the two, and ``ALL`` matches every sample against
    every other. ``nn`` swaps the matching kernel (e.g. for the oracle).
    """
    direction = Direction(direction)
    labels = data.split_labels() if binary else data.domains
    arity = 2 if binary else data.domain_count
    if model.domain_count != arity:
        raise ArityMismatch(f"model has {model.domain_count} outputs, expected {arity}")
    if len(np.unique(labels)) < 2:
        raise ValidationError("matching needs at least two domains present")
    scores = score(model, data.embeddings, params.tau)
    everything = MatchSide(data.ids, data.embeddings, labels, scores)
    lab = data.labelled_mask()
    lside, uside = everything.take(lab), everything.take(~lab)
    if direction is Direction.ALL:
        runs = [(everything, everything)]
    else:
        if len(lside) == 0 or len(uside) == 0:
            raise ValidationError("directional matching needs both labelled and unlabelled samples")
        runs = {
            Direction.L_TO_U: [(lside, uside)],
            Direction.U_TO_L: [(uside, lside)],
            Direction.BOTH: [(lside, uside), (uside, lside)],
        }[direction]
    records: list[MatchRecord] = []
    for qs, ks in runs:
        req = MatchRequest(qs, ks, k, params)
        records.extend(nn(req) if nn is not None else caliper_nn(req, threads))
    return records
