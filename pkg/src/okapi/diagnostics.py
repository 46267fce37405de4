"""Covariate balance (SMD, variance ratio) and the static caliper grid search."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import EmbeddingSet, MatchRecord, OkapiError, ValidationError
from .matcher import CaliperParams, Direction, matched_samples
from .propensity import PropensityModel


class EmptySet(ValidationError):
    pass


class ZeroVariance(ValidationError):
    pass


class NoMatches(OkapiError):
    pass


class EmptyGridAfterFilter(OkapiError):
    pass


@dataclass
class BalanceReport:
    per_dim_smd: list[float]
    per_dim_vr: list[float]
    mean_smd: float
    mean_abs_log_vr: float
    retention_rate: Optional[float] = None
    domain_pair: Optional[tuple[int, int]] = None
    pairs: int = 0

    @property
    def score(self) -> float:
        return self.mean_smd + self.mean_abs_log_vr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain_pair"] = list(self.domain_pair) if self.domain_pair is not None else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def balance(set_a, set_b) -> BalanceReport:
    """Per-dimension standardised mean difference and variance ratio.

    SMD uses the pooled SD ``sqrt((var_a + var_b) / 2)``; VR is
    ``var_a / var_b``. Variances use the n-1 denominator, so each set needs at
    least two rows.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("both sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise EmptySet("variance needs at least two rows per set")
    mean_a, mean_b = a.mean(axis=0), b.mean(axis=0)
    var_a, var_b = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    pooled = np.sqrt((var_a + var_b) / 2.0)
    diff = np.abs(mean_a - mean_b)
    smd, vr = [], []
    for j in range(a.shape[1]):
        if pooled[j] > 0:
            smd.append(float(diff[j] / pooled[j]))
        elif diff[j] == 0:
            smd.append(0.0)
        else:
            raise ZeroVariance(f"dimension {j}: zero pooled variance but different means")
        if var_b[j] > 0:
            vr.append(float(var_a[j] / var_b[j]))
        elif var_a[j] == 0:
            vr.append(1.0)
        else:
            raise ZeroVariance(f"dimension {j}: variance ratio undefined (zero variance in second set)")
        # var_a == 0 < var_b gives VR 0, whose log is unbounded
        if vr[-1] == 0.0:
            raise ZeroVariance(f"dimension {j}: zero variance in first set")
    return BalanceReport(
        per_dim_smd=smd,
        per_dim_vr=vr,
        mean_smd=float(np.mean(smd)),
        mean_abs_log_vr=float(np.mean(np.abs(np.log(vr)))),
    )


def _aggregate(reports: Sequence[BalanceReport]) -> BalanceReport:
    if len(reports) == 1:
        return reports[0]
    return BalanceReport(
        per_dim_smd=list(np.mean([r.per_dim_smd for r in reports], axis=0)),
        per_dim_vr=list(np.mean([r.per_dim_vr for r in reports], axis=0)),
        mean_smd=float(np.mean([r.mean_smd for r in reports])),
        mean_abs_log_vr=float(np.mean([r.mean_abs_log_vr for r in reports])),
        pairs=sum(r.pairs for r in reports),
    )


def domain_balance(data: EmbeddingSet, labels: Optional[np.ndarray] = None) -> BalanceReport:
    """Balance between the raw (unmatched) domains, averaged over domain pairs."""
    labels = data.domains if labels is None else np.asarray(labels)
    emb = data.embeddings.astype(np.float64)
    present = sorted(int(s) for s in np.unique(labels))
    if len(present) < 2:
        raise ValidationError("need at least two domains")
    reports = []
    for s, t in itertools.combinations(present, 2):
        r = balance(emb[labels == s], emb[labels == t])
        r.domain_pair = (s, t)
        r.pairs = int((labels == s).sum() * (labels == t).sum())
        reports.append(r)
    return _aggregate(reports)


def matched_balance(
    data: EmbeddingSet, records: Sequence[MatchRecord], labels: Optional[np.ndarray] = None
) -> BalanceReport:
    """Balance between matched queries and their neighbours.

    Each (query, neighbour) pair contributes one row to each side. Pairs are
    grouped by unordered domain pair, oriented so the smaller label is the
    first set; per-group reports are averaged. ``labels`` overrides the domain
    labels used for grouping (e.g. the labelled/unlabelled split).
    """
    labels = data.domains if labels is None else np.asarray(labels)
    index = data.index_of()
    emb = data.embeddings.astype(np.float64)
    groups: dict[tuple[int, int], tuple[list[int], list[int]]] = {}
    matched = 0
    for rec in records:
        if rec.query_id not in index or any(n not in index for n in rec.neighbor_ids):
            raise ValidationError(f"record for query {rec.query_id} refers to unknown ids")
        if not rec.matched:
            continue
        matched += 1
        qi = index[rec.query_id]
        for nid in rec.neighbor_ids:
            ni = index[nid]
            sq, sn = int(labels[qi]), int(labels[ni])
            lo, hi = (qi, ni) if sq <= sn else (ni, qi)
            side_a, side_b = groups.setdefault((min(sq, sn), max(sq, sn)), ([], []))
            side_a.append(lo)
            side_b.append(hi)
    if matched == 0:
        raise NoMatches("no query was matched")
    reports = []
    for pair in sorted(groups):
        ia, ib = groups[pair]
        if len(ia) < 2:
            continue
        r = balance(emb[ia], emb[ib])
        r.domain_pair = pair
        r.pairs = len(ia)
        reports.append(r)
    if not reports:
        raise NoMatches("too few matched pairs to estimate variances")
    out = _aggregate(reports)
    out.retention_rate = matched / len(records)
    return out


@dataclass
class GridSpec:
    t_fixed_values: list[float]
    t_std_values: list[float]
    tau_values: list[float]
    k: int = 1
    min_retention: float = 0.0
    direction: Direction = Direction.BOTH

    def __post_init__(self):
        if not (self.t_fixed_values and self.t_std_values and self.tau_values):
            raise ValidationError("grid lists must be non-empty")
        if not 0.0 <= self.min_retention <= 1.0:
            raise ValidationError("min_retention must lie in [0, 1]")

    def cells(self) -> list[CaliperParams]:
        return [
            CaliperParams(float(f), float(s), float(t))
            for f, s, t in itertools.product(self.t_fixed_values, self.t_std_values, self.tau_values)
        ]


@dataclass
class GridResult:
    params: CaliperParams
    report: BalanceReport
    score: float = field(init=False)

    def __post_init__(self):
        self.score = self.report.score


def grid_search(
    data: EmbeddingSet, model: PropensityModel, grid: GridSpec, binary: bool = True, threads: int = 1
) -> list[GridResult]:
    """Evaluate every cell, drop those under the retention floor, rank by SMD + |log VR|."""
    labels = data.split_labels() if binary else data.domains
    results = []
    for params in grid.cells():
        records = matched_samples(data, model, params, grid.k, grid.direction, binary=binary, threads=threads)
        retention = sum(r.matched for r in records) / len(records)
        if retention < grid.min_retention or retention == 0:
            continue
        try:
            report = matched_balance(data, records, labels)
        except (NoMatches, ValidationError):
            continue
        results.append(GridResult(params, report))
    if not results:
        raise EmptyGridAfterFilter("no grid cell met the retention floor")
    results.sort(key=lambda r: (r.score, r.params.t_fixed, r.params.t_std, r.params.tau))
    return results


GRID_COLUMNS = ["rank", "t_fixed", "t_std", "tau", "score", "mean_smd", "mean_abs_log_vr", "retention", "pairs"]


def grid_to_csv(results: Sequence[GridResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    for rank, r in enumerate(results, start=1):
        w.writerow(
            [
                rank,
                repr(r.params.t_fixed),
                "inf" if math.isinf(r.params.t_std) else repr(r.params.t_std),
                repr(r.params.tau),
                repr(r.score),
                repr(r.report.mean_smd),
                repr(r.report.mean_abs_log_vr),
                repr(r.report.retention_rate),
                r.report.pairs,
            ]
        )
    return buf.getvalue()
