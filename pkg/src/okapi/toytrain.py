"""Desk-scale semi-supervised training: a tanh MLP encoder with a linear head,
trained either by ERM or with the online cross-domain consistency loss."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ConfigError, DimensionMismatch, EmbeddingSet, FormatError
from .matcher import CaliperParams
from .online import EmaState, LambdaSchedule, MemoryBank, QuerySource, batch_consistency_loss, okapi_match_step
from .propensity import PropensityModel

ENCODER_KEYS = ("W1", "b1", "W2", "b2")
HEAD_KEYS = ("Wh", "bh")
PARAM_KEYS = ENCODER_KEYS + HEAD_KEYS


class ToyModel:
    """``x -> tanh(W1 x + b1) -> W2 . + b2 = z -> Wh z + bh``.

    Parameters live in ``self.params``; :meth:`flat` concatenates them in the
    fixed order W1, b1, W2, b2, Wh, bh (encoder first), which is also the
    checkpoint layout.
    """

    def __init__(self, d_in: int, hidden: int, d_z: int, n_out: int, seed: int = 0):
        self.shape = (d_in, hidden, d_z, n_out)
        rng = np.random.default_rng(seed)

        def uni(fan_in, *shape):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        self.params = {
            "W1": uni(d_in, hidden, d_in),
            "b1": uni(d_in, hidden),
            "W2": uni(hidden, d_z, hidden),
            "b2": uni(hidden, d_z),
            "Wh": uni(d_z, n_out, d_z),
            "bh": uni(d_z, n_out),
        }

    @property
    def d_z(self) -> int:
        return self.shape[2]

    def _flat(self, keys) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in keys])

    def _set_flat(self, keys, v) -> None:
        v = np.asarray(v, dtype=np.float64)
        off = 0
        for k in keys:
            n = self.params[k].size
            self.params[k] = v[off:off + n].reshape(self.params[k].shape).copy()
            off += n
        if off != len(v):
            raise DimensionMismatch(f"flat vector has {len(v)} entries, expected {off}")

    def flat(self) -> np.ndarray:
        return self._flat(PARAM_KEYS)

    def set_flat(self, v) -> None:
        self._set_flat(PARAM_KEYS, v)

    def encoder_flat(self) -> np.ndarray:
        return self._flat(ENCODER_KEYS)

    def encoder_params(self, flat: Optional[np.ndarray] = None) -> dict:
        if flat is None:
            return {k: self.params[k] for k in ENCODER_KEYS}
        out, off = {}, 0
        for k in ENCODER_KEYS:
            n = self.params[k].size
            out[k] = flat[off:off + n].reshape(self.params[k].shape)
            off += n
        return out

    def predict(self, x) -> np.ndarray:
        z, _ = encode(self.params, x)
        return z @ self.params["Wh"].T + self.params["bh"]

    def copy(self) -> "ToyModel":
        other = object.__new__(ToyModel)
        other.shape = self.shape
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


def encode(enc: dict, x) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != enc["W1"].shape[1]:
        raise DimensionMismatch(f"input shape {x.shape} does not fit encoder")
    a1 = np.tanh(x @ enc["W1"].T + enc["b1"])
    z = a1 @ enc["W2"].T + enc["b2"]
    return z, (x, a1)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray  # NaN where the target is withheld
    neighbors: Optional[list] = None  # per sample (k, d_z) target encodings


@dataclass
class Losses:
    sup: float
    unsup: float
    total: float


def forward_backward(
    model: ToyModel, batch: Batch, lam: float = 0.0, task: str = "classification"
) -> tuple[Losses, dict]:
    """Losses and exact gradients of ``L_sup + lam * L_unsup`` for every parameter.

    ``L_sup`` is cross-entropy (or MSE for ``task="regression"``) averaged over
    the rows that carry a target. ``L_unsup`` is the consistency loss averaged
    over the whole batch; neighbour encodings are constants.
    """
    p = model.params
    x = np.asarray(batch.x, dtype=np.float64)
    y = np.asarray(batch.y, dtype=np.float64)
    if len(y) != len(x):
        raise DimensionMismatch("one target slot per input row required")
    z, (_, a1) = encode(p, x)
    out = z @ p["Wh"].T + p["bh"]
    lab = ~np.isnan(y)
    n_lab = int(lab.sum())
    d_out = np.zeros_like(out)
    sup = 0.0
    if n_lab:
        if task == "classification":
            logits = out[lab]
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            cls = y[lab].astype(np.int64)
            rows = np.arange(n_lab)
            sup = float(-log_p[rows, cls].sum() / n_lab)
            g = np.exp(log_p)
            g[rows, cls] -= 1.0
            d_out[lab] = g / n_lab
        elif task == "regression":
            resid = out[lab, 0] - y[lab]
            sup = float((resid * resid).sum() / n_lab)
            d_out[lab, 0] = 2.0 * resid / n_lab
        else:
            raise ConfigError(f"unknown task {task!r}")

    unsup, dz_unsup = 0.0, None
    if batch.neighbors is not None:
        unsup, dz_unsup = batch_consistency_loss(z, batch.neighbors)

    grads = {"Wh": d_out.T @ z, "bh": d_out.sum(axis=0)}
    dz = d_out @ p["Wh"]
    if dz_unsup is not None and lam != 0.0:
        dz = dz + lam * dz_unsup
    grads["W2"] = dz.T @ a1
    grads["b2"] = dz.sum(axis=0)
    dh = (dz @ p["W2"]) * (1.0 - a1 * a1)
    grads["W1"] = dh.T @ x
    grads["b1"] = dh.sum(axis=0)
    return Losses(sup, unsup, sup + lam * unsup), grads


def flat_grads(grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in PARAM_KEYS])


# --------------------------------------------------------------------------
# Synthetic data


@dataclass
class SynthConfig:
    """Two Gaussian classes in 2-D; domain ``s`` is the base layout rotated by ``s * rotation``.

    Training domains are ``0 .. n_domains-1``; OOD test domains continue the
    rotation sequence beyond them.
    """

    n_domains: int = 4
    samples_per_domain: int = 200
    labeled_domains: tuple = (0, 1)
    unlabeled_domains: Optional[tuple] = None
    rotation_per_domain: float = math.pi / 8
    class_separation: float = 4.0
    noise_sd: float = 0.5
    n_ood_domains: int = 2
    test_samples_per_domain: int = 200
    seed: int = 0

    def __post_init__(self):
        self.labeled_domains = tuple(int(s) for s in self.labeled_domains)
        if self.unlabeled_domains is None:
            self.unlabeled_domains = tuple(s for s in range(self.n_domains) if s not in self.labeled_domains)
        self.unlabeled_domains = tuple(int(s) for s in self.unlabeled_domains)

    def validate(self) -> None:
        if set(self.labeled_domains) & set(self.unlabeled_domains):
            raise ConfigError("labelled and unlabelled domains must be disjoint")
        if not self.labeled_domains:
            raise ConfigError("at least one labelled domain required")
        every = self.labeled_domains + self.unlabeled_domains
        if any(s < 0 or s >= self.n_domains for s in every):
            raise ConfigError("domain index outside [0, n_domains)")
        if self.n_ood_domains < 1:
            raise ConfigError("at least one held-out test domain required")
        if self.samples_per_domain < 2 or self.test_samples_per_domain < 1:
            raise ConfigError("too few samples per domain")


@dataclass
class SynthData:
    labeled: EmbeddingSet
    unlabeled: EmbeddingSet
    id_test: EmbeddingSet
    ood_test: EmbeddingSet

    @property
    def train(self) -> EmbeddingSet:
        """Labelled and unlabelled training samples together (targets NaN where hidden)."""
        a, b = self.labeled, self.unlabeled
        return EmbeddingSet(
            np.concatenate([a.ids, b.ids]),
            np.concatenate([a.domains, b.domains]),
            np.concatenate([a.embeddings, b.embeddings]),
            a.domain_count,
            np.concatenate([a.targets, b.targets]),
        )


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def gen_synth(cfg: SynthConfig) -> SynthData:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    total = cfg.n_domains + cfg.n_ood_domains
    next_id = 0

    def draw(domains, n, hide_targets):
        nonlocal next_id
        xs, ys, ds = [], [], []
        for s in domains:
            y = rng.integers(0, 2, n)
            base = np.stack([np.where(y == 1, 1.0, -1.0) * cfg.class_separation / 2, np.zeros(n)], axis=1)
            x = base + rng.normal(0.0, cfg.noise_sd, (n, 2))
            xs.append(x @ _rotation(s * cfg.rotation_per_domain).T)
            ys.append(y.astype(np.float64))
            ds.append(np.full(n, s))
        ids = np.arange(next_id, next_id + n * len(domains), dtype=np.uint64)
        next_id += n * len(domains)
        y = np.concatenate(ys)
        if hide_targets:
            y = np.full_like(y, np.nan)
        return EmbeddingSet(ids, np.concatenate(ds), np.concatenate(xs), total, y)

    labeled = draw(cfg.labeled_domains, cfg.samples_per_domain, False)
    unlabeled = draw(cfg.unlabeled_domains, cfg.samples_per_domain, True)
    id_test = draw(cfg.labeled_domains, cfg.test_samples_per_domain, False)
    ood_test = draw(range(cfg.n_domains, total), cfg.test_samples_per_domain, False)
    return SynthData(labeled, unlabeled, id_test, ood_test)


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    total_steps: int = 1500
    batch_size: int = 64
    lr: float = 0.1
    k: int = 1
    caliper: CaliperParams = field(default_factory=lambda: CaliperParams(0.0, 1.0, 1.0))
    zeta_start: float = 0.99
    zeta_end: float = 1.0
    lambda_final: float = 1.0
    warmup_fraction: float = 0.1
    bank_capacity: int = 256
    query_source: QuerySource = QuerySource.TARGET
    seed: int = 0
    hidden: int = 16
    d_z: int = 8
    eval_every: int = 100
    threads: int = 1
    binary: bool = True
    task: str = "classification"
    record_trajectory: bool = False

    def validate(self) -> None:
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.batch_size < 1 or self.batch_size > self.bank_capacity:
            raise ConfigError("need 1 <= batch_size <= bank_capacity")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.k < 1:
            raise ConfigError("k must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["caliper"] = self.caliper.as_dict()
        d["query_source"] = self.query_source.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["caliper"] = CaliperParams(**d["caliper"])
        d["query_source"] = QuerySource(d["query_source"])
        return cls(**d)


@dataclass
class MatchStats:
    retention: list = field(default_factory=list)
    mean_distance: list = field(default_factory=list)
    pairs: int = 0
    cross_domain_pairs: int = 0


METRIC_COLUMNS = ["step", "L_sup", "L_unsup", "lambda", "retention", "id_acc", "ood_acc"]


def accuracy(model: ToyModel, data: EmbeddingSet) -> float:
    pred = model.predict(data.embeddings).argmax(axis=1)
    return float((pred == data.targets.astype(np.int64)).mean())


class Trainer:
    """Stateful training loop shared by ERM and the consistency method.

    Both methods draw minibatches uniformly from the union of labelled and
    unlabelled samples with the same generator, so for a fixed seed they see
    the same batch schedule; ERM simply ignores the unlabelled rows.
    """

    def __init__(self, data: SynthData, cfg: TrainConfig, method: str = "okapi"):
        if method not in ("erm", "okapi"):
            raise ConfigError(f"unknown method {method!r}")
        cfg.validate()
        self.data, self.cfg, self.method = data, cfg, method
        train = data.train
        self.x = train.embeddings.astype(np.float64)
        self.y = train.targets.copy()
        self.ids = train.ids
        self.match_labels = train.split_labels() if cfg.binary else train.domains
        self.domains = train.domains
        if cfg.batch_size > len(self.x):
            raise ConfigError("batch_size exceeds the training set")
        init_seed, ps_seed, batch_seed = np.random.SeedSequence(cfg.seed).spawn(3)
        n_out = 2 if cfg.task == "classification" else 1
        self.model = ToyModel(2, cfg.hidden, cfg.d_z, n_out, seed=int(init_seed.generate_state(1)[0]))
        self.rng = np.random.default_rng(batch_seed)
        self.ema = EmaState(self.model.encoder_flat(), cfg.zeta_start, cfg.zeta_end, cfg.total_steps)
        self.lam = LambdaSchedule(cfg.lambda_final, cfg.warmup_fraction, cfg.total_steps)
        self.bank = MemoryBank(cfg.bank_capacity, cfg.d_z)
        n_domains = 2 if cfg.binary else train.domain_count
        self.ps_model = PropensityModel.init(n_domains, cfg.d_z, int(ps_seed.generate_state(1)[0]))
        self.step_count = 0
        self.history: list[dict] = []
        self.stats = MatchStats()
        self.trajectory: list[np.ndarray] = []

    def step(self) -> None:
        cfg = self.cfg
        t = self.step_count
        idx = self.rng.choice(len(self.x), cfg.batch_size, replace=False)
        x, y = self.x[idx], self.y[idx]
        neighbors, lam, retention = None, 0.0, 0.0
        if self.method == "okapi":
            self.ema.update(self.model.encoder_flat())
            z_target, _ = encode(self.model.encoder_params(self.ema.shadow), x)
            z_online = None
            if cfg.query_source is QuerySource.ONLINE:
                z_online, _ = encode(self.model.params, x)
            res = okapi_match_step(
                z_target, self.match_labels[idx], self.ids[idx], self.bank, self.ps_model,
                cfg.caliper, cfg.k, cfg.query_source, z_online, cfg.lr, cfg.threads,
            )
            self.ps_model = res.model
            neighbors = res.neighbors
            lam = self.lam(t)
            retention = res.retention
            self.stats.retention.append(retention)
            self.stats.mean_distance.append(res.mean_distance)
            q_labels = self.match_labels[idx]
            for i, nd in enumerate(res.neighbor_domains):
                self.stats.pairs += len(nd)
                self.stats.cross_domain_pairs += int((nd != q_labels[i]).sum())
        losses, grads = forward_backward(self.model, Batch(x, y, neighbors), lam, cfg.task)
        for key in PARAM_KEYS:
            self.model.params[key] = self.model.params[key] - cfg.lr * grads[key]
        self.step_count += 1
        if cfg.record_trajectory:
            self.trajectory.append(self.model.flat())
        if self.step_count % cfg.eval_every == 0 or self.step_count == cfg.total_steps:
            self.history.append(
                {
                    "step": self.step_count,
                    "L_sup": losses.sup,
                    "L_unsup": losses.unsup,
                    "lambda": lam,
                    "retention": retention,
                    "id_acc": accuracy(self.model, self.data.id_test),
                    "ood_acc": accuracy(self.model, self.data.ood_test),
                }
            )

    def run(self, until: Optional[int] = None) -> "Trainer":
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        while self.step_count < until:
            self.step()
        return self

    # -- checkpoints -------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        arrays = {
            "params": self.model.flat(),
            "shadow": self.ema.shadow,
            "ps_weights": self.ps_model.weights,
            "ps_bias": self.ps_model.bias,
            **{f"bank_{k}": v for k, v in self.bank.state_arrays().items()},
        }
        header = {
            "method": self.method,
            "config": self.cfg.to_dict(),
            "step": self.step_count,
            "ema_step": self.ema.step,
            "bank_size": self.bank.size,
            "bank_cursor": self.bank.write_cursor,
            "rng": self.rng.bit_generator.state,
            "history": self.history,
            "stats": asdict(self.stats),
            "arrays": [[k, v.dtype.str, list(v.shape)] for k, v in arrays.items()],
        }
        write_checkpoint(path, header, arrays)

    @classmethod
    def from_checkpoint(cls, path: str | Path, data: SynthData) -> "Trainer":
        header, arrays = read_checkpoint(path)
        tr = cls(data, TrainConfig.from_dict(header["config"]), header["method"])
        tr.model.set_flat(arrays["params"])
        tr.ema.shadow = arrays["shadow"].copy()
        tr.ema.step = header["ema_step"]
        tr.ps_model = PropensityModel(arrays["ps_weights"], arrays["ps_bias"])
        tr.bank.restore(arrays["bank_z"], arrays["bank_s"], arrays["bank_ids"], header["bank_size"], header["bank_cursor"])
        tr.rng.bit_generator.state = header["rng"]
        tr.step_count = header["step"]
        tr.history = header["history"]
        tr.stats = MatchStats(**header["stats"])
        return tr


CKPT_MAGIC = b"OKCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


def write_checkpoint(path: str | Path, header: dict, arrays: dict) -> None:
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("checkpoint too short")
    magic, version, n = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = _CKPT_HEAD.size
    header = json.loads(buf[off:off + n])
    off += n
    arrays = {}
    for name, dt, shape in header["arrays"]:
        dtype = np.dtype(dt).newbyteorder("<")
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        off += count * dtype.itemsize
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return header, arrays


def train_erm(data: SynthData, cfg: TrainConfig) -> tuple[ToyModel, list[dict]]:
    tr = Trainer(data, cfg, "erm").run()
    return tr.model, tr.history


def train_okapi(data: SynthData, cfg: TrainConfig) -> tuple[ToyModel, list[dict], MatchStats]:
    tr = Trainer(data, cfg, "okapi").run()
    return tr.model, tr.history, tr.stats


def history_to_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def compare(synth: SynthConfig, cfg: TrainConfig, seeds) -> dict:
    """Run both methods on paired seeds; the seed drives data, init and batches."""
    rows = []
    for seed in seeds:
        data = gen_synth(replace(synth, seed=seed))
        c = replace(cfg, seed=seed)
        _, h_erm = train_erm(data, c)
        _, h_ok, _ = train_okapi(data, c)
        rows.append(
            {
                "seed": seed,
                "erm_id": h_erm[-1]["id_acc"],
                "erm_ood": h_erm[-1]["ood_acc"],
                "okapi_id": h_ok[-1]["id_acc"],
                "okapi_ood": h_ok[-1]["ood_acc"],
            }
        )
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("erm_id", "erm_ood", "okapi_id", "okapi_ood")}
    return {
        "runs": rows,
        **{f"mean_{k}": v for k, v in mean.items()},
        "ood_delta": mean["okapi_ood"] - mean["erm_ood"],
        "id_delta": mean["okapi_id"] - mean["erm_id"],
    }
