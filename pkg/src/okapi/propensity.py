"""Linear softmax domain classifier used as the propensity scorer.

Training always runs at temperature 1; the temperature only enters when scores
are produced for matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DimensionMismatch, EmbeddingSet, ValidationError


class EmptyInput(ValidationError):
    pass


class SingleDomain(ValidationError):
    pass


@dataclass(frozen=True, eq=False)
class PropensityModel:
    weights: np.ndarray  # (S, d)
    bias: np.ndarray  # (S,)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionMismatch(f"weights {w.shape} and bias {b.shape} disagree")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("propensity parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def domain_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, domain_count: int, dim: int) -> "PropensityModel":
        return cls(np.zeros((domain_count, dim)), np.zeros(domain_count))

    @classmethod
    def init(cls, domain_count: int, dim: int, seed: int, scale: float = 0.01) -> "PropensityModel":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (domain_count, dim)), np.zeros(domain_count))

    def logits(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise DimensionMismatch(f"encoding dim {z.shape[-1]} != model dim {self.dim}")
        return z @ self.weights.T + self.bias

    def step(self, grad_w: np.ndarray, grad_b: np.ndarray, lr: float) -> "PropensityModel":
        return PropensityModel(self.weights - lr * grad_w, self.bias - lr * grad_b)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dim": self.dim,
                "domain_count": self.domain_count,
                "weights": [float(x) for x in self.weights.ravel()],
                "bias": [float(x) for x in self.bias],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PropensityModel":
        obj = json.loads(text)
        try:
            w = np.array(obj["weights"], dtype=np.float64).reshape(obj["domain_count"], obj["dim"])
            return cls(w, np.array(obj["bias"], dtype=np.float64))
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad propensity model: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "PropensityModel":
        return cls.from_json(Path(path).read_text())


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def score(model: PropensityModel, z, tau: float = 1.0) -> np.ndarray:
    """Propensity scores ``softmax(logits / tau)`` for one encoding or a batch."""
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    logits = model.logits(z)
    return softmax(logits / tau) if tau != 1.0 else softmax(logits)


def inverse_frequency_weights(labels, domain_count: int) -> np.ndarray:
    """Per-domain weights ``N / (n_present * n_s)``; zero for absent domains.

    With these weights the mean weight over the samples is exactly one, so the
    weighted loss stays on the scale of the unweighted one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyInput("no labels")
    if labels.min() < 0 or labels.max() >= domain_count:
        raise ValidationError(f"label outside [0, {domain_count})")
    counts = np.bincount(labels, minlength=domain_count).astype(np.float64)
    present = counts > 0
    w = np.zeros(domain_count)
    w[present] = labels.size / (present.sum() * counts[present])
    return w


def ps_loss_and_grad(model: PropensityModel, z, s, weights) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Weighted mean cross-entropy of the domain classifier and its exact gradient.

    Returns ``(loss, (grad_weights, grad_bias))``.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    if z.ndim != 2 or len(z) == 0:
        raise EmptyInput("batch must be a non-empty 2-D array")
    if len(s) != len(z):
        raise DimensionMismatch("one domain label per encoding required")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (model.domain_count,):
        raise DimensionMismatch("one weight per domain required")
    n = len(z)
    logits = model.logits(z)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    rows = np.arange(n)
    ws = weights[s]
    loss = float(-(ws * log_p[rows, s]).sum() / n)
    delta = np.exp(log_p)
    delta[rows, s] -= 1.0
    delta *= (ws / n)[:, None]
    return loss, (delta.T @ z, delta.sum(axis=0))


def fit_offline(
    z,
    s,
    domain_count: int | None = None,
    epochs: int = 500,
    lr: float = 0.5,
    seed: int = 0,
) -> PropensityModel:
    """Full-batch gradient descent on the inverse-frequency-weighted cross-entropy."""
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    if domain_count is None:
        domain_count = int(s.max()) + 1 if s.size else 0
    if len(np.unique(s)) < 2:
        raise SingleDomain("propensity fitting needs at least two domains present")
    weights = inverse_frequency_weights(s, domain_count)
    model = PropensityModel.init(domain_count, z.shape[1], seed)
    for _ in range(epochs):
        _, (gw, gb) = ps_loss_and_grad(model, z, s, weights)
        model = model.step(gw, gb, lr)
    return model


def fit_embedding_set(
    data: EmbeddingSet, binary: bool = True, epochs: int = 500, lr: float = 0.5, seed: int = 0
) -> PropensityModel:
    """Fit a scorer on every sample of ``data``.

    With ``binary`` the labelled/unlabelled split stands in for the domain label.
    """
    if binary:
        return fit_offline(data.embeddings, data.split_labels(), 2, epochs, lr, seed)
    return fit_offline(data.embeddings, data.domains, data.domain_count, epochs, lr, seed)
