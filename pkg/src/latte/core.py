"""Numeric primitives: normalization, softmax entropy and zero-shot logits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimMismatch, ValidationError, ZeroVector

EPS_NORM = 1e-12
UNIT_TOL = 1e-6


def normalize(v) -> np.ndarray:
    """Return ``v / ||v||``; raises ZeroVector for (near-)zero input."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot normalize a vector with non-finite components")
    n = float(np.linalg.norm(v))
    if n <= EPS_NORM:
        raise ZeroVector(f"vector norm {n:.3g} is below {EPS_NORM:g}")
    return v / n


def normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        bad = int(np.flatnonzero(norms.ravel() <= EPS_NORM)[0])
        raise ZeroVector(f"row {bad} has zero norm")
    return m / norms


def is_unit(v, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def entropy(logits) -> float | np.ndarray:
    """Shannon entropy (nats) of ``softmax(logits)`` along the last axis.

    The logits are used as given; any temperature/scale must already be
    folded in. Accepts a single vector or a batch of rows.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValidationError("entropy needs at least two classes")
    if not np.all(np.isfinite(z)):
        raise ValidationError("entropy of non-finite logits")
    logp = log_softmax(z)
    h = -np.sum(np.exp(logp) * logp, axis=-1)
    # exp(logp) * logp is <= 0 termwise, but rounding can leave -0.0
    h = np.maximum(h, 0.0)
    if h.ndim == 0:
        return float(h)
    return h


@dataclass(frozen=True)
class TextClassifier:
    """Linear zero-shot head: ``logits = scale * rows @ f + bias``.

    ``rows`` are the class text embeddings (unit norm). ``bias`` is zero for
    CLIP-style heads and is only used to express the biased binary
    classifier of the ball-mixture world in the same form.
    """

    rows: np.ndarray
    class_names: tuple = ()
    scale: float = 100.0
    bias: Optional[np.ndarray] = None
    check_unit: bool = field(default=True, repr=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DimMismatch("classifier rows must be a c x d matrix")
        c, d = rows.shape
        if c < 2 or d < 1:
            raise ValidationError(f"classifier needs c >= 2 and d >= 1, got c={c}, d={d}")
        if not np.all(np.isfinite(rows)):
            raise ValidationError("classifier rows contain non-finite values")
        if self.check_unit:
            norms = np.linalg.norm(rows, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
            if bad.size:
                raise ValidationError(f"classifier row {int(bad[0])} is not unit norm")
        if not (math.isfinite(self.scale) and self.scale >= 0):
            raise ValidationError("classifier scale must be finite and >= 0")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        names = tuple(self.class_names) if self.class_names else tuple(f"class_{i}" for i in range(c))
        if len(names) != c:
            raise DimMismatch(f"{len(names)} class names for {c} classes")
        object.__setattr__(self, "class_names", names)
        if self.bias is not None:
            bias = np.array(self.bias, dtype=np.float64)
            if bias.shape != (c,):
                raise DimMismatch(f"bias must have shape ({c},)")
            bias.setflags(write=False)
            object.__setattr__(self, "bias", bias)

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def logits(self, f) -> np.ndarray:
        """Logits for one embedding (shape ``(d,)``) or a batch (``(n, d)``)."""
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.dim:
            raise DimMismatch(f"embedding dim {f.shape[-1]} != classifier dim {self.dim}")
        z = self.scale * (f @ self.rows.T)
        if self.bias is not None:
            z = z + self.bias
        return z

    def entropy(self, f) -> float | np.ndarray:
        return entropy(self.logits(f))

    def predict(self, f):
        z = self.logits(f)
        return np.argmax(z, axis=-1)


def zero_shot_logits(f, clf: TextClassifier) -> np.ndarray:
    return clf.logits(f)


def classifier_from_names(rows: Sequence, names: Sequence[str] = (), scale: float = 100.0) -> TextClassifier:
    """Build a classifier after normalizing each text embedding row."""
    return TextClassifier(normalize_rows(rows), tuple(names), scale)
