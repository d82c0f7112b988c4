"""Per-sample adaptation on a client: memory logits, the Latte step and client/server rounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import EPS_NORM, TextClassifier, entropy, is_unit
from .errors import ConfigError, ValidationError, ZeroVector
from .memory import (
    COSINE,
    EUCLIDEAN,
    GEOMETRIES,
    ExternalMemory,
    Insertion,
    LocalMemory,
    MemoryEntry,
    compute_prototype,
    merge,
)
from .server import OP_DOWNLOAD, OP_UPLOAD, GlobalMemory, encode_record, payload_bytes

POLICIES = ("latte", "zero_shot", "local_only", "global_shared")


@dataclass(frozen=True)
class LatteParams:
    alpha: float = 1.0
    beta: float = 60.0
    gamma: float = 1.5
    k_l: int = 12
    k_e: int = 9
    comm_period: Optional[int] = 1  # None disables communication
    scale: float = 100.0
    geometry: str = COSINE

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "scale"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v!r}")
        for name in ("k_l", "k_e"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if self.comm_period is not None and not (isinstance(self.comm_period, int) and self.comm_period >= 1):
            raise ConfigError(f"comm_period must be an integer >= 1 or None, got {self.comm_period!r}")
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"geometry must be one of {GEOMETRIES}")

    @classmethod
    def from_dict(cls, d: dict) -> "LatteParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown parameter keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def with_(self, **kw) -> "LatteParams":
        return replace(self, **kw)


# Values chosen per dataset in the original hyperparameter search.
PRESETS: Dict[str, LatteParams] = {
    "vlcs-latte": LatteParams(alpha=0.3, beta=6.0, gamma=6.0, k_l=15, k_e=12),
    "terraincognita-latte": LatteParams(alpha=1.5, beta=35.0, gamma=10.0, k_l=2, k_e=20),
    "cifar10c-latte": LatteParams(alpha=1.0, beta=60.0, gamma=1.5, k_l=12, k_e=9),
    "cifar100c-latte": LatteParams(alpha=0.7, beta=60.0, gamma=1.5, k_l=8, k_e=5),
    # large alpha/beta regime of the ball-mixture analysis
    "theory-latte": LatteParams(alpha=1e4, beta=1e4, gamma=0.0, k_l=4, k_e=8, geometry=EUCLIDEAN),
}


def preset(name: str) -> LatteParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _similarity(F: np.ndarray, M: np.ndarray, geometry: str) -> np.ndarray:
    """Pairwise similarity, rows of F against rows of M.

    The euclidean form ``f.m - |m|^2 / 2`` orders candidates exactly like
    negative squared distance and reduces to a shifted dot product on the
    unit sphere.
    """
    S = F @ M.T
    if geometry == EUCLIDEAN:
        S = S - 0.5 * np.sum(M * M, axis=1)
    return S


def stack_memory(merged: Sequence[Sequence[MemoryEntry]]) -> List[Optional[tuple]]:
    """Per class ``(embeddings, entropies)`` arrays, or None for an empty class."""
    out = []
    for entries in merged:
        if entries:
            out.append((np.stack([e.embedding for e in entries]), np.array([e.entropy for e in entries])))
        else:
            out.append(None)
    return out


def memory_logits(f, merged, params: LatteParams, clf: TextClassifier) -> np.ndarray:
    """Attention over merged memory, one aggregate per class, scored against ``f``.

    Weights are ``exp(beta * sim(f, m) - gamma * H(m))``, evaluated with the
    per-class maximum subtracted so very large ``beta`` does not overflow.
    A class with no memory falls back to its text embedding, which gives it
    the zero-shot logit. ``f`` may be one embedding or a batch; ``merged``
    is either per-class entry lists or the output of :func:`stack_memory`.
    """
    F = np.asarray(f, dtype=np.float64)
    single = F.ndim == 1
    F = np.atleast_2d(F)
    c = clf.num_classes
    if len(merged) != c:
        raise ValidationError(f"merged memory has {len(merged)} classes, classifier has {c}")
    if any(isinstance(m, list) for m in merged):
        merged = stack_memory(merged)
    out = np.empty((F.shape[0], c))
    z_pre = None
    for y, arrays in enumerate(merged):
        if arrays is None:
            if z_pre is None:
                z_pre = clf.logits(F)
            out[:, y] = z_pre[:, y]
            continue
        M, h = arrays
        logw = params.beta * _similarity(F, M, params.geometry) - params.gamma * h
        logw -= logw.max(axis=1, keepdims=True)
        W = np.exp(logw)
        agg = W @ M
        if params.geometry == EUCLIDEAN:
            agg /= W.sum(axis=1, keepdims=True)
            score = np.einsum("ij,ij->i", F, agg) - 0.5 * np.einsum("ij,ij->i", agg, agg)
        else:
            norms = np.sqrt(np.einsum("ij,ij->i", agg, agg))
            if np.any(norms <= EPS_NORM):
                raise ZeroVector(f"class {y} aggregate cancels out")
            score = np.einsum("ij,ij->i", F, agg) / norms
        out[:, y] = params.scale * score
    return out[0] if single else out


@dataclass
class PredictionTrace:
    z_pre: np.ndarray
    z_mem: np.ndarray
    z_post: np.ndarray
    pseudo_initial: int
    label_final: int
    entropy_initial: float
    memory_action: Optional[Insertion] = None
    communicated: bool = False


@dataclass
class CommRound:
    """What one upload/retrieve exchange moved, for accounting and logging."""

    client: int
    upload_records: List[bytes] = field(default_factory=list)
    download_records: List[bytes] = field(default_factory=list)
    retrieved: Dict[int, list] = field(default_factory=dict)

    @property
    def upload_bytes(self) -> int:
        return sum(payload_bytes(r) for r in self.upload_records)

    @property
    def download_bytes(self) -> int:
        return sum(payload_bytes(r) for r in self.download_records)

    @property
    def framing_bytes(self) -> int:
        total = sum(len(r) for r in self.upload_records) + sum(len(r) for r in self.download_records)
        return total - self.upload_bytes - self.download_bytes


class LatteClient:
    """State owned by one client: classifier, local memory and external memory.

    ``local`` may be shared between clients to realize the global-shared
    baseline.
    """

    def __init__(
        self,
        client_id: int,
        classifier: TextClassifier,
        params: LatteParams,
        policy: str = "latte",
        local: Optional[LocalMemory] = None,
    ):
        if policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {policy!r}")
        self.client_id = client_id
        self.classifier = classifier
        self.params = params
        self.policy = policy
        self.local = local if local is not None else LocalMemory(classifier.num_classes, params.k_l)
        self._external = ExternalMemory(classifier.num_classes)
        self._external_version = 0
        self.processed = 0
        self._cache_key = None
        self._cache = None
        self._proto_key = None
        self._protos = {}

    @property
    def external(self) -> ExternalMemory:
        return self._external

    @external.setter
    def external(self, ext: ExternalMemory):
        self._external = ext
        self._external_version += 1

    @property
    def communicates(self) -> bool:
        return self.policy == "latte" and self.params.comm_period is not None

    def merged(self) -> List[List[MemoryEntry]]:
        return merge(self.local, self.external, self.params.k_l)

    def _stacked(self):
        key = (id(self.local), self.local.version, self._external_version)
        if key != self._cache_key:
            self._cache = stack_memory(self.merged())
            self._cache_key = key
        return self._cache

    def step(self, f) -> PredictionTrace:
        """Process one test embedding: pseudo-label, update memory, then predict.

        The memory is updated before prediction, so the sample can match
        itself. No server traffic happens here.
        """
        f = np.asarray(f, dtype=np.float64)
        if self.params.geometry == COSINE and not is_unit(f):
            raise ValidationError("cosine geometry expects unit-norm embeddings")
        z_pre = self.classifier.logits(f)
        pseudo = int(np.argmax(z_pre))
        h = entropy(z_pre)
        self.processed += 1
        if self.policy == "zero_shot":
            z_mem = np.zeros_like(z_pre)
            return PredictionTrace(z_pre, z_mem, z_pre.copy(), pseudo, pseudo, h)
        action = self.local.update(f, pseudo, h)
        z_mem = memory_logits(f, self._stacked(), self.params, self.classifier)
        z_post = z_pre + self.params.alpha * z_mem
        return PredictionTrace(z_pre, z_mem, z_post, pseudo, int(np.argmax(z_post)), h, action)

    def due(self) -> bool:
        """True when the samples processed so far complete a communication period."""
        return self.communicates and self.processed > 0 and self.processed % self.params.comm_period == 0

    def predict(self, F) -> np.ndarray:
        """Labels for a batch under the current memory, without updating it."""
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        z_pre = self.classifier.logits(F)
        if self.policy == "zero_shot":
            return np.argmax(z_pre, axis=1)
        z_post = z_pre + self.params.alpha * memory_logits(F, self._stacked(), self.params, self.classifier)
        return np.argmax(z_post, axis=1)

    def prototypes(self) -> Dict[int, Optional[np.ndarray]]:
        """Per-class prototypes of the local memory (None where a class has none)."""
        key = (id(self.local), self.local.version)
        if key != self._proto_key:
            protos = {}
            for y in range(self.local.num_classes):
                try:
                    protos[y] = compute_prototype(self.local.entries(y), self.params.gamma, self.params.geometry)
                except ZeroVector:
                    protos[y] = None
            self._protos, self._proto_key = protos, key
        return dict(self._protos)


def communicate(client: LatteClient, server: GlobalMemory, bytes_per_scalar: int = 2) -> CommRound:
    """Upload this client's prototypes, retrieve the nearest foreign ones, replace external memory."""
    protos = {y: p for y, p in client.prototypes().items() if p is not None}
    rnd = CommRound(client.client_id)
    server.upload(client.client_id, protos)
    for y, p in protos.items():
        rnd.upload_records.append(encode_record(OP_UPLOAD, client.client_id, y, p, bytes_per_scalar))
    response = server.retrieve(client.client_id, protos, client.params.k_e)
    per_class = {}
    for y, items in response.items():
        if not items:
            per_class[y] = []
            continue
        block = np.stack([r.prototype for r in items])
        block.setflags(write=False)
        ents = np.atleast_1d(client.classifier.entropy(block))
        per_class[y] = [MemoryEntry(block[rank], float(ents[rank]), rank, origin=r.origin) for rank, r in enumerate(items)]
        for r in items:
            rnd.download_records.append(encode_record(OP_DOWNLOAD, r.origin, y, r.prototype, bytes_per_scalar))
    client.external = ExternalMemory.from_entries(client.local.num_classes, per_class)
    rnd.retrieved = response
    return rnd
