"""Embedding sources: the ball-mixture world, the on-disk dataset format and client partitioning."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import UNIT_TOL, TextClassifier, entropy, normalize_rows
from .errors import (
    AssumptionViolation,
    BadMagic,
    ChecksumMismatch,
    DimMismatch,
    EmptyDomain,
    FormatError,
    LabelOutOfRange,
    NonFiniteEmbedding,
    TruncatedFile,
    ValidationError,
)

MAGIC = "LATTE-EMB"
FORMAT_VERSION = 1

# tags that keep per-purpose RNG streams apart for the same (seed, client)
STREAM_TAG = 0
EVAL_TAG = 1
ORDER_TAG = 2


def client_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# ---------------------------------------------------------------------------
# ball-mixture world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoryWorld:
    """Binary mixture of unit balls at ``-mu`` and ``+mu`` with a biased linear classifier.

    ``ood_centers`` holds ``(center_0, center_1)`` pairs for clients whose
    data comes from shifted balls. Construction enforces the validity
    conditions of the analysis and raises AssumptionViolation otherwise.
    """

    mu: np.ndarray
    w_pre: np.ndarray
    b_pre: float = 0.0
    t_scale: float = 100.0
    ood_centers: Tuple[Tuple[np.ndarray, np.ndarray], ...] = ()

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        w = np.array(self.w_pre, dtype=np.float64).reshape(-1)
        if mu.shape != w.shape:
            raise DimMismatch(f"mu has dim {mu.size}, w_pre has dim {w.size}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(w)) and math.isfinite(self.b_pre)):
            raise ValidationError("world parameters must be finite")
        if abs(np.linalg.norm(w) - 1.0) > UNIT_TOL:
            raise AssumptionViolation(2, f"|w_pre| = {np.linalg.norm(w):.6g} != 1")
        if not (self.t_scale > 0 and math.isfinite(self.t_scale)):
            raise ValidationError("t_scale must be positive")
        a = float(mu @ w)
        if not a > 0:
            raise AssumptionViolation(3, f"mu.w_pre = {a:.4g} <= 0")
        if not (-a - 1 < self.b_pre < a + 1):
            raise AssumptionViolation(3, f"b_pre = {self.b_pre:.4g} outside ({-a - 1:.4g}, {a + 1:.4g})")
        pairs = []
        for j, pair in enumerate(self.ood_centers):
            if len(pair) != 2:
                raise ValidationError(f"OOD entry {j} must be a (center_0, center_1) pair")
            p = tuple(np.array(c, dtype=np.float64).reshape(-1) for c in pair)
            for c in p:
                if c.shape != mu.shape:
                    raise DimMismatch(f"OOD center dim {c.size} != {mu.size}")
            for y, own in ((0, -mu), (1, mu)):
                for yp, other in enumerate(p):
                    dist = float(np.linalg.norm(own - other))
                    if not dist > 4:
                        raise AssumptionViolation(
                            4, f"‖μ{_sub(y)} − μ′{_sub(yp)}‖ = {dist:.4g} ≤ 4 (OOD pair {j})"
                        )
            pairs.append(p)
        for arr in (mu, w, *(c for p in pairs for c in p)):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "w_pre", w)
        object.__setattr__(self, "b_pre", float(self.b_pre))
        object.__setattr__(self, "t_scale", float(self.t_scale))
        object.__setattr__(self, "ood_centers", tuple(pairs))

    @property
    def dim(self) -> int:
        return self.mu.size

    def center(self, y: int, ood_index: Optional[int] = None) -> np.ndarray:
        if y not in (0, 1):
            raise ValidationError(f"class must be 0 or 1, got {y}")
        if ood_index is None:
            return self.mu if y == 1 else -self.mu
        return self.ood_centers[ood_index][y]

    @classmethod
    def from_dict(cls, d: dict) -> "TheoryWorld":
        known = {"mu", "w_pre", "b_pre", "t_scale", "ood_centers"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown world keys: {sorted(unknown)}")
        return cls(
            mu=d["mu"],
            w_pre=d["w_pre"],
            b_pre=d.get("b_pre", 0.0),
            t_scale=d.get("t_scale", 100.0),
            ood_centers=tuple(tuple(p) for p in d.get("ood_centers", ())),
        )

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "w_pre": self.w_pre.tolist(),
            "b_pre": self.b_pre,
            "t_scale": self.t_scale,
            "ood_centers": [[c.tolist() for c in p] for p in self.ood_centers],
        }


def _sub(y: int) -> str:
    return "₀₁"[y]


def sample_ball(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform in the unit ball: uniform direction, radius ``U**(1/d)``."""
    u = rng.standard_normal((n, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / dim)
    return u * r[:, None]


def sample_theory(world: TheoryWorld, y: int, ood_index: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """One raw (unnormalized) embedding of class ``y``."""
    return world.center(y, ood_index) + sample_ball(1, world.dim, rng)[0]


def sample_theory_batch(
    world: TheoryWorld, n: int, rng: np.random.Generator, ood_index: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """``n`` labelled samples with labels drawn as fair coin flips."""
    ys = rng.integers(0, 2, size=n)
    centers = np.stack([world.center(0, ood_index), world.center(1, ood_index)])
    X = centers[ys] + sample_ball(n, world.dim, rng)
    return X, ys


@dataclass(frozen=True)
class TheoryPredictor:
    """The biased linear zero-shot classifier of the ball-mixture world."""

    world: TheoryWorld

    def z(self, f) -> np.ndarray:
        return np.asarray(f, dtype=np.float64) @ self.world.w_pre + self.world.b_pre

    def p1(self, f):
        return 1.0 / (1.0 + np.exp(-self.world.t_scale * self.z(f)))

    def entropy(self, f):
        tz = self.world.t_scale * self.z(f)
        return entropy(np.stack([-tz / 2, tz / 2], axis=-1))

    def predict(self, f) -> np.ndarray:
        return (self.z(f) > 0).astype(np.int64)

    @property
    def classifier(self) -> TextClassifier:
        """Two-class head with logits ``(-t z / 2, +t z / 2)``; same softmax as the logistic form."""
        w, t, b = self.world.w_pre, self.world.t_scale, self.world.b_pre
        return TextClassifier(
            np.stack([-w, w]), ("class_0", "class_1"), scale=t / 2, bias=np.array([-t * b / 2, t * b / 2])
        )


def theory_predictor(world: TheoryWorld) -> TheoryPredictor:
    return TheoryPredictor(world)


def orthogonal_ood_pairs(world: TheoryWorld, count: int, offset: float = 5.0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """OOD center pairs ``(s u - mu, s u + mu)`` shifted along directions ``u`` orthogonal to mu and w_pre.

    Shifting orthogonally to ``w_pre`` leaves the zero-shot score distribution
    of OOD clients identical to that of ID clients, so only their location
    differs. Directions cycle through ``+-`` an orthonormal basis of the
    orthogonal complement.
    """
    d = world.dim
    basis = np.linalg.qr(np.column_stack([world.mu, world.w_pre, np.eye(d)]))[0]
    rank = np.linalg.matrix_rank(np.column_stack([world.mu, world.w_pre]))
    comp = basis[:, rank:d].T
    if comp.shape[0] == 0:
        raise ValidationError("no direction orthogonal to mu and w_pre in this dimension")
    dirs = [s * u for u in comp for s in (1.0, -1.0)]
    return [(offset * dirs[j % len(dirs)] - world.mu, offset * dirs[j % len(dirs)] + world.mu) for j in range(count)]


# ---------------------------------------------------------------------------
# on-disk embedding datasets
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingDataset:
    embeddings: np.ndarray
    labels: np.ndarray
    classifier: TextClassifier
    domains: Optional[np.ndarray] = None
    normalized: bool = True  # False for raw ball-space datasets

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise DimMismatch("embeddings must be an N x d matrix")
        n, d = self.embeddings.shape
        if d != self.classifier.dim:
            raise DimMismatch(f"embedding dim {d} != classifier dim {self.classifier.dim}")
        if self.labels.shape != (n,):
            raise DimMismatch(f"{self.labels.size} labels for {n} embeddings")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classifier.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.classifier.num_classes})")
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64)
            if self.domains.shape != (n,):
                raise DimMismatch(f"{self.domains.size} domain ids for {n} embeddings")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def domain_ids(self) -> np.ndarray:
        return self.domains if self.domains is not None else np.zeros(len(self), dtype=np.int64)


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def save_dataset(ds: EmbeddingDataset, path) -> Path:
    """Write ``manifest.json`` and raw little-endian files into directory ``path``.

    Returns the manifest path.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    blobs = {
        "embeddings": ds.embeddings.astype("<f4").tobytes(),
        "labels": ds.labels.astype("<u4").tobytes(),
        "text_embeddings": ds.classifier.rows.astype("<f4").tobytes(),
    }
    if ds.domains is not None:
        blobs["domains"] = ds.domains.astype("<u4").tobytes()
    suffix = {"embeddings": ".f32", "text_embeddings": ".f32", "labels": ".u32", "domains": ".u32"}
    files = {k: k + suffix[k] for k in blobs}
    for k, blob in blobs.items():
        (out / files[k]).write_bytes(blob)
    manifest = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "dim": ds.dim,
        "num_samples": len(ds),
        "num_classes": ds.num_classes,
        "class_names": list(ds.classifier.class_names),
        "dtype": "f32le",
        "scale": ds.classifier.scale,
        "bias": None if ds.classifier.bias is None else ds.classifier.bias.tolist(),
        "normalized": ds.normalized,
        "files": files,
        "crc32": {k: _crc(b) for k, b in blobs.items()},
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return mpath


def _read_blob(base: Path, manifest: dict, key: str, expected: int) -> bytes:
    name = manifest["files"][key]
    try:
        blob = (base / name).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{key} file {name!r} is missing") from None
    if len(blob) < expected:
        raise TruncatedFile(f"{key} file {name!r} has {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise DimMismatch(f"{key} file {name!r} has {len(blob)} bytes, expected {expected}")
    want = manifest.get("crc32", {}).get(key)
    if want is not None and _crc(blob) != int(want):
        raise ChecksumMismatch(f"{key} file {name!r} fails its CRC32 check")
    return blob


def _fix_norms(m: np.ndarray) -> np.ndarray:
    # f32 storage keeps unit rows within ~1e-7; only renormalize rows that drifted further
    norms = np.linalg.norm(m, axis=1)
    off = np.abs(norms - 1.0) > UNIT_TOL
    if np.any(off):
        m = m.copy()
        m[off] = normalize_rows(m[off])
    return m


def load_dataset(manifest_path) -> EmbeddingDataset:
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"dataset manifest {str(mpath)!r} not found") from None
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadMagic(f"{mpath} is not a dataset manifest: {e}") from None
    if not isinstance(manifest, dict) or manifest.get("magic") != MAGIC:
        raise BadMagic(f"{mpath} does not start a {MAGIC} dataset")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.get('version')!r}")
    if manifest.get("dtype") != "f32le":
        raise FormatError(f"unsupported dtype {manifest.get('dtype')!r}")
    n, d, c = int(manifest["num_samples"]), int(manifest["dim"]), int(manifest["num_classes"])
    base = mpath.parent

    emb = np.frombuffer(_read_blob(base, manifest, "embeddings", n * d * 4), dtype="<f4").reshape(n, d)
    labels = np.frombuffer(_read_blob(base, manifest, "labels", n * 4), dtype="<u4")
    text = np.frombuffer(_read_blob(base, manifest, "text_embeddings", c * d * 4), dtype="<f4").reshape(c, d)
    domains = None
    if "domains" in manifest["files"]:
        domains = np.frombuffer(_read_blob(base, manifest, "domains", n * 4), dtype="<u4").astype(np.int64)

    bad = np.flatnonzero(~np.all(np.isfinite(emb), axis=1))
    if bad.size:
        raise NonFiniteEmbedding(int(bad[0]))
    bad = np.flatnonzero(~np.all(np.isfinite(text), axis=1))
    if bad.size:
        raise NonFiniteEmbedding(int(bad[0]), "text_embeddings")
    over = np.flatnonzero(labels >= c)
    if over.size:
        raise LabelOutOfRange(f"label {int(labels[over[0]])} at row {int(over[0])} >= num_classes {c}")

    normalized = bool(manifest.get("normalized", True))
    emb = emb.astype(np.float64)
    if normalized:
        emb = _fix_norms(emb)
    clf = TextClassifier(
        _fix_norms(text.astype(np.float64)),
        tuple(manifest.get("class_names") or ()),
        scale=float(manifest.get("scale", 100.0)),
        bias=manifest.get("bias"),
    )
    return EmbeddingDataset(emb, labels.astype(np.int64), clf, domains, normalized)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    domain: int
    indices: np.ndarray = field(repr=False)
    seed: int = 0

    def __len__(self):
        return len(self.indices)


def partition(ds: EmbeddingDataset, m: int, seed: int) -> List[ClientShard]:
    """Split every domain evenly over ``m`` clients.

    Each domain's indices are shuffled with a seeded permutation and cut
    into ``m`` contiguous pieces whose sizes differ by at most one; each
    piece is then shuffled again to give that client's stream order.
    Client ids run domain by domain.
    """
    if m < 1:
        raise ValidationError("clients per domain must be >= 1")
    if len(ds) == 0:
        raise EmptyDomain("dataset has no samples")
    dom = ds.domain_ids()
    shards = []
    for di, d in enumerate(np.unique(dom)):
        idx = np.flatnonzero(dom == d)
        if idx.size < m:
            raise EmptyDomain(f"domain {int(d)} has {idx.size} samples for {m} clients")
        perm = client_rng(seed, ORDER_TAG, int(d)).permutation(idx)
        for j, piece in enumerate(np.array_split(perm, m)):
            cid = di * m + j
            order = client_rng(seed, STREAM_TAG, cid).permutation(piece)
            shards.append(ClientShard(cid, int(d), order, seed))
    return shards


def make_cluster_dataset(
    num_classes: int,
    dim: int,
    per_class: int,
    rng: np.random.Generator,
    noise: float = 0.1,
    num_domains: int = 1,
    domain_shift: float = 0.0,
    scale: float = 100.0,
) -> EmbeddingDataset:
    """Synthetic CLIP-like data: unit embeddings scattered around random class text embeddings.

    Each domain adds its own random offset of size ``domain_shift`` before
    normalization.
    """
    text = normalize_rows(rng.standard_normal((num_classes, dim)))
    shifts = rng.standard_normal((num_domains, dim))
    shifts = domain_shift * normalize_rows(shifts) if domain_shift > 0 else np.zeros_like(shifts)
    X, y, dom = [], [], []
    for di in range(num_domains):
        for c in range(num_classes):
            raw = text[c] + shifts[di] + noise * rng.standard_normal((per_class, dim))
            X.append(normalize_rows(raw))
            y.extend([c] * per_class)
            dom.extend([di] * per_class)
    return EmbeddingDataset(
        np.concatenate(X), np.array(y), TextClassifier(text, scale=scale), np.array(dom)
    )
