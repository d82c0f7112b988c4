"""Client-side memories: per-class entropy queues, prototypes, external memory and merge."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .core import EPS_NORM
from .errors import BadClass, ValidationError, ZeroVector

COSINE = "cosine"
EUCLIDEAN = "euclidean"
GEOMETRIES = (COSINE, EUCLIDEAN)


@dataclass(frozen=True)
class MemoryEntry:
    embedding: np.ndarray
    entropy: float
    seq: int
    origin: Optional[int] = None  # None for local entries, uploader id for external ones

    @property
    def is_local(self) -> bool:
        return self.origin is None


@dataclass(frozen=True)
class Insertion:
    action: str  # "inserted" | "replaced" | "rejected"
    evicted: Optional[MemoryEntry] = None

    def __str__(self):
        return self.action


class ClassQueue:
    """Bounded queue that keeps the ``capacity`` lowest-entropy entries.

    Backed by a heap on ``(-entropy, -seq)`` so the root is the entry that
    would be evicted next: highest entropy, latest insertion among ties.
    """

    def __init__(self, capacity: int):
        # heap keys never tie: seq is unique per LocalMemory
        if capacity < 1:
            raise ValidationError("queue capacity must be >= 1")
        self.capacity = capacity
        self._heap: list = []

    def __len__(self):
        return len(self._heap)

    def push(self, entry: MemoryEntry) -> Insertion:
        key = (-entry.entropy, -entry.seq, entry)
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, key)
            return Insertion("inserted")
        worst = self._heap[0][2]
        if entry.entropy < worst.entropy:
            heapq.heapreplace(self._heap, key)
            return Insertion("replaced", worst)
        return Insertion("rejected")

    def max_entropy(self) -> float:
        return self._heap[0][2].entropy if self._heap else float("nan")

    def entries(self) -> List[MemoryEntry]:
        """Entries sorted from most to least certain."""
        return sorted((k[2] for k in self._heap), key=lambda e: (e.entropy, e.seq))


class LocalMemory:
    """One bounded priority queue per class."""

    def __init__(self, num_classes: int, capacity: int):
        if num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.capacity = capacity
        self.queues = [ClassQueue(capacity) for _ in range(num_classes)]
        self._seq = itertools.count()
        self.version = 0  # bumped whenever any queue's contents change

    def update(self, f, pseudo: int, h: float) -> Insertion:
        if not 0 <= pseudo < self.num_classes:
            raise BadClass(f"class {pseudo} outside [0, {self.num_classes})")
        if not (h >= 0 and np.isfinite(h)):
            raise ValidationError(f"entropy must be finite and >= 0, got {h}")
        emb = np.array(f, dtype=np.float64)
        emb.setflags(write=False)
        result = self.queues[pseudo].push(MemoryEntry(emb, float(h), next(self._seq)))
        if result.action != "rejected":
            self.version += 1
        return result

    def entries(self, y: int) -> List[MemoryEntry]:
        return self.queues[y].entries()

    def sizes(self) -> List[int]:
        return [len(q) for q in self.queues]

    def __len__(self):
        return sum(self.sizes())


def compute_prototype(entries: Sequence[MemoryEntry], gamma: float, geometry: str = COSINE) -> Optional[np.ndarray]:
    """Certainty-weighted summary of one class queue.

    Weights are ``exp(-gamma * H)``. The cosine geometry L2-normalizes the
    weighted sum; the euclidean geometry returns the weighted mean, which
    keeps the prototype inside the data support when embeddings are not
    unit norm. Returns None for an empty queue.
    """
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    if not entries:
        return None
    emb = np.stack([e.embedding for e in entries])
    h = np.array([e.entropy for e in entries])
    # shift by the minimum entropy: a common factor that both geometries cancel
    w = np.exp(-gamma * (h - h.min()))
    s = w @ emb
    if geometry == EUCLIDEAN:
        return s / w.sum()
    n = float(np.linalg.norm(s))
    if n <= EPS_NORM:
        raise ZeroVector("prototype weighted sum cancels out")
    return s / n


class ExternalMemory:
    """Foreign prototypes per class, as downloaded in the last retrieval."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.lists: List[List[MemoryEntry]] = [[] for _ in range(num_classes)]

    @classmethod
    def from_entries(cls, num_classes: int, per_class: Dict[int, Iterable[MemoryEntry]]) -> "ExternalMemory":
        ext = cls(num_classes)
        for y, items in per_class.items():
            ext.lists[y] = list(items)
        return ext

    def entries(self, y: int) -> List[MemoryEntry]:
        return self.lists[y]

    def sizes(self) -> List[int]:
        return [len(l) for l in self.lists]

    def __len__(self):
        return sum(self.sizes())


def merge(local: LocalMemory, external: Optional[ExternalMemory], k_l: int) -> List[List[MemoryEntry]]:
    """Per class, keep the ``k_l`` lowest-entropy entries of local and external memory.

    Ties go to local entries, then to the lower sequence number.
    """
    merged = []
    for y in range(local.num_classes):
        pool = list(local.entries(y))
        if external is not None:
            pool.extend(external.entries(y))
        pool.sort(key=lambda e: (e.entropy, 0 if e.is_local else 1, e.seq))
        merged.append(pool[:k_l])
    return merged
