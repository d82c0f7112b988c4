"""Server side: the (class x client) prototype table, top-k retrieval and the wire encoding."""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from .core import UNIT_TOL
from .errors import BadClass, BadClient, DimMismatch, FormatError, TruncatedFile, ValidationError

OP_UPLOAD = 1
OP_DOWNLOAD = 2

_HEADER = struct.Struct("<BIII")  # opcode, client, class, dim
_LENGTH = struct.Struct("<I")
_SCALAR_DTYPES = {2: "<f2", 4: "<f4"}


@dataclass(frozen=True)
class Retrieved:
    origin: int
    prototype: np.ndarray
    similarity: float


class GlobalMemory:
    """One prototype slot per (class, client); empty until that client uploads.

    Uploads from different clients write disjoint slots. A per-class lock
    makes each class row an atomic unit, so a retrieval never sees a
    half-written slot.
    """

    def __init__(self, num_classes: int, num_clients: int, dim: int, require_unit: bool = True):
        if num_classes < 1 or num_clients < 1 or dim < 1:
            raise ValidationError("global memory needs positive classes, clients and dim")
        self.num_classes = num_classes
        self.num_clients = num_clients
        self.dim = dim
        self.require_unit = require_unit
        self._slots = np.zeros((num_classes, num_clients, dim))
        self._filled = np.zeros((num_classes, num_clients), dtype=bool)
        self._locks = [threading.Lock() for _ in range(num_classes)]

    def _check_client(self, i: int):
        if not 0 <= i < self.num_clients:
            raise BadClient(f"client {i} outside [0, {self.num_clients})")

    def slot(self, y: int, i: int) -> Optional[np.ndarray]:
        with self._locks[y]:
            return self._slots[y, i].copy() if self._filled[y, i] else None

    def filled(self) -> np.ndarray:
        return self._filled.copy()

    def upload(self, i: int, protos: Mapping[int, Optional[np.ndarray]]) -> int:
        """Overwrite client ``i``'s slot for every class with a prototype.

        Classes mapped to None keep whatever the slot held before. Returns
        the number of slots written.
        """
        self._check_client(i)
        checked = {}
        for y, p in protos.items():
            if not 0 <= y < self.num_classes:
                raise BadClass(f"class {y} outside [0, {self.num_classes})")
            if p is None:
                continue
            p = np.asarray(p, dtype=np.float64)
            if p.shape != (self.dim,):
                raise DimMismatch(f"prototype shape {p.shape} != ({self.dim},)")
            if not np.all(np.isfinite(p)):
                raise ValidationError("prototype has non-finite components")
            if self.require_unit and abs(np.linalg.norm(p) - 1.0) > UNIT_TOL:
                raise ValidationError(f"prototype for class {y} is not unit norm")
            checked[y] = p
        for y, p in checked.items():
            with self._locks[y]:
                self._slots[y, i] = p
                self._filled[y, i] = True
        return len(checked)

    def retrieve(self, i: int, queries: Mapping[int, np.ndarray], k_e: int) -> Dict[int, List[Retrieved]]:
        """Top-``k_e`` foreign prototypes per class by cosine similarity to the query.

        The caller's own slot is never returned. Similarity ties go to the
        lower client index.
        """
        self._check_client(i)
        if k_e < 0:
            raise ValidationError("k_e must be >= 0")
        out: Dict[int, List[Retrieved]] = {}
        for y, q in queries.items():
            if not 0 <= y < self.num_classes:
                raise BadClass(f"class {y} outside [0, {self.num_classes})")
            q = np.asarray(q, dtype=np.float64)
            if q.shape != (self.dim,):
                raise DimMismatch(f"query shape {q.shape} != ({self.dim},)")
            if k_e == 0:
                out[y] = []
                continue
            with self._locks[y]:
                mask = self._filled[y].copy()
                slots = self._slots[y].copy()
            mask[i] = False
            idx = np.flatnonzero(mask)
            if idx.size == 0:
                out[y] = []
                continue
            cand = slots[idx]
            sims = (cand @ q) / (np.linalg.norm(cand, axis=1) * np.linalg.norm(q))
            order = np.lexsort((idx, -sims))[:k_e]
            out[y] = [Retrieved(int(idx[j]), cand[j], float(sims[j])) for j in order]
        return out


def encode_record(opcode: int, client: int, cls: int, vec, bytes_per_scalar: int = 4) -> bytes:
    """Length-prefixed record: u32 length, then u8 op, u32 client, u32 class, u32 dim, scalars."""
    try:
        dtype = _SCALAR_DTYPES[bytes_per_scalar]
    except KeyError:
        raise ValidationError(f"bytes_per_scalar must be 2 or 4, got {bytes_per_scalar}") from None
    vec = np.asarray(vec, dtype=np.float64)
    body = _HEADER.pack(opcode, client, cls, vec.size) + vec.astype(dtype).tobytes()
    return _LENGTH.pack(len(body)) + body


@dataclass(frozen=True)
class WireRecord:
    opcode: int
    client: int
    cls: int
    values: np.ndarray

    @property
    def payload_bytes(self) -> int:
        return self.values.nbytes


def decode_records(buf: bytes, bytes_per_scalar: int = 4) -> List[WireRecord]:
    dtype = _SCALAR_DTYPES[bytes_per_scalar]
    out = []
    pos = 0
    while pos < len(buf):
        if pos + _LENGTH.size > len(buf):
            raise TruncatedFile("record length prefix cut short")
        (length,) = _LENGTH.unpack_from(buf, pos)
        pos += _LENGTH.size
        if pos + length > len(buf) or length < _HEADER.size:
            raise TruncatedFile("record body cut short")
        op, client, cls, dim = _HEADER.unpack_from(buf, pos)
        if length != _HEADER.size + dim * bytes_per_scalar:
            raise FormatError(f"record length {length} inconsistent with dim {dim}")
        values = np.frombuffer(buf, dtype=dtype, count=dim, offset=pos + _HEADER.size)
        out.append(WireRecord(op, client, cls, values))
        pos += length
    return out


def payload_bytes(record: bytes) -> int:
    """Scalar bytes carried by one encoded record (framing excluded)."""
    return len(record) - _LENGTH.size - _HEADER.size


FRAMING_BYTES = _LENGTH.size + _HEADER.size
