import numpy as np
import pytest
from hypothesis import given

from latte.errors import BadClass, BadClient, DimMismatch, FormatError, TruncatedFile, ValidationError
from latte.server import (
    FRAMING_BYTES,
    OP_DOWNLOAD,
    OP_UPLOAD,
    GlobalMemory,
    decode_records,
    encode_record,
    payload_bytes,
)

from .oracles import check_retrieval, retrieval_cases


def test_single_upload_sets_one_slot():
    g = GlobalMemory(4, 3, 2)
    g.upload(2, {1: [1.0, 0.0]})
    assert np.allclose(g.slot(1, 2), [1.0, 0.0])
    assert g.filled().sum() == 1


def test_reupload_overwrites():
    g = GlobalMemory(2, 2, 2)
    g.upload(0, {0: [1.0, 0.0]})
    g.upload(0, {0: [0.0, 1.0]})
    assert np.allclose(g.slot(0, 0), [0.0, 1.0])


def test_empty_prototype_keeps_stale_slot():
    g = GlobalMemory(4, 2, 2)
    g.upload(1, {3: [0.6, 0.8]})
    g.upload(1, {3: None, 0: [1.0, 0.0]})
    assert np.allclose(g.slot(3, 1), [0.6, 0.8])


def test_upload_validation():
    g = GlobalMemory(2, 2, 2)
    with pytest.raises(BadClient):
        g.upload(2, {0: [1.0, 0.0]})
    with pytest.raises(BadClass):
        g.upload(0, {5: [1.0, 0.0]})
    with pytest.raises(DimMismatch):
        g.upload(0, {0: [1.0, 0.0, 0.0]})
    with pytest.raises(ValidationError):
        g.upload(0, {0: [2.0, 0.0]})
    # a rejected batch writes nothing
    with pytest.raises(DimMismatch):
        g.upload(0, {0: [1.0, 0.0], 1: [1.0]})
    assert not g.filled().any()


def test_retrieve_only_own_slot_is_empty():
    g = GlobalMemory(1, 3, 2)
    g.upload(0, {0: [1.0, 0.0]})
    assert g.retrieve(0, {0: [1.0, 0.0]}, 5) == {0: []}


def test_retrieve_vacuous_threshold_returns_all_others():
    g = GlobalMemory(1, 4, 2)
    for i in range(4):
        g.upload(i, {0: [np.cos(i), np.sin(i)]})
    got = g.retrieve(1, {0: [1.0, 0.0]}, 3)[0]
    assert sorted(r.origin for r in got) == [0, 2, 3]


def test_retrieve_picks_most_similar():
    # clients are 0-based here: the example's clients 1, 2, 3 are 0, 1, 2
    g = GlobalMemory(1, 3, 2)
    g.upload(1, {0: [1.0, 0.0]})
    g.upload(2, {0: [0.0, 1.0]})
    (r,) = g.retrieve(0, {0: [1.0, 0.0]}, 1)[0]
    assert r.origin == 1 and r.similarity == pytest.approx(1.0)


def test_retrieve_k_zero_is_empty():
    g = GlobalMemory(2, 3, 2)
    for i in range(3):
        g.upload(i, {0: [1.0, 0.0], 1: [0.0, 1.0]})
    assert g.retrieve(0, {0: [1.0, 0.0], 1: [0.0, 1.0]}, 0) == {0: [], 1: []}


def test_retrieve_ties_go_to_lower_client():
    g = GlobalMemory(1, 4, 2)
    for i in (3, 1, 2):
        g.upload(i, {0: [1.0, 0.0]})
    got = g.retrieve(0, {0: [1.0, 0.0]}, 2)[0]
    assert [r.origin for r in got] == [1, 2]


@given(retrieval_cases())
def test_retrieve_matches_exhaustive_sort(case):
    check_retrieval(*case)


@pytest.mark.parametrize("bps,dtype", [(2, np.float16), (4, np.float32)])
def test_wire_round_trip(bps, dtype, rng):
    vecs = rng.standard_normal((3, 5))
    buf = b"".join(encode_record(OP_UPLOAD if k else OP_DOWNLOAD, 7 + k, k, v, bps) for k, v in enumerate(vecs))
    recs = decode_records(buf, bps)
    assert [(r.opcode, r.client, r.cls) for r in recs] == [(OP_DOWNLOAD, 7, 0), (OP_UPLOAD, 8, 1), (OP_UPLOAD, 9, 2)]
    for r, v in zip(recs, vecs):
        assert np.array_equal(r.values, v.astype(dtype))
        assert r.payload_bytes == 5 * bps
    assert len(buf) == 3 * (FRAMING_BYTES + 5 * bps)


def test_payload_bytes_excludes_framing():
    rec = encode_record(OP_UPLOAD, 0, 0, np.ones(512), 2)
    assert payload_bytes(rec) == 1024
    assert len(rec) == 1024 + FRAMING_BYTES


def test_decode_detects_damage():
    rec = encode_record(OP_UPLOAD, 0, 0, np.ones(4), 4)
    with pytest.raises(TruncatedFile):
        decode_records(rec[:-1], 4)
    with pytest.raises(TruncatedFile):
        decode_records(rec + b"\x01", 4)
    with pytest.raises(FormatError):
        decode_records(rec, 2)
    with pytest.raises(ValidationError):
        encode_record(OP_UPLOAD, 0, 0, np.ones(4), 8)
