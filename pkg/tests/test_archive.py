import hashlib
import json
import struct

import numpy as np
import pytest

from eids.tinyformer import (
    REFERENCE,
    ChecksumMismatch,
    ModelConfig,
    ShapeMismatch,
    VersionMismatch,
    count_params,
    init_weights,
    load_weights,
    save_weights,
)
from eids.tinyformer import archive

from conftest import TINY


def reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def split_blob(blob):
    _, _, hlen = struct.unpack_from("<4sHI", blob)
    header = json.loads(blob[10:10 + hlen])
    return header, blob[10 + hlen:-32]


def rebuild(header, payload, version=1):
    raw = json.dumps(header).encode()
    return reseal(struct.pack("<4sHI", b"TFWA", version, len(raw)) + raw + payload)


@pytest.mark.parametrize("kind", ["none", "sin", "fourier", "dyn_rope"])
def test_round_trip_bit_identical(tmp_path, kind):
    w = init_weights(ModelConfig(pe_kind=kind), 3)
    path = save_weights(w, tmp_path / "m.tfw")
    back = load_weights(path)
    assert back.config == w.config
    assert list(back.params) == list(w.params)
    for k in w.params:
        assert back.params[k].tobytes() == w.params[k].tobytes()
    for k in w.buffers:
        np.testing.assert_array_equal(back.buffers[k], w.buffers[k])
    assert archive.to_bytes(back) == archive.to_bytes(w)


def test_reference_archive_count(tmp_path):
    path = save_weights(init_weights(REFERENCE, 0), tmp_path / "t1.tfw")
    assert archive.archive_param_count(path) == 5086


def test_same_outputs_after_reload(tmp_path, rng):
    w = init_weights(ModelConfig(**TINY, pe_kind="dyn_sin"), 8)
    back = load_weights(save_weights(w, tmp_path / "x.tfw"))
    X = rng.random((2, 5, 16)).astype(np.float32)
    M = np.ones((2, 5), dtype=bool)
    T = np.cumsum(rng.random((2, 5)), axis=1)
    np.testing.assert_array_equal(w.predict_proba(X, M, T), back.predict_proba(X, M, T))


@pytest.mark.parametrize("cut", [5, 12, 100, -1])
def test_truncation_detected(cut):
    blob = archive.to_bytes(init_weights(ModelConfig(**TINY), 0))
    with pytest.raises(ChecksumMismatch):
        archive.from_bytes(blob[:cut])


def test_bit_flip_detected():
    blob = bytearray(archive.to_bytes(init_weights(ModelConfig(**TINY), 0)))
    blob[-40] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        archive.from_bytes(bytes(blob))


def test_version_mismatch():
    blob = archive.to_bytes(init_weights(ModelConfig(**TINY), 0), version=2)
    with pytest.raises(VersionMismatch):
        archive.from_bytes(blob)


def test_bad_magic():
    with pytest.raises(archive.ArchiveError):
        archive.from_bytes(b"PK\x03\x04" + bytes(40))


def test_shape_disagreement_rejected():
    w = init_weights(ModelConfig(**TINY), 0)
    header, payload = split_blob(archive.to_bytes(w))
    header["config"]["d_ff"] = 9
    with pytest.raises(ShapeMismatch):
        archive.from_bytes(rebuild(header, payload))


def test_reference_count_enforced():
    # header count disagreeing with the reference tensors
    w = init_weights(REFERENCE, 0)
    header, payload = split_blob(archive.to_bytes(w))
    assert header["param_count"] == count_params(w) == 5086
    header["param_count"] = 5087
    with pytest.raises(ShapeMismatch):
        archive.from_bytes(rebuild(header, payload))
