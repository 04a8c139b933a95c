import struct

import numpy as np
import pytest

from sodnet.checkpoint import (
    CheckpointError,
    apply_checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    sidecar,
)
from sodnet.config import DecoderConfig, EncoderConfig
from sodnet.decoder import build_model


def test_wire_layout_by_hand():
    buf = encode_checkpoint({"ab": np.array([[1.5, -2.0]], dtype=np.float32)}, 7)
    expected = (b"M3NT" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + bytes([2])
                + struct.pack("<QQ", 1, 2) + struct.pack("<ff", 1.5, -2.0) + struct.pack("<I", 7))
    assert buf == expected


def test_round_trip_is_bit_exact():
    rng = np.random.default_rng(0)
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5).astype(np.float32),
               "s": np.array(2.5, dtype=np.float32)}
    ck = decode_checkpoint(encode_checkpoint(tensors, 42))
    assert ck.step == 42 and list(ck.tensors) == ["w", "b", "s"]
    for k, v in tensors.items():
        assert ck.tensors[k].tobytes() == v.tobytes()
    assert encode_checkpoint(ck.tensors, ck.step) == encode_checkpoint(tensors, 42)


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\x00",
                                    lambda b: b[:4] + struct.pack("<I", 9) + b[8:]])
def test_corrupt_checkpoints_are_rejected(mutate):
    buf = encode_checkpoint({"w": np.zeros(3, np.float32)}, 1)
    with pytest.raises(CheckpointError):
        decode_checkpoint(mutate(buf))


def test_save_load_apply(tmp_path):
    enc, dec = EncoderConfig(stage_dims=(4, 8, 16, 32), window=4), DecoderConfig(r=1, d_mab=8, window=(4, 4))
    a = build_model(enc, dec, 1)
    path = tmp_path / "m.m3nt"
    save_checkpoint(path, a, 3, "seed = 1\n")
    assert sidecar(path).read_text() == "seed = 1\n"
    b = build_model(enc, dec, 2)
    ck = load_checkpoint(path)
    apply_checkpoint(b, ck, np.float32)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.astype(np.float32).tobytes() == pb.data.tobytes()
    other = build_model(enc, DecoderConfig(r=2, d_mab=8, window=(4, 4)), 0)
    with pytest.raises(CheckpointError):
        apply_checkpoint(other, ck)
