import struct
import zlib

import numpy as np
import pytest

from subgdiff import checkpoint
from subgdiff.checkpoint import CheckpointError
from subgdiff.denoiser import DenoiserConfig, init_params


@pytest.fixture
def params():
    return init_params(DenoiserConfig(hidden_dim=4, num_layers=1, time_embed_dim=4, T=20), np.random.default_rng(0))


def test_round_trip(tmp_path, params):
    checkpoint.save(tmp_path / "m.ckpt", params, meta={"p": 0.5, "k": 10})
    back, meta = checkpoint.load(tmp_path / "m.ckpt")
    assert back.config == params.config
    assert meta == {"p": 0.5, "k": 10}
    for n in params.names:
        np.testing.assert_array_equal(back[n], params[n])


def test_layout(params):
    blob = checkpoint.dumps(params)
    assert blob[:4] == b"SGDF"
    version, hlen = struct.unpack_from("<HI", blob, 4)
    assert version == 1
    (count,) = struct.unpack_from("<Q", blob, 10 + hlen)
    assert count == params.size
    assert len(blob) == 10 + hlen + 8 + 8 * count + 4
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
    first = np.frombuffer(blob, "<f8", count=count, offset=18 + hlen)
    np.testing.assert_array_equal(first, params.flatten())


def test_flipped_byte_is_detected(params):
    blob = bytearray(checkpoint.dumps(params))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="CRC"):
        checkpoint.loads(bytes(blob))


def test_unsupported_version(params):
    blob = bytearray(checkpoint.dumps(params))
    blob[4:6] = struct.pack("<H", 0)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(bytes(blob))


@pytest.mark.parametrize("mutate", [lambda b: b[:-9], lambda b: b + b"\\x00", lambda b: b"XXXX" + b[4:], lambda b: b[:8]])
def test_malformed(params, mutate):
    with pytest.raises(CheckpointError):
        checkpoint.loads(mutate(checkpoint.dumps(params)))


def test_is_an_io_error(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(OSError):
        checkpoint.load(tmp_path / "junk")
