import struct
import zlib

import numpy as np
import pytest

from checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    dump_checkpoint,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from conftest import checkpoint_for, tiny_architecture
from errors import FormatError, IncompatibleVersionError
from network import Network
from shiftbench import dump_dataset, gen_pool, parse_dataset


@pytest.fixture
def checkpoint(tiny_bench):
    net = Network.initialize(tiny_architecture(), 12)
    return checkpoint_for(net, tiny_bench.base_val, seed=12)


def test_round_trip_is_bit_exact(checkpoint, tmp_path):
    path = save_checkpoint(checkpoint, tmp_path / "base.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.architecture == checkpoint.architecture
    assert loaded.meta == checkpoint.meta
    assert len(loaded.params) == len(checkpoint.params)
    for a, b in zip(loaded.params, checkpoint.params):
        assert a.shape == b.shape
        assert a.tobytes() == b.tobytes()


def test_serialization_is_deterministic(checkpoint):
    assert dump_checkpoint(checkpoint) == dump_checkpoint(checkpoint.copy())


def test_no_temp_file_left_behind(checkpoint, tmp_path):
    save_checkpoint(checkpoint, tmp_path / "base.ckpt")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["base.ckpt"]


def test_param_index_follows_weighted_layers(checkpoint):
    assert checkpoint.param_index(1) == 0
    assert checkpoint.param_index(4) == 2
    with pytest.raises(ValueError):
        checkpoint.param_index(2)


def test_truncations_raise_format_error(checkpoint):
    buf = dump_checkpoint(checkpoint)
    rng = np.random.default_rng(0)
    for cut in rng.integers(0, len(buf), size=100):
        with pytest.raises(FormatError):
            parse_checkpoint(buf[:cut])


def test_bit_flips_raise_format_error(checkpoint):
    buf = dump_checkpoint(checkpoint)
    rng = np.random.default_rng(1)
    for _ in range(100):
        pos = int(rng.integers(0, len(buf)))
        corrupt = bytearray(buf)
        corrupt[pos] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises(FormatError):
            parse_checkpoint(bytes(corrupt))


def test_wrong_magic_raises_format_error(checkpoint):
    buf = dump_checkpoint(checkpoint)
    body = b"NOTACKPT" + buf[len(MAGIC):-4]
    with pytest.raises(FormatError):
        parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_other_version_raises_incompatible_version(checkpoint):
    buf = dump_checkpoint(checkpoint)
    body = MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + buf[len(MAGIC) + 4:-4]
    with pytest.raises(IncompatibleVersionError):
        parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_dataset_container_round_trip_and_corruption():
    pool = gen_pool(3, 9, seed=5, classes=[0, 2], name="pool_test")
    buf = dump_dataset(pool)
    loaded = parse_dataset(buf)
    assert loaded.dataset_id == pool.dataset_id
    assert loaded.images.data.tobytes() == pool.images.data.tobytes()
    assert np.array_equal(loaded.labels, pool.labels)
    assert (loaded.name, loaded.split, loaded.seed, loaded.class_count) == ("pool_test", "pool", 5, 3)

    rng = np.random.default_rng(2)
    for cut in rng.integers(0, len(buf), size=20):
        with pytest.raises(FormatError):
            parse_dataset(buf[:cut])
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0x10
    with pytest.raises(FormatError):
        parse_dataset(bytes(flipped))
