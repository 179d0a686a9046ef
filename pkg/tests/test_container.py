import struct

import numpy as np
import pytest

from bvood import container
from bvood.container import ContainerError, decode_tensor, encode_tensor, from_bytes, load, save, to_bytes
from bvood.factorgen import PartitionSpec, generate_partition
from bvood.selection import DetectorSpec
from bvood.vae import VaeConfig, VaeModel


def model(seed=0, n_latent=3, hidden=(5,)):
    return VaeModel.initialize(VaeConfig(n_latent=n_latent, hidden=hidden, beta=1.4), np.random.default_rng(seed))


def assert_same_model(a, b):
    assert a.config == b.config
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_header_layout():
    data = container.pack([("kind", b"model")])
    assert data[:4] == b"BVOD"
    assert struct.unpack_from("<II", data, 4) == (1, 1)


@pytest.mark.parametrize("arr", [np.float64(2.5), np.arange(6.0).reshape(2, 3), np.zeros((0, 4)),
                                 np.array([np.inf, -0.0, np.nan])])
def test_tensor_roundtrip(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.shape == np.shape(arr)
    assert out.tobytes() == np.asarray(arr, dtype=np.float64).tobytes()


def test_model_roundtrip(tmp_path):
    m = model()
    path = save(m, tmp_path / "m.bvod")
    assert_same_model(m, load(path))
    assert to_bytes(load(path)) == path.read_bytes()


def test_dataset_roundtrip():
    d = generate_partition(PartitionSpec("traffic", "low", n_train=4, n_val=2, n_test1=0, n_test2=0))["train"]
    back = from_bytes(to_bytes(d))
    assert back.pixels.tobytes() == d.pixels.tobytes()
    assert back.labels == d.labels and back.name == d.name
    assert np.array_equal(back.scene_ids, d.scene_ids)


def test_spec_roundtrip():
    spec = DetectorSpec("time-of-day", model(1), 2, 0.123456789, 75, 1.4, 3)
    back = from_bytes(to_bytes(spec))
    assert (back.factor, back.latent, back.tau, back.percentile, back.beta, back.n_latent) == \
        ("time-of-day", 2, 0.123456789, 75, 1.4, 3)
    assert_same_model(spec.model, back.model)


def test_bad_magic_rejected():
    data = bytearray(to_bytes(model()))
    data[0] ^= 0xFF
    with pytest.raises(ContainerError, match="magic"):
        from_bytes(bytes(data))


def test_unknown_version_rejected():
    data = bytearray(to_bytes(model()))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(ContainerError, match="version"):
        from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [3, 11, 20, -1, -100])
def test_truncation_rejected(cut):
    data = to_bytes(model())
    with pytest.raises(ContainerError):
        from_bytes(data[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(ContainerError):
        from_bytes(to_bytes(model()) + b"\0")


def test_mismatched_shapes_rejected():
    m = model()
    m.params["enc0.W"] = m.params["enc0.W"][:, :4]
    with pytest.raises(ContainerError):
        from_bytes(to_bytes(m))


def test_failed_save_leaves_target(tmp_path):
    path = save(model(0), tmp_path / "m.bvod")
    before = path.read_bytes()
    with pytest.raises(TypeError):
        save(object(), path)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["m.bvod"]
