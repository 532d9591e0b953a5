import numpy as np
import pytest

from livecast import container
from livecast.container import ContainerError


def test_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2, 3], dtype=np.int64)}
    container.save(tmp_path / "x.lcst", arrays, {"kind": "test", "n": 3})
    back, meta = container.load(tmp_path / "x.lcst")
    assert meta["kind"] == "test" and meta["n"] == 3
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
        # payloads are stored as 8-byte floats
        assert back[k].dtype == np.float64


def test_bytes_round_trip_is_stable():
    arrays = {"w": np.random.default_rng(0).normal(size=(3, 4))}
    blob = container.dumps(arrays, {"kind": "x"})
    assert container.dumps(*container.loads(blob)) == blob


def test_corrupt_input_raises(tmp_path):
    with pytest.raises(ContainerError):
        container.loads(b"not a container")
    blob = container.dumps({"w": np.ones(4)}, {})
    with pytest.raises(ContainerError):
        container.loads(blob[:-5])
