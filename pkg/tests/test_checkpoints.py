import numpy as np
import pytest

from advspeech.errors import FormatError
from advspeech.tensorgrad import ParameterSet
from advspeech.utils.manifest import (
    config_hash,
    read_manifest,
    record_checkpoint,
    start_manifest,
    write_manifest,
)
from advspeech.utils.ntv1 import dumps, loads, read_checkpoint, write_checkpoint


def _params():
    rng = np.random.default_rng(0)
    return ParameterSet(
        {
            "conv.w": rng.normal(size=(4, 3, 5)),
            "conv.b": rng.normal(size=4) * 1e-300,
            "scale": np.array(np.pi),
        }
    )


def test_round_trip_is_exact(tmp_path):
    params = _params()
    path = write_checkpoint(params, tmp_path / "model.ntv1", {"kind": "unet_at", "epochs": 2})
    loaded, sidecar = read_checkpoint(path)
    assert loaded.names() == params.names()
    for name in params.names():
        assert loaded[name].shape == params[name].shape
        assert np.array_equal(loaded[name].data, params[name].data)
    assert sidecar == {"epochs": 2, "kind": "unet_at"}


def test_dumps_is_stable():
    assert dumps(_params()) == dumps(loads(dumps(_params())))
    assert dumps(_params()).startswith("ntv1 3\ntensor conv.w 3 4 3 5\n")


def test_missing_sidecar_reads_as_empty(tmp_path):
    path = write_checkpoint(_params(), tmp_path / "bare.ntv1")
    assert read_checkpoint(path)[1] == {}


@pytest.mark.parametrize(
    "text,message",
    [
        ("", "empty"),
        ("ntv2 1\n", "bad header"),
        ("ntv1 2\ntensor a 1 2\n1 2\n", "truncated"),
        ("ntv1 1\nweights a 1 2\n1 2\n", "bad tensor line"),
        ("ntv1 1\ntensor a 2 2\n1 2\n", "declares rank"),
        ("ntv1 1\ntensor a 1 3\n1 2\n", "expected 3"),
    ],
)
def test_malformed_checkpoints(text, message):
    with pytest.raises(FormatError, match=message) as info:
        loads(text, "bad.ntv1")
    assert info.value.module == "checkpoint"


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FormatError, match="does not exist"):
        read_checkpoint(tmp_path / "nowhere.ntv1")


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_manifest_round_trip(tmp_path):
    checkpoint = write_checkpoint(_params(), tmp_path / "asr.ntv1")
    manifest = start_manifest("train-asr", ["train-asr", "--seed", "3"], {"seed": 3}, {"seed": 3})
    record_checkpoint(manifest, "asr", checkpoint)
    manifest.outputs.append(str(checkpoint))
    write_manifest(manifest, tmp_path)
    loaded = read_manifest(tmp_path)
    assert loaded.command == "train-asr"
    assert loaded.config_hash == config_hash({"seed": 3})
    assert len(loaded.checkpoint_hashes["asr"]) == 64
    assert loaded.finished_at >= loaded.started_at
