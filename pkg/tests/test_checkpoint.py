import numpy as np
import pytest

from peftocr import checkpoint
from peftocr.data import Vocabulary
from peftocr.errors import CheckpointError

from oracles import TINY, perturbed_model


@pytest.mark.parametrize("strategy", [("full_ft", "full_ft"), ("dora", "lora"), ("lora", "dora")])
def test_round_trip_is_bit_exact(strategy, rng, tmp_path):
    model = perturbed_model(strategy)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, Vocabulary("abc"), {"note": "x"})
    loaded, vocab, meta = checkpoint.load(path)
    assert vocab == Vocabulary("abc") and meta == {"note": "x"}
    assert loaded.strategy == model.strategy and loaded.config == model.config
    a, b = model.state_arrays(), loaded.state_arrays()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert checkpoint.to_bytes(loaded, vocab, meta) == path.read_bytes()
    imgs = rng.random((2, 1, TINY.image_height, TINY.image_width))
    tokens = np.array([[1, 3, 4]] * 2)
    assert np.array_equal(model.decode(tokens, model.encode(imgs)), loaded.decode(tokens, loaded.encode(imgs)))


def test_loaded_dora_tracks_base_weight():
    loaded, _, _ = checkpoint.from_bytes(checkpoint.to_bytes(perturbed_model(("dora", "frozen"))))
    site = next(iter(loaded.adapters))
    assert loaded.adapters[site].base_weight is loaded.params[site]


def test_corrupt_checkpoints(tmp_path):
    blob = checkpoint.to_bytes(perturbed_model(("full_ft", "full_ft")))
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(blob[:-5])
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(blob + b"\0")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "missing.ckpt")
