import json

import numpy as np
import pytest

from pinvnet import checkpoint
from pinvnet.diffusion import Denoiser
from pinvnet.nn import Rng
from pinvnet.spnn import SpnnModel


def _models():
    m = SpnnModel.build((1, 4, 4), [6, 2], Rng(1), unshuffle=2, hidden=8, depth=2, activation="relu")
    d = Denoiser.create(16, 20, Rng(2), width=8, depth=2, emb_dim=4)
    return m, d


@pytest.mark.parametrize("which", [0, 1])
def test_round_trip_is_bit_identical(tmp_path, which):
    model = _models()[which]
    checkpoint.save(model, tmp_path / "a", {"k": 1}, 9, {"note": "x"})
    back, man = checkpoint.load(tmp_path / "a")
    params = dict(model.named_parameters()) if which == 0 else model.parameters()
    back_params = dict(back.named_parameters()) if which == 0 else back.parameters()
    assert params.keys() == back_params.keys()
    assert all(params[k].tobytes() == back_params[k].tobytes() for k in params)
    assert man["seed"] == 9 and man["config"] == {"k": 1} and man["extra"] == {"note": "x"}
    checkpoint.save(back, tmp_path / "b", {"k": 1}, 9, {"note": "x"})
    for name in (checkpoint.MANIFEST, checkpoint.BLOB):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_loaded_model_behaves_identically(tmp_path):
    m, _ = _models()
    checkpoint.save(m, tmp_path / "c")
    back, _ = checkpoint.load(tmp_path / "c")
    x = Rng(3).normal(size=(5, 16))
    assert np.array_equal(back.forward(x), m.forward(x))
    assert np.array_equal(back.pinv(m.forward(x), "learned"), m.pinv(m.forward(x), "learned"))


def test_manifest_table_covers_blob(tmp_path):
    m, _ = _models()
    checkpoint.save(m, tmp_path / "c")
    man = json.loads((tmp_path / "c" / checkpoint.MANIFEST).read_text())
    sizes = sum(8 * int(np.prod(e["shape"])) for e in man["tensors"])
    assert sizes == man["blob_bytes"] == (tmp_path / "c" / checkpoint.BLOB).stat().st_size
    assert len({e["name"] for e in man["tensors"]}) == len(man["tensors"])


def _edit_manifest(path, fn):
    p = path / checkpoint.MANIFEST
    man = json.loads(p.read_text())
    fn(man)
    p.write_text(json.dumps(man))


def test_corrupt_checkpoints_fail_loudly(tmp_path):
    m, _ = _models()
    for case in ("version", "blob", "table", "shape", "missing"):
        d = tmp_path / case
        checkpoint.save(m, d)
        if case == "version":
            _edit_manifest(d, lambda man: man.update(format_version=99))
        elif case == "blob":
            (d / checkpoint.BLOB).write_bytes((d / checkpoint.BLOB).read_bytes()[:-8])
        elif case == "table":
            _edit_manifest(d, lambda man: man["tensors"].pop())
        elif case == "shape":
            _edit_manifest(d, lambda man: man["tensors"][0].update(shape=[1]))
        else:
            (d / checkpoint.MANIFEST).unlink()
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(d)
