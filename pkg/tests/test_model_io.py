"""Checkpoint directory round-trip tests."""

import numpy as np
import pytest

from beatstream.config import tiny_demo_config
from beatstream.errors import FormatError, ShapeError
from beatstream.model_io import (
    Checkpoint,
    build_demo_checkpoint,
    load_checkpoint,
    save_checkpoint,
    tensor_names,
)


def test_tensor_names_cover_model():
    cfg = tiny_demo_config()
    names = tensor_names(cfg)
    assert len(names) == cfg.n_layers * 7 + 1
    assert names[-1] == "lm_head"
    assert "layers.1.mlp.down" in names


def test_demo_checkpoint_is_deterministic():
    a = build_demo_checkpoint(seed=3)
    b = build_demo_checkpoint(seed=3)
    for name in tensor_names(a.config):
        assert np.array_equal(a.tensors[name].codes, b.tensors[name].codes)
        assert np.array_equal(a.tensors[name].scales, b.tensors[name].scales)
    assert np.array_equal(a.embedding, b.embedding)
    c = build_demo_checkpoint(seed=4)
    assert not np.array_equal(a.embedding, c.embedding)


def test_save_load_round_trip(tmp_path):
    ckpt = build_demo_checkpoint(seed=1)
    save_checkpoint(ckpt, tmp_path / "m")
    back = load_checkpoint(tmp_path / "m")
    assert back.config == ckpt.config
    for name in tensor_names(ckpt.config):
        assert np.array_equal(back.tensors[name].codes, ckpt.tensors[name].codes)
        assert np.array_equal(back.tensors[name].scales, ckpt.tensors[name].scales)
        assert np.array_equal(back.tensors[name].zeros, ckpt.tensors[name].zeros)
    assert np.array_equal(back.embedding, ckpt.embedding)
    for k, v in ckpt.norms.items():
        assert np.array_equal(back.norms[k], v)


def test_missing_pieces_raise(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")
    ckpt = build_demo_checkpoint(seed=1)
    save_checkpoint(ckpt, tmp_path / "m")
    (tmp_path / "m" / "layers.0.attn.k.epws").unlink()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "m")


def test_validate_catches_shape_drift():
    ckpt = build_demo_checkpoint(seed=1)
    broken = Checkpoint(config=ckpt.config,
                        tensors={k: v for k, v in ckpt.tensors.items() if k != "lm_head"},
                        embedding=ckpt.embedding, norms=ckpt.norms)
    with pytest.raises(FormatError):
        broken.validate()
    wrong_emb = Checkpoint(config=ckpt.config, tensors=ckpt.tensors,
                           embedding=ckpt.embedding[:, :-1], norms=ckpt.norms)
    with pytest.raises(ShapeError):
        wrong_emb.validate()
