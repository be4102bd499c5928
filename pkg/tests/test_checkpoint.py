from collections import OrderedDict

import numpy as np
import pytest

from dsvit.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from dsvit.encoder import DSViTModel
from dsvit.errors import CheckpointFormatError
from dsvit.rtab import RTABHead

from conftest import micro_config, random_batch


def test_raw_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = OrderedDict([
        ("a.w", rng.normal(size=(3, 4)).astype(np.float32)),
        ("b.bias", rng.normal(size=(5,)).astype(np.float32)),
        ("c.cube", rng.normal(size=(2, 3, 4)).astype(np.float32)),
    ])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"dim": 4}, arrays, extra={"note": 1})
    config, back, extra = load_checkpoint(path)
    assert config == {"dim": 4}
    assert extra == {"note": 1}
    assert list(back) == list(arrays)
    for name in arrays:
        assert back[name].shape == arrays[name].shape
        assert back[name].tobytes() == arrays[name].tobytes()


def test_model_roundtrip_restores_forward_bitwise(tmp_path):
    cfg = micro_config()
    model = DSViTModel(cfg, np.random.default_rng(1))
    head = RTABHead(cfg.dim, 2, np.random.default_rng(2))
    batch = random_batch(cfg, 2, seed=3)
    before, _ = model.forward(batch)

    named = OrderedDict(model.named_parameters())
    named.update(head.named_parameters())
    arrays = OrderedDict((k, v.data) for k, v in named.items())
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"encoder": cfg.to_dict()}, arrays)

    config, back, _ = load_checkpoint(path)
    model2 = DSViTModel(cfg, np.random.default_rng(99))
    head2 = RTABHead(cfg.dim, 2, np.random.default_rng(98))
    model2.load_parameters({k: v for k, v in back.items() if not k.startswith("rtab.")})
    head2.load_parameters({k: v for k, v in back.items() if k.startswith("rtab.")})
    after, _ = model2.forward(batch)
    assert before.data.tobytes() == after.data.tobytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXXXXXX" + bytes(16))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_truncated_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {}, OrderedDict(w=np.ones((2, 2), dtype=np.float32)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "tr.ckpt"
    save_checkpoint(path, {}, OrderedDict(w=np.ones((2, 2), dtype=np.float32)))
    path.write_bytes(path.read_bytes() + b"!")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_mismatched_names_rejected_on_load():
    cfg = micro_config()
    model = DSViTModel(cfg, np.random.default_rng(4))
    arrays = {k: v.data for k, v in model.named_parameters().items()}
    arrays.pop("head.cls")
    from dsvit.errors import InvalidInputError

    with pytest.raises(InvalidInputError):
        model.load_parameters(arrays)
