import struct
import zlib

import numpy as np
import pytest

from mixcaps.checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from mixcaps.errors import CorruptFileError, FormatError, ShapeMismatchError, VersionMismatchError
from mixcaps.presets import build_preset


def _ckpt(kind="mixcaps", seed=3):
    rng = np.random.default_rng(seed)
    return ModelCheckpoint(build_preset("desk", seed=seed, kind=kind), step=17, seed=seed,
                           rng_state=rng.bit_generator.state, train_config={"epochs": 10})


def test_round_trip_bit_exact(tmp_path, rng):
    ck = _ckpt()
    x = rng.uniform(size=(3, 80, 80, 3))
    before = ck.model.forward(x).o.data.copy()
    save_checkpoint(ck, tmp_path / "m.ck")
    back = load_checkpoint(tmp_path / "m.ck")
    assert np.array_equal(back.model.forward(x).o.data, before)
    for k, v in ck.state_dict().items():
        assert np.array_equal(back.state_dict()[k], v)
    assert (back.step, back.seed, back.rng_state, back.train_config) == (17, 3, ck.rng_state, {"epochs": 10})
    assert back.model.kind == "mixcaps"


def test_single_kind_round_trip(tmp_path):
    save_checkpoint(_ckpt("single"), tmp_path / "s.ck")
    assert load_checkpoint(tmp_path / "s.ck").model.kind == "single"


def test_resave_identical_bytes(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "a.ck")
    save_checkpoint(load_checkpoint(tmp_path / "a.ck"), tmp_path / "b.ck")
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_into_template(tmp_path):
    save_checkpoint(_ckpt(seed=3), tmp_path / "m.ck")
    template = build_preset("desk", seed=99)
    load_checkpoint(tmp_path / "m.ck", template=template)
    for k, v in _ckpt(seed=3).state_dict().items():
        assert np.array_equal(template.parameters()[k].data, v)


def test_desk_into_paper_names_tensor(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "m.ck")
    with pytest.raises(ShapeMismatchError, match="expert0.conv1.w"):
        load_checkpoint(tmp_path / "m.ck", template=build_preset("paper", seed=0))


def test_mismatch_leaves_template_untouched(tmp_path):
    save_checkpoint(_ckpt(kind="single"), tmp_path / "m.ck")
    template = build_preset("desk", seed=5)
    before = {k: v.data.copy() for k, v in template.parameters().items()}
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(tmp_path / "m.ck", template=template)
    for k, v in template.parameters().items():
        assert np.array_equal(v.data, before[k])


@pytest.mark.parametrize("where", [10, 200, -40, -2])
def test_corruption_detected(tmp_path, where):
    save_checkpoint(_ckpt(), tmp_path / "m.ck")
    raw = bytearray((tmp_path / "m.ck").read_bytes())
    raw[where] ^= 0xFF
    (tmp_path / "m.ck").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.ck")


def test_truncated(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "m.ck")
    raw = (tmp_path / "m.ck").read_bytes()
    (tmp_path / "m.ck").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptFileError):
        load_checkpoint(tmp_path / "m.ck")


def test_version_checked(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "m.ck")
    raw = bytearray((tmp_path / "m.ck").read_bytes())
    struct.pack_into("<H", raw, 4, 2)
    body = bytes(raw[:-4])
    (tmp_path / "m.ck").write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "m.ck")
