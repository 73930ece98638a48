import numpy as np
import pytest

from mixcaps import tensor as T
from mixcaps.errors import ContractError, GradientCheckError
from mixcaps.gradcheck import gradient_check
from mixcaps.presets import build_preset


def tiny_batch(seed=0, n=2):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 20, 20, 3)), np.arange(n) % 2


def test_tiny_passes():
    rep = gradient_check(build_preset("tiny", seed=0), tiny_batch(), tol=1e-4)
    assert rep.passed
    assert {b.name for b in rep.blocks} == set(build_preset("tiny").parameters())


def test_tiny_single_and_side_features():
    gradient_check(build_preset("tiny", seed=1, kind="single"), tiny_batch(1))
    m = build_preset("tiny", seed=2, side_feature_len=2)
    x, y = tiny_batch(2)
    rep = gradient_check(m, (x, y, np.random.default_rng(0).uniform(size=(2, 2))))
    assert any(b.name.endswith("box.w") for b in rep.blocks)


def test_corrupted_gradient_names_block():
    def corrupt(name, g):
        return g * 1.01 if name == "expert1.caps.W" else g

    with pytest.raises(GradientCheckError, match="expert1.caps.W") as info:
        gradient_check(build_preset("tiny", seed=0), tiny_batch(), grad_transform=corrupt)
    assert info.value.report.failing == ["expert1.caps.W"]


def test_zero_batch_finite():
    x = np.zeros((2, 20, 20, 3))
    rep = gradient_check(build_preset("tiny", seed=0), (x, np.array([0, 1])), raise_on_fail=False)
    for b in rep.blocks:
        assert np.isfinite(b.error) and np.isfinite(b.grad_norm)


def test_deterministic():
    a = gradient_check(build_preset("tiny", seed=4), tiny_batch(4)).to_dict()
    b = gradient_check(build_preset("tiny", seed=4), tiny_batch(4)).to_dict()
    assert a == b


def test_requires_float64():
    T.set_default_dtype(np.float32)
    try:
        model = build_preset("tiny", seed=0)
    finally:
        T.set_default_dtype(np.float64)
    with pytest.raises(ContractError):
        gradient_check(model, tiny_batch())


def test_parameters_restored():
    m = build_preset("tiny", seed=0)
    before = {k: v.data.copy() for k, v in m.parameters().items()}
    gradient_check(m, tiny_batch())
    for k, v in m.parameters().items():
        assert np.array_equal(v.data, before[k]), k
