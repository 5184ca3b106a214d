"""Adam optimizer and parameter-set serialization."""

import numpy as np
import pytest

from dkd.errors import DataFormatError, InvalidArgumentError, PreconditionError
from dkd.params import MAGIC, ParamSet, adam_step
from dkd.tensor import backward, mul, sum as tsum


def simple_params(values):
    ps = ParamSet()
    for i, v in enumerate(values):
        ps.add(f"p{i}", np.asarray(v, dtype=np.float64))
    return ps


def test_zero_gradient_keeps_parameters():
    ps = simple_params([np.array([1.0, -2.0])])
    ps["p0"].grad = np.zeros(2)
    adam_step(ps, lr=0.1)
    np.testing.assert_array_equal(ps["p0"].data, [1.0, -2.0])
    assert ps.step_count == 1


def test_first_step_magnitude_is_lr():
    # hand-computed single Adam step: m_hat = g, v_hat = g^2
    # so the update is lr * g / (|g| + eps) = lr * sign(g) (up to eps)
    for g in (0.5, -3.0, 1e-3):
        ps = simple_params([np.array([2.0])])
        ps["p0"].grad = np.array([g])
        adam_step(ps, lr=0.01)
        expected = 2.0 - 0.01 * g / (abs(g) + 1e-8)
        np.testing.assert_allclose(ps["p0"].data, [expected], rtol=1e-12)


def test_missing_gradient_names_parameter():
    ps = simple_params([np.zeros(2), np.zeros(3)])
    ps["p0"].grad = np.zeros(2)
    with pytest.raises(PreconditionError, match="p1"):
        adam_step(ps)


def test_gradients_cleared_after_step():
    ps = simple_params([np.array([1.0])])
    ps["p0"].grad = np.array([1.0])
    adam_step(ps)
    assert ps["p0"].grad is None


def test_deterministic_ten_steps():
    def run():
        ps = simple_params([np.linspace(-1, 1, 6).reshape(2, 3)])
        for step in range(10):
            loss = tsum(mul(ps["p0"], ps["p0"]))
            backward(loss)
            adam_step(ps, lr=1e-2)
        return ps["p0"].data.copy()

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_duplicate_path_rejected():
    ps = ParamSet()
    ps.add("x", np.zeros(1))
    with pytest.raises(InvalidArgumentError):
        ps.add("x", np.zeros(1))


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    ps = ParamSet()
    ps.add("enc.conv.weight", rng.normal(size=(4, 3, 3, 3)))
    ps.add("enc.conv.bias", rng.normal(size=4))
    ps.add("head.scalar", np.array(2.5))
    f = tmp_path / "params.dkd"
    ps.save(f)
    back = ParamSet.load(f)
    assert back.paths() == ps.paths()
    for path, t in ps.items():
        np.testing.assert_array_equal(back[path].data, t.data)
        assert back[path].requires_grad


def test_save_is_byte_deterministic(tmp_path):
    ps = ParamSet()
    ps.add("a", np.arange(6.0).reshape(2, 3))
    f1, f2 = tmp_path / "a.dkd", tmp_path / "b.dkd"
    ps.save(f1)
    ps.save(f2)
    assert f1.read_bytes() == f2.read_bytes()
    assert f1.read_bytes()[:4] == MAGIC


def test_bad_magic_raises(tmp_path):
    f = tmp_path / "junk.dkd"
    f.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataFormatError):
        ParamSet.load(f)
