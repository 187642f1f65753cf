"""The checker must certify correct gradients and catch wrong ones."""

import numpy as np
import pytest

from gcascade import gradcheck
from gcascade import tensor as T


@pytest.fixture(autouse=True)
def _f64():
    prev = T.get_precision()
    T.set_precision("f64")
    yield
    T.set_precision(prev)


def test_relative_error_basics():
    assert gradcheck.relative_error(1.0, 1.0) == 0.0
    assert gradcheck.relative_error(np.zeros(0), np.zeros(0)) == 0.0
    # the floor keeps near-zero comparisons absolute
    assert gradcheck.relative_error(0.0, 5e-7, floor=1e-6) == pytest.approx(0.5)
    got = gradcheck.relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    assert got == pytest.approx(0.5)


def test_fd_gradient_matches_closed_form():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    num = gradcheck.fd_gradient(lambda a: float((a ** 2).sum()), x)
    assert np.allclose(num, 2 * x, atol=1e-6)


def test_away_from_kinks():
    arr = np.array([-2.0, -1e-5, 0.0, 1e-5, 0.5])
    out = gradcheck._away_from_kinks(arr)
    assert np.all(np.abs(out) >= 1e-3)
    assert out[0] == -2.0 and out[4] == 0.5
    assert out[1] == -1e-3 and out[3] == 1e-3


def test_op_checks_all_pass():
    results = gradcheck.run_op_checks()
    assert len(results) >= 30
    for r in results:
        assert r.ok(), f"{r.name}: rel err {r.max_rel_err:.3e}"


def test_wrong_backward_is_caught():
    # forward scales by 2 but the registered backward claims 3
    def lying(x):
        return T._record(x.data * 2.0, (x,), lambda g: (3.0 * g,))

    arr = np.random.default_rng(0).normal(size=(2, 5))
    res = gradcheck.check_fn("lying", lying, [arr])
    assert not res.ok()
    assert res.max_rel_err > 0.3


def test_decoder_check_passes():
    res = gradcheck.check_decoder()
    assert res.ok(), f"decoder rel err {res.max_rel_err:.3e}"
    assert res.checked > 0
    assert res.seconds < 120.0


def test_run_all_restores_precision_and_passes():
    T.set_precision("f32")
    results, worst = gradcheck.run_all(samples_per_param=1)
    assert T.get_precision() == "f32"
    assert worst < gradcheck.TOLERANCE
    assert any(r.name == "decoder.toy_pyramid" for r in results)
