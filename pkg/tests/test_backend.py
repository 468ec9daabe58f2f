import numpy as np
import pytest
from hypothesis import given, strategies as st

from plisim import _backend, _pykernels


def test_backend_reports_available_implementations():
    impls = _backend.implementations()
    assert "python" in impls
    assert _backend.BACKEND in impls


@pytest.mark.parametrize("impl", _backend.implementations())
def test_euler_scalar_hand_value(impl):
    out, bad = _backend.euler_lti(np.array([[-1.0]]), np.zeros((1, 1)), np.zeros(1), np.array([1.0]), 0.1, 3,
                                  impl=_backend.implementations()[impl])
    assert bad == -1
    np.testing.assert_allclose(out[:, 0], [0.9, 0.81, 0.729], rtol=0, atol=1e-15)


@pytest.mark.parametrize("impl", _backend.implementations())
def test_discrete_lti_power(impl):
    out, bad = _backend.discrete_lti(np.array([[0.9]]), np.zeros(1), np.array([1.0]), 10, impl=_backend.implementations()[impl])
    assert bad == -1
    assert out[-1, 0] == pytest.approx(0.9 ** 10, rel=1e-14)


@pytest.mark.parametrize("impl", _backend.implementations())
def test_divergence_index_reported(impl):
    out, bad = _backend.euler_lti(np.array([[1e300]]), np.zeros((1, 1)), np.zeros(1), np.array([1e10]), 1e10, 5,
                                  impl=_backend.implementations()[impl])
    assert bad == 0


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_compiled_and_python_kernels_agree_bitwise(n, m, steps, seed):
    if "cython" not in _backend.implementations():
        pytest.skip("compiled kernel not built")
    _impls = _backend.implementations()
    r = np.random.default_rng(seed)
    A = r.normal(size=(n, n)) * 0.1
    B = r.normal(size=(n, m))
    u = r.normal(size=m)
    x0 = r.normal(size=n)
    a, ba = _backend.euler_lti(A, B, u, x0, 0.25, steps, impl=_impls["cython"])
    b, bb = _backend.euler_lti(A, B, u, x0, 0.25, steps, impl=_impls["python"])
    assert ba == bb
    np.testing.assert_array_equal(a, b)
    c = r.normal(size=n)
    a, _ = _backend.discrete_lti(A + np.eye(n), c, x0, steps, impl=_impls["cython"])
    b, _ = _backend.discrete_lti(A + np.eye(n), c, x0, steps, impl=_impls["python"])
    np.testing.assert_array_equal(a, b)


def test_python_kernel_module_is_importable_without_compiled_core():
    assert callable(_pykernels.euler_lti)
