import numpy as np
import pytest

from qkrl.errors import ConfigError, ContractError
from qkrl.kernels import (OperatorKernel, ScalarKernel, cross_gram, eval_kernel, eval_operator, gram, is_psd)

ALL_KERNELS = [
    ScalarKernel("KroneckerDelta"),
    ScalarKernel("PureStateOverlap"),
    ScalarKernel("RPowerOverlap", {"r": 3}),
    ScalarKernel("SquaredCosine", {"bandwidth": 0.7}),
    ScalarKernel("Rbf", {"lengthscale": 0.5}),
    ScalarKernel("Matern", {"nu": 0.5}),
    ScalarKernel("Matern", {"nu": 1.5}),
    ScalarKernel("Matern", {"nu": 2.5}),
]


def test_kronecker():
    k = ScalarKernel("KroneckerDelta")
    assert eval_kernel(k, [1.0, 2.0], [1.0, 2.0]) == 1.0
    assert eval_kernel(k, [1.0, 2.0], [1.0, 2.5]) == 0.0


def test_squared_cosine_zero():
    k = ScalarKernel("SquaredCosine", {"bandwidth": 1.0})
    assert abs(eval_kernel(k, [0.0], [np.pi])) < 1e-30


def test_squared_cosine_product_form():
    k = ScalarKernel("SquaredCosine", {"bandwidth": 2.0})
    x, y = np.array([0.1, 0.4]), np.array([0.3, -0.2])
    expected = np.prod(np.cos(2.0 * (x - y) / 2) ** 2)
    assert eval_kernel(k, x, y) == pytest.approx(expected, abs=1e-15)


def test_pure_state_overlap_orthogonal():
    k = ScalarKernel("PureStateOverlap")
    assert eval_kernel(k, [1.0, 0.0], [0.0, 1.0]) == 0.0
    assert eval_kernel(k, [1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0)


def test_rpower_overlap():
    x, y = [1.0, 2.0], [2.0, 1.0]
    base = eval_kernel(ScalarKernel("PureStateOverlap"), x, y)
    assert base == pytest.approx(0.64)
    assert eval_kernel(ScalarKernel("RPowerOverlap", {"r": 3}), x, y) == pytest.approx(0.64**3)


@pytest.mark.parametrize("k", ALL_KERNELS, ids=lambda k: f"{k.variant}-{k.params}")
def test_symmetry_and_psd(k):
    rng = np.random.default_rng(1)
    X = rng.uniform(0.1, 1.0, size=(12, 2))
    K = cross_gram(k, X, X)
    assert np.array_equal(K, K.T)
    assert is_psd(gram(k, X))
    assert np.all(np.diag(K) <= k.kappa_max + 1e-12)


@pytest.mark.parametrize("k", [k for k in ALL_KERNELS if k.is_quantum], ids=lambda k: k.variant)
def test_quantum_kernels_bounded(k):
    rng = np.random.default_rng(2)
    X = rng.uniform(0.1, 1.0, size=(10, 3))
    K = cross_gram(k, X, X)
    assert K.min() >= 0 and K.max() <= 1 + 1e-12
    np.testing.assert_allclose(np.diag(K), 1.0)


def test_bandwidth_flattening():
    rng = np.random.default_rng(3)
    narrow = ScalarKernel("SquaredCosine", {"bandwidth": 0.5})
    wide = ScalarKernel("SquaredCosine", {"bandwidth": 1.5})
    for _ in range(200):
        x, y = rng.uniform(-1, 1, size=(2, 2))
        if np.all(np.abs(x - y) * 1.5 <= np.pi):
            assert eval_kernel(narrow, x, y) >= eval_kernel(wide, x, y) - 1e-15


def test_rbf_gram_eigenvalues():
    rng = np.random.default_rng(4)
    K = gram(ScalarKernel("Rbf"), rng.normal(size=(5, 3)))
    assert np.linalg.eigvalsh(K).min() >= -1e-8


def test_gram_small_cases():
    k = ScalarKernel("Rbf")
    np.testing.assert_array_equal(gram(k, [[0.3, 0.1]]), [[1.0]])
    np.testing.assert_array_equal(gram(ScalarKernel("KroneckerDelta"), np.arange(4.0)), np.eye(4))
    with pytest.raises(ContractError):
        gram(k, np.zeros((0, 2)))


def test_dimension_mismatch():
    with pytest.raises(ContractError):
        eval_kernel(ScalarKernel("Rbf"), [0.0, 1.0], [0.0])


def test_operator_kernel():
    K = OperatorKernel.identity(ScalarKernel("KroneckerDelta"), 2)
    np.testing.assert_array_equal(eval_operator(K, [0.5], [0.5]), np.eye(2))
    M = np.diag([2.0, 3.0])
    K2 = OperatorKernel(ScalarKernel("SquaredCosine", {"bandwidth": 2 * np.arccos(np.sqrt(0.5))}), M)
    np.testing.assert_allclose(eval_operator(K2, [0.0], [1.0]), np.diag([1.0, 1.5]))


def test_operator_kernel_random_factorisation():
    rng = np.random.default_rng(5)
    B = rng.normal(size=(3, 3))
    K = OperatorKernel(ScalarKernel("Matern", {"nu": 2.5}), B @ B.T)
    for _ in range(10):
        x, y = rng.normal(size=(2, 2))
        np.testing.assert_allclose(eval_operator(K, x, y), eval_kernel(K.scalar, x, y) * (B @ B.T))


def test_invalid_kernels():
    with pytest.raises(ConfigError):
        ScalarKernel("Linear")
    with pytest.raises(ConfigError):
        ScalarKernel("RPowerOverlap", {"r": 1.5})
    with pytest.raises(ConfigError):
        ScalarKernel("Matern", {"nu": 1.0})
    with pytest.raises(ConfigError):
        OperatorKernel(ScalarKernel("Rbf"), np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ConfigError):
        OperatorKernel(ScalarKernel("Rbf"), np.diag([1.0, -1.0]))


def test_kernel_dict_round_trip():
    for k in ALL_KERNELS:
        assert ScalarKernel.from_dict(k.to_dict()) == k
