"""Monomial dictionary, lifted evaluation and the contracted Jacobian."""

import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sidds.basis import (
    BasisSpec,
    Coefficients,
    devectorize,
    enumerate_basis,
    eval_basis,
    grad_basis_contract,
    linear_basis,
    vectorize,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def naive_eval(spec, states):
    """Product-of-powers oracle, one entry at a time."""
    m = states.shape[0]
    out = np.empty((m, spec.n))
    for j in range(m):
        for k, alpha in enumerate(spec.multi_indices):
            v = 1.0
            for i, a in enumerate(alpha):
                for _ in range(a):
                    v *= states[j, i]
            out[j, k] = v
    return out


def fd_jacobian(spec, z, c, step=1e-6):
    d = spec.dim
    m = z.size // d

    def f(zz):
        return vectorize(eval_basis(spec, zz.reshape(m, d)) @ c.reshape(spec.n, d))

    J = np.empty((z.size, z.size))
    for i in range(z.size):
        h = step * (1 + abs(z[i]))
        e = np.zeros(z.size)
        e[i] = h
        J[:, i] = (f(z + e) - f(z - e)) / (2 * h)
    return J


def test_two_dim_degree_two_listing():
    """[PAPER] six functions 1, x1, x2, x1^2, x1 x2, x2^2."""
    spec = enumerate_basis(2, 2)
    assert spec.labels() == ["1", "x1", "x2", "x1^2", "x1*x2", "x2^2"]


def test_constant_only_basis():
    """[TRIVIAL]"""
    spec = enumerate_basis(3, 0)
    assert spec.n == 1 and spec.labels() == ["1"]


def test_three_dim_degree_two_count():
    """[DERIVED] brute-force enumeration of |alpha| <= 2."""
    brute = [a for a in itertools.product(range(3), repeat=3) if sum(a) <= 2]
    assert enumerate_basis(3, 2).n == len(brute) == 10


def test_rejects_zero_dim():
    with pytest.raises(ValueError):
        enumerate_basis(0, 2)
    with pytest.raises(ValueError):
        enumerate_basis(2, -1)


@pytest.mark.parametrize("d", range(1, 7))
@pytest.mark.parametrize("p", range(0, 6))
def test_count_is_binomial(d, p):
    """[DERIVED]"""
    spec = enumerate_basis(d, p)
    assert spec.n == comb(d + p, p)
    assert len({tuple(a) for a in spec.multi_indices}) == spec.n


def test_ordering_graded_and_stable():
    """[TRIVIAL] deterministic graded ordering."""
    a = enumerate_basis(3, 3)
    b = enumerate_basis(3, 3)
    assert np.array_equal(a.multi_indices, b.multi_indices)
    assert np.all(np.diff(a.multi_indices.sum(axis=1)) >= 0)


def test_eval_single_state():
    """[TRIVIAL] row [1, 2, 3, 4, 6, 9] at (2, 3)."""
    Phi = eval_basis(enumerate_basis(2, 2), np.array([[2.0, 3.0]]))
    assert np.array_equal(Phi, [[1, 2, 3, 4, 6, 9]])


def test_eval_zero_state():
    """[TRIVIAL]"""
    Phi = eval_basis(enumerate_basis(3, 3), np.zeros((1, 3)))
    assert Phi[0, 0] == 1 and not np.any(Phi[0, 1:])


def test_eval_dimension_mismatch():
    with pytest.raises(ValueError):
        eval_basis(enumerate_basis(2, 2), np.zeros((4, 3)))


@given(arrays(float, (7, 3), elements=finite), st.integers(0, 4))
def test_eval_matches_product_oracle(states, p):
    """[DERIVED] independent product-of-powers oracle."""
    spec = enumerate_basis(3, p)
    np.testing.assert_allclose(eval_basis(spec, states), naive_eval(spec, states), rtol=1e-13, atol=1e-13)


@given(arrays(float, (5, 2), elements=finite), arrays(float, (10, 2), elements=finite))
def test_kronecker_identity(states, C):
    """[DERIVED] (Phi(Z) kron I_d) vec(C) equals vec(Phi(Z) C)."""
    spec = enumerate_basis(2, 3)
    Phi = eval_basis(spec, states)
    lifted = np.kron(Phi, np.eye(2))
    np.testing.assert_allclose(lifted @ vectorize(C), vectorize(Phi @ C), rtol=1e-12, atol=1e-10)


def test_linear_dictionary_constant_blocks(rng):
    """[TRIVIAL] a linear map has a constant Jacobian."""
    spec = linear_basis(3)
    c = rng.normal(size=9)
    G = grad_basis_contract(spec, rng.normal(size=3 * 6), c).toarray()
    blocks = [G[3 * j:3 * j + 3, 3 * j:3 * j + 3] for j in range(6)]
    for B in blocks[1:]:
        assert np.array_equal(B, blocks[0])
    assert np.array_equal(blocks[0], c.reshape(3, 3).T)


def test_zero_coefficients_zero_jacobian(rng):
    """[TRIVIAL]"""
    spec = enumerate_basis(2, 3)
    G = grad_basis_contract(spec, rng.normal(size=8), np.zeros(2 * spec.n))
    assert G.nnz == 0 or not np.any(G.toarray())


def test_contracted_jacobian_finite_differences():
    """[DERIVED] 100 random draws, central differences, 1e-6 relative Frobenius."""
    rng = np.random.default_rng(7)
    spec = enumerate_basis(3, 3)
    for _ in range(100):
        z = rng.normal(size=3 * 4)
        c = rng.normal(size=3 * spec.n)
        G = grad_basis_contract(spec, z, c).toarray()
        J = fd_jacobian(spec, z, c)
        assert np.linalg.norm(G - J) <= 1e-6 * max(1.0, np.linalg.norm(J))


def test_contracted_jacobian_block_diagonal(rng):
    spec = enumerate_basis(2, 2)
    G = grad_basis_contract(spec, rng.normal(size=2 * 5), rng.normal(size=12)).toarray()
    mask = np.kron(np.eye(5), np.ones((2, 2))) == 0
    assert not np.any(G[mask])


def test_contracted_jacobian_dimension_errors():
    spec = enumerate_basis(2, 2)
    with pytest.raises(ValueError):
        grad_basis_contract(spec, np.zeros(5), np.zeros(12))
    with pytest.raises(ValueError):
        grad_basis_contract(spec, np.zeros(4), np.zeros(11))


@given(arrays(float, (6, 3), elements=finite))
def test_vectorize_roundtrip(C):
    """[TRIVIAL] bit-exact row-major round trip."""
    assert np.array_equal(devectorize(vectorize(C), 6, 3), C)


def test_coefficients_mask_zeroes_entries(rng):
    """[TRIVIAL] masked-out entries are exactly zero."""
    mask = rng.random((4, 2)) > 0.5
    C = Coefficients(rng.normal(size=(4, 2)) + 1, mask)
    assert np.all(C.matrix[~mask] == 0)
    assert C.n_free == mask.sum()
    back = Coefficients.from_free(C.free_values(), (4, 2), mask)
    assert np.array_equal(back.matrix, C.matrix)


def test_spec_json_roundtrip():
    spec = enumerate_basis(3, 2)
    again = BasisSpec.from_json(spec.to_json())
    assert again == spec
    assert set(spec.to_dict()) == {"dim", "degree", "multi_indices"}
