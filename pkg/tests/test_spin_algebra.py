import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qndfeedback.spin_algebra import (
    CollectiveOperator,
    ProductUnitary,
    RotationCache,
    SpinBasis,
    build_single_ops,
    conjugate_product,
    dump_operator,
    load_operator,
    operator_set,
    rotation_unitary,
)

from conftest import SIZES

PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]]),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def qubit_collective(n, axis):
    """sum_i sigma_axis^(i) / 2 on n qubits, basis bit 1 = spin up."""
    dim = 2**n
    out = np.zeros((dim, dim), dtype=complex)
    for i in range(n):
        mats = [np.eye(2)] * n
        mats[i] = PAULI[axis]
        term = mats[0]
        for m in mats[1:]:
            term = np.kron(term, m)
        out += term / 2
    return out


def symmetric_isometry(n):
    """Columns are normalized Dicke states with k up-spins, k = 0..n.

    Qubit ordering puts |up> first in each factor, so a product state with
    k up-spins has m = k - n/2.
    """
    dim = 2**n
    cols = []
    for k in range(n + 1):
        v = np.zeros(dim)
        for ups in itertools.combinations(range(n), k):
            idx = sum(1 << (n - 1 - q) for q in range(n) if q not in ups)
            v[idx] = 1
        cols.append(v / np.linalg.norm(v))
    return np.array(cols).T


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_dicke_matrices_match_projected_qubit_sums(n):
    iso = symmetric_isometry(n)
    jx, jy, jz = build_single_ops(SpinBasis(n))
    for axis, op in zip("xyz", (jx, jy, jz)):
        expected = iso.T @ qubit_collective(n, axis) @ iso
        np.testing.assert_allclose(op.matrix, expected, atol=1e-12)


def test_basis_indexing():
    b = SpinBasis(4)
    assert b.spin == 2 and b.single_dim == 5 and b.joint_dim == 25
    np.testing.assert_array_equal(b.m_values, [-2, -1, 0, 1, 2])
    assert b.m_of(0) == -2 and b.index_of(2) == 4
    assert b.joint_index(1, 3) == 8 and b.split_index(8) == (1, 3)
    with pytest.raises(ValueError):
        b.index_of(0.5)


@pytest.mark.parametrize("bad", [0, -3, 2.5, True])
def test_basis_rejects_invalid_sizes(bad):
    with pytest.raises((ValueError, TypeError)):
        SpinBasis(bad)


@pytest.mark.parametrize("n", SIZES)
def test_commutators_and_casimir(n):
    ops = operator_set(n)
    jx, jy, jz = ops.jx.matrix, ops.jy.matrix, ops.jz.matrix
    assert np.abs(jx @ jy - jy @ jx - 1j * jz).max() <= 1e-12
    assert np.abs(jy @ jz - jz @ jy - 1j * jx).max() <= 1e-12
    assert np.abs(jz @ jx - jx @ jz - 1j * jy).max() <= 1e-12
    j = n / 2
    casimir = jx @ jx + jy @ jy + jz @ jz
    assert np.abs(casimir - j * (j + 1) * np.eye(n + 1)).max() <= 1e-10


@pytest.mark.parametrize("n", SIZES)
def test_joint_operators_are_sums_and_differences(n):
    ops = operator_set(n)
    eye = np.eye(n + 1)
    for axis, single in zip("xyz", (ops.jx, ops.jy, ops.jz)):
        a = np.kron(single.matrix, eye)
        b = np.kron(eye, single.matrix)
        np.testing.assert_allclose(ops.joint[f"J{axis}+"].matrix, a + b, atol=1e-14)
        np.testing.assert_allclose(ops.joint[f"J{axis}-"].matrix, a - b, atol=1e-14)
    np.testing.assert_allclose(np.diag(ops.joint["Jz+"].matrix).real, ops.jzp_diag)


def test_jz_plus_spectrum_n10():
    diag = operator_set(10).jzp_diag
    assert diag.min() == -10 and diag.max() == 10
    # eigenvalue m1 + m2 = 0 is (N+1)-fold degenerate
    assert np.count_nonzero(diag == 0) == 11


def test_collective_operator_validation():
    with pytest.raises(ValueError):
        CollectiveOperator(np.array([[0, 1], [0, 0]], dtype=complex), "bad")
    with pytest.raises(ValueError):
        CollectiveOperator(np.zeros((2, 3), dtype=complex), "bad")
    op = CollectiveOperator(np.eye(3, dtype=complex), "I")
    with pytest.raises(ValueError):
        op.matrix[0, 0] = 2


@given(n=st.sampled_from(SIZES), angle=st.floats(-10, 10))
def test_rotation_is_unitary_and_matches_generator(n, angle):
    ops = operator_set(n)
    u = rotation_unitary(ops.jy_cache, angle)
    np.testing.assert_allclose(u @ u.conj().T, np.eye(n + 1), atol=1e-12)
    # U^† Jz U = Jz cos a + Jx sin a for U = exp(i a Jy)
    rotated = u.conj().T @ ops.jz.matrix @ u
    expected = ops.jz.matrix * math.cos(angle) + ops.jx.matrix * math.sin(angle)
    np.testing.assert_allclose(rotated, expected, atol=1e-10)


def test_rotation_matches_pauli_exponential_for_spin_half():
    cache = operator_set(1).jx_cache
    a = 0.37
    expected = math.cos(a / 2) * np.eye(2) + 1j * math.sin(a / 2) * PAULI["x"]
    np.testing.assert_allclose(rotation_unitary(cache, a), expected, atol=1e-14)


def test_rotation_cache_reconstructs_operator():
    ops = operator_set(4)
    np.testing.assert_allclose(ops.jy_cache.reconstruct(), ops.jy.matrix, atol=1e-12)
    cache = RotationCache.from_operator(ops.jz)
    np.testing.assert_allclose(cache.reconstruct(), ops.jz.matrix, atol=1e-12)


def test_frame_rotation_factorizes_joint_exponential(rng):
    n, omega = 3, 0.41
    ops = operator_set(n)
    full = ops.frame_rotation(omega).full()
    w, v = np.linalg.eigh(ops.joint["Jx-"].matrix)
    expected = (v * np.exp(-1j * omega * w)) @ v.conj().T
    np.testing.assert_allclose(full, expected, atol=1e-12)
    lam = -0.23
    w, v = np.linalg.eigh(ops.joint["Jy+"].matrix)
    expected = (v * np.exp(1j * lam * w)) @ v.conj().T
    np.testing.assert_allclose(ops.feedback_rotation(lam).full(), expected, atol=1e-12)


def test_product_unitary_apply_matches_dense(rng):
    n = 2
    ops = operator_set(n)
    u = ops.frame_rotation(0.3) @ ops.feedback_rotation(0.7)
    dense = u.full()
    d = (n + 1) ** 2
    vec = rng.normal(size=d) + 1j * rng.normal(size=d)
    np.testing.assert_allclose(u.apply(vec), dense @ vec, atol=1e-12)
    rho = np.outer(vec, vec.conj())
    np.testing.assert_allclose(u.apply(rho), dense @ rho @ dense.conj().T, atol=1e-12)
    np.testing.assert_allclose(
        conjugate_product(u.left, u.right, rho), dense @ rho @ dense.conj().T, atol=1e-12
    )


def test_product_unitary_rejects_mismatched_factors():
    with pytest.raises(ValueError):
        ProductUnitary(np.eye(2), np.eye(3))


def test_operator_dump_round_trip(tmp_path):
    op = operator_set(2).joint["Jy-"]
    path = tmp_path / "jym.json"
    dump_operator(op, path)
    back = load_operator(path)
    assert back.label == op.label
    np.testing.assert_array_equal(back.matrix, op.matrix)
