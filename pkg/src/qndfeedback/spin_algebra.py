"""Collective spin operators for two N-atom ensembles in the symmetric Dicke basis.

Basis convention: single-ensemble index ``k`` in ``[0, N]`` carries magnetic
quantum number ``m = k - N/2`` (ascending). The joint index is
``k1 * (N + 1) + k2``, i.e. C-order flattening of a ``(N+1, N+1)`` amplitude
array whose first axis is ensemble 1. With this layout ``np.kron(A, B)`` acts
on a joint vector as ``A @ psi.reshape(d, d) @ B.T``, which is what
:class:`ProductUnitary` exploits.
"""

from __future__ import annotations

import json
import numbers
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

HERMITIAN_TOL = 1e-12

CArray = NDArray[np.complex128]


@dataclass(frozen=True)
class SpinBasis:
    """Symmetric Dicke basis for two ensembles of ``n_atoms`` atoms each."""

    n_atoms: int

    def __post_init__(self) -> None:
        n = self.n_atoms
        if isinstance(n, bool) or not isinstance(n, numbers.Integral):
            raise ValueError(f"n_atoms must be an integer, got {n!r}")
        if n < 1:
            raise ValueError(f"n_atoms must be >= 1, got {n}")
        object.__setattr__(self, "n_atoms", int(n))

    @property
    def spin(self) -> float:
        return self.n_atoms / 2

    @property
    def single_dim(self) -> int:
        return self.n_atoms + 1

    @property
    def joint_dim(self) -> int:
        return self.single_dim**2

    @property
    def m_values(self) -> NDArray[np.float64]:
        return np.arange(self.single_dim) - self.n_atoms / 2

    def m_of(self, k: int) -> float:
        if not 0 <= k < self.single_dim:
            raise IndexError(f"basis index {k} out of range for N={self.n_atoms}")
        return k - self.n_atoms / 2

    def index_of(self, m: float) -> int:
        k = m + self.n_atoms / 2
        if k != int(k) or not 0 <= k < self.single_dim:
            raise ValueError(f"m={m} is not a valid projection for N={self.n_atoms}")
        return int(k)

    def joint_index(self, k1: int, k2: int) -> int:
        d = self.single_dim
        if not (0 <= k1 < d and 0 <= k2 < d):
            raise IndexError(f"joint index ({k1}, {k2}) out of range")
        return k1 * d + k2

    def split_index(self, j: int) -> tuple[int, int]:
        if not 0 <= j < self.joint_dim:
            raise IndexError(f"joint index {j} out of range")
        return divmod(j, self.single_dim)


@dataclass(frozen=True)
class CollectiveOperator:
    """A Hermitian collective observable, stored densely."""

    matrix: CArray
    label: str

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=np.complex128)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"{self.label}: operator must be square, got {mat.shape}")
        if np.max(np.abs(mat - mat.conj().T), initial=0.0) > HERMITIAN_TOL:
            raise ValueError(f"{self.label}: operator is not Hermitian")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class RotationCache:
    """Eigendecomposition of a Hermitian generator, reused for every angle."""

    generator_label: str
    eigenvalues: NDArray[np.float64]
    eigenvectors: CArray

    @classmethod
    def from_operator(cls, op: CollectiveOperator) -> RotationCache:
        w, v = np.linalg.eigh(op.matrix)
        w.setflags(write=False)
        v.setflags(write=False)
        return cls(op.label, w, v)

    def reconstruct(self) -> CArray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T


def rotation_unitary(cache: RotationCache, angle: float) -> CArray:
    """Return ``exp(i * angle * G)`` for the cached generator ``G``."""
    v = cache.eigenvectors
    return (v * np.exp(1j * angle * cache.eigenvalues)) @ v.conj().T


def build_single_ops(
    basis: SpinBasis,
) -> tuple[CollectiveOperator, CollectiveOperator, CollectiveOperator]:
    """Spin-N/2 matrices ``(Jx, Jy, Jz)`` for one ensemble."""
    j = basis.spin
    m = basis.m_values
    # <m+1|J+|m> sits below the diagonal with ascending m
    ladder = np.sqrt(j * (j + 1) - m[:-1] * (m[:-1] + 1))
    j_plus = np.diag(ladder, -1).astype(np.complex128)
    j_minus = j_plus.conj().T
    jx = (j_plus + j_minus) / 2
    jy = (j_plus - j_minus) / 2j
    jz = np.diag(m).astype(np.complex128)
    return (
        CollectiveOperator(jx, "Jx"),
        CollectiveOperator(jy, "Jy"),
        CollectiveOperator(jz, "Jz"),
    )


def build_joint_ops(
    basis: SpinBasis,
    single: tuple[CollectiveOperator, ...] | None = None,
) -> dict[str, CollectiveOperator]:
    """Joint operators on the ``(N+1)**2`` space.

    Keys are ``"Jx+"``, ``"Jx-"``, ... for ``J^(1) +/- J^(2)`` and
    ``"Jx1"``, ``"Jx2"``, ... for the single-side embeddings.
    """
    if single is None:
        single = build_single_ops(basis)
    d = basis.single_dim
    eye = np.eye(d, dtype=np.complex128)
    ops: dict[str, CollectiveOperator] = {}
    for axis, op in zip("xyz", single):
        if op.dim != d:
            raise ValueError(
                f"single operator {op.label} has dim {op.dim}, basis expects {d}"
            )
        left = np.kron(op.matrix, eye)
        right = np.kron(eye, op.matrix)
        ops[f"J{axis}1"] = CollectiveOperator(left, f"J{axis}1")
        ops[f"J{axis}2"] = CollectiveOperator(right, f"J{axis}2")
        ops[f"J{axis}+"] = CollectiveOperator(left + right, f"J{axis}+")
        ops[f"J{axis}-"] = CollectiveOperator(left - right, f"J{axis}-")
    return ops


@dataclass(frozen=True)
class ProductUnitary:
    """A joint unitary ``left ⊗ right`` applied factor-wise.

    Works on pure vectors of length ``d**2`` and on ``d**2 x d**2`` density
    matrices without materialising the Kronecker product.
    """

    left: CArray
    right: CArray

    def __post_init__(self) -> None:
        ls, rs = np.shape(self.left), np.shape(self.right)
        if len(ls) != 2 or ls[0] != ls[1] or ls != rs:
            raise ValueError(f"factors must be square and of equal size, got {ls} and {rs}")

    def full(self) -> CArray:
        return np.kron(self.left, self.right)

    def apply(self, data: CArray) -> CArray:
        d = self.left.shape[0]
        if data.ndim == 1:
            psi = data.reshape(d, d)
            return (self.left @ psi @ self.right.T).reshape(-1)
        return conjugate_product(self.left, self.right, data)

    def __matmul__(self, other: ProductUnitary) -> ProductUnitary:
        return ProductUnitary(self.left @ other.left, self.right @ other.right)


def conjugate_product(left: CArray, right: CArray, rho: CArray) -> CArray:
    """``(L⊗R) rho (L⊗R)^†`` via four single-factor contractions."""
    d = left.shape[0]
    dd = d * d
    t = rho.reshape(d, d * dd)
    t = (left @ t).reshape(d, d, dd)
    t = np.matmul(right, t)  # batched over the first ket index
    t = t.reshape(dd * d, d) @ right.conj().T
    t = np.matmul(left.conj(), t.reshape(dd, d, d))  # batched over ket pair
    return t.reshape(dd, dd)


@dataclass(frozen=True)
class OperatorSet:
    """Everything the protocol needs for one ``N``: operators and caches."""

    basis: SpinBasis
    jx: CollectiveOperator
    jy: CollectiveOperator
    jz: CollectiveOperator
    joint: dict[str, CollectiveOperator] = field(repr=False)
    jx_cache: RotationCache = field(repr=False)
    jy_cache: RotationCache = field(repr=False)
    # diagonal of Jz+ in joint basis order
    jzp_diag: NDArray[np.float64] = field(repr=False)

    def frame_rotation(self, omega: float) -> ProductUnitary:
        """``exp(-i*omega*Jx^-) = exp(-i*omega*Jx) ⊗ exp(+i*omega*Jx)``."""
        return ProductUnitary(
            rotation_unitary(self.jx_cache, -omega),
            rotation_unitary(self.jx_cache, omega),
        )

    def feedback_rotation(self, lam: float) -> ProductUnitary:
        """``exp(i*lam*Jy^+) = exp(i*lam*Jy) ⊗ exp(i*lam*Jy)``."""
        u = rotation_unitary(self.jy_cache, lam)
        return ProductUnitary(u, u)

    def joint_cache(self, label: str) -> RotationCache:
        return _joint_cache(self.basis.n_atoms, label)


@lru_cache(maxsize=16)
def operator_set(n_atoms: int) -> OperatorSet:
    basis = SpinBasis(n_atoms)
    jx, jy, jz = build_single_ops(basis)
    joint = build_joint_ops(basis, (jx, jy, jz))
    m = basis.m_values
    jzp = (m[:, None] + m[None, :]).reshape(-1)
    jzp.setflags(write=False)
    return OperatorSet(
        basis=basis,
        jx=jx,
        jy=jy,
        jz=jz,
        joint=joint,
        jx_cache=RotationCache.from_operator(jx),
        jy_cache=RotationCache.from_operator(jy),
        jzp_diag=jzp,
    )


@lru_cache(maxsize=64)
def _joint_cache(n_atoms: int, label: str) -> RotationCache:
    return RotationCache.from_operator(operator_set(n_atoms).joint[label])


def dump_operator(op: CollectiveOperator, path: str | Path) -> None:
    """Write ``op`` as JSON, row-major, each entry an ``"re,im"`` string."""
    rows = [[f"{float(z.real)!r},{float(z.imag)!r}" for z in row] for row in op.matrix]
    payload = {"label": op.label, "dim": op.dim, "rows": rows}
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_operator(path: str | Path) -> CollectiveOperator:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    mat = np.array(
        [[complex(*map(float, s.split(","))) for s in row] for row in payload["rows"]],
        dtype=np.complex128,
    )
    return CollectiveOperator(mat, payload["label"])
