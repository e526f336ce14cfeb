"""Conditional state of the two-ensemble system."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb, isqrt

import numpy as np

from .spin_algebra import CArray, SpinBasis

NORM_TOL = 1e-10


class StateHealthError(RuntimeError):
    """A state violated trace, Hermiticity or positivity bounds."""


@dataclass
class QuantumState:
    """Pure vector (length ``(N+1)**2``) or density matrix of the joint system.

    ``normalized`` records whether the caller may rely on unit norm/trace;
    post-measurement states from the Kraus updates are returned with
    ``normalized=False``.
    """

    data: CArray
    normalized: bool = True

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim == 2 and self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"density matrix must be square, got {self.data.shape}")
        if self.data.ndim not in (1, 2):
            raise ValueError("state data must be a vector or a square matrix")
        d = isqrt(self.dim)
        if d * d != self.dim or d < 2:
            raise ValueError(f"dimension {self.dim} is not (N+1)**2 for N >= 1")

    @property
    def is_pure(self) -> bool:
        return self.data.ndim == 1

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def single_dim(self) -> int:
        return isqrt(self.dim)

    @property
    def n_atoms(self) -> int:
        return self.single_dim - 1

    def trace(self) -> float:
        if self.is_pure:
            return float(np.vdot(self.data, self.data).real)
        return float(np.trace(self.data).real)

    def density_matrix(self) -> CArray:
        if self.is_pure:
            return np.outer(self.data, self.data.conj())
        return self.data

    def to_mixed(self) -> QuantumState:
        return QuantumState(self.density_matrix(), self.normalized)

    def normalize(self) -> QuantumState:
        tr = self.trace()
        if tr <= 0:
            raise StateHealthError(f"cannot normalize state with trace {tr}")
        if self.is_pure:
            return QuantumState(self.data / np.sqrt(tr), True)
        return QuantumState(self.data / tr, True)

    def require_normalized(self, tol: float = NORM_TOL) -> None:
        if not self.normalized:
            raise ValueError("operation requires a normalized state")
        tr = self.trace()
        if abs(tr - 1.0) > tol:
            raise ValueError(f"state flagged normalized but trace is {tr!r}")

    def check_health(self, tol: float = 1e-10, eig_tol: float = 1e-9) -> None:
        """Raise :class:`StateHealthError` if the state is unphysical."""
        if not np.all(np.isfinite(self.data)):
            raise StateHealthError("state contains non-finite entries")
        tr = self.trace()
        if self.normalized and abs(tr - 1.0) > tol:
            raise StateHealthError(f"trace {tr!r} deviates from 1")
        if self.is_pure:
            return
        rho = self.data
        herm = np.max(np.abs(rho - rho.conj().T))
        if herm > tol:
            raise StateHealthError(f"density matrix not Hermitian (max dev {herm:.3g})")
        lo = np.linalg.eigvalsh(rho).min()
        if lo < -eig_tol:
            raise StateHealthError(f"negative eigenvalue {lo:.3g}")


def coherent_x_amplitudes(basis: SpinBasis) -> np.ndarray:
    """Single-ensemble coherent state along +x: ``sqrt(C(N,k)) / 2**(N/2)``."""
    n = basis.n_atoms
    weights = np.array([comb(n, k) for k in range(n + 1)], dtype=np.float64)
    return np.sqrt(weights / 2.0**n)


def initial_state(basis: SpinBasis) -> QuantumState:
    """Both ensembles fully polarized along +x, as a pure product state."""
    amp = coherent_x_amplitudes(basis)
    return QuantumState(np.kron(amp, amp).astype(np.complex128))
