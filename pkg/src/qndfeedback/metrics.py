"""Figures of merit: overlap with the target, entropy, LUR violation, purity."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .spin_algebra import CArray, CollectiveOperator, SpinBasis, operator_set
from .state import QuantumState

IMAG_TOL = 1e-9
VARIANCE_CLIP = 1e-9
EIG_FLOOR = 1e-14


def maximally_entangled_state(basis: SpinBasis) -> QuantumState:
    """``(N+1)^{-1/2} sum_m |m> ⊗ |-m>``."""
    d = basis.single_dim
    psi = np.zeros((d, d), dtype=np.complex128)
    # index k carries m = k - N/2, so -m sits at d - 1 - k
    psi[np.arange(d), d - 1 - np.arange(d)] = 1 / math.sqrt(d)
    return QuantumState(psi.reshape(-1))


def _check_dims(state: QuantumState, other: QuantumState) -> None:
    if state.dim != other.dim:
        raise ValueError(f"dimension mismatch: {state.dim} vs {other.dim}")


def overlap(state: QuantumState, target: QuantumState) -> float:
    """``<t|rho|t>`` for a pure target."""
    _check_dims(state, target)
    if not target.is_pure:
        raise ValueError("overlap target must be a pure state")
    t = target.data
    if state.is_pure:
        return float(abs(np.vdot(t, state.data)) ** 2)
    return float(np.vdot(t, state.data @ t).real)


def partial_trace(state: QuantumState, keep: int = 1) -> CArray:
    """Reduced density matrix of ensemble ``keep`` (1 or 2)."""
    d = state.single_dim
    if state.is_pure:
        psi = state.data.reshape(d, d)
        return psi @ psi.conj().T if keep == 1 else psi.T @ psi.conj()
    t = state.data.reshape(d, d, d, d)
    if keep == 1:
        return np.einsum("abcb->ac", t)
    return np.einsum("abad->bd", t)


def entanglement_entropy(state: QuantumState) -> float:
    """Von Neumann entropy (bits) of either reduced state of a pure state."""
    if not state.is_pure:
        raise ValueError("entanglement entropy is only defined here for pure states")
    d = state.single_dim
    schmidt = np.linalg.svd(state.data.reshape(d, d), compute_uv=False) ** 2
    schmidt = schmidt / schmidt.sum()
    p = schmidt[schmidt > EIG_FLOOR]
    return float(max(0.0, -np.sum(p * np.log2(p))))


def purity(state: QuantumState) -> float:
    if state.is_pure:
        return 1.0
    rho = state.data
    # Tr[rho^2] = sum |rho_ij|^2 for Hermitian rho
    return float(np.vdot(rho, rho).real)


@lru_cache(maxsize=128)
def _square(n_atoms: int, label: str) -> CArray:
    m = operator_set(n_atoms).joint[label].matrix
    return m @ m


def _as_matrix(op: CollectiveOperator | CArray) -> CArray:
    if isinstance(op, CollectiveOperator):
        return op.matrix  # validated at construction
    mat = np.asarray(op)
    if np.max(np.abs(mat - mat.conj().T), initial=0.0) > 1e-12:
        raise ValueError("expectation requires a Hermitian operator")
    return mat


def _expect_matrix(state: QuantumState, mat: CArray) -> complex:
    if state.is_pure:
        return complex(np.vdot(state.data, mat @ state.data))
    return complex(np.sum(mat.T * state.data))


def expectation(state: QuantumState, op: CollectiveOperator | CArray) -> float:
    """Real part of ``Tr[A rho]``; a sizeable imaginary part is an error."""
    val = _expect_matrix(state, _as_matrix(op))
    if abs(val.imag) > IMAG_TOL * max(1.0, abs(val.real)):
        raise ValueError(f"expectation has imaginary part {val.imag:.3g}")
    return val.real


def variance(state: QuantumState, op: CollectiveOperator | CArray) -> float:
    mat = _as_matrix(op)
    if isinstance(op, CollectiveOperator) and op.label in operator_set(state.n_atoms).joint:
        sq = _square(state.n_atoms, op.label)
    else:
        sq = mat @ mat
    mean = expectation(state, mat)
    var = _expect_matrix(state, sq).real - mean**2
    if var < 0 and var >= -VARIANCE_CLIP:
        return 0.0
    return var


def c_lur(state: QuantumState) -> float:
    """``1 - (Var Jz+ + Var Jy- + Var Jx-) / N``."""
    joint = operator_set(state.n_atoms).joint
    total = sum(variance(state, joint[k]) for k in ("Jz+", "Jy-", "Jx-"))
    return 1.0 - total / state.n_atoms


@dataclass(frozen=True)
class MetricsRecord:
    n: int
    overlap: float
    entropy: float | None
    c_lur: float
    purity: float
    mean_jzp: float
    mean_jym: float
    mean_jxm: float
    mean_jxp: float
    var_jzp: float
    var_jym: float
    var_jxm: float

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(state: QuantumState, n: int) -> MetricsRecord:
    ops = operator_set(state.n_atoms)
    joint = ops.joint
    target = _target(state.n_atoms)
    var = {k: variance(state, joint[k]) for k in ("Jz+", "Jy-", "Jx-")}
    return MetricsRecord(
        n=n,
        overlap=overlap(state, target),
        entropy=entanglement_entropy(state) if state.is_pure else None,
        c_lur=1.0 - sum(var.values()) / state.n_atoms,
        purity=purity(state),
        mean_jzp=expectation(state, joint["Jz+"]),
        mean_jym=expectation(state, joint["Jy-"]),
        mean_jxm=expectation(state, joint["Jx-"]),
        mean_jxp=expectation(state, joint["Jx+"]),
        var_jzp=var["Jz+"],
        var_jym=var["Jy-"],
        var_jxm=var["Jx-"],
    )


@lru_cache(maxsize=16)
def _target(n_atoms: int) -> QuantumState:
    return maximally_entangled_state(SpinBasis(n_atoms))
