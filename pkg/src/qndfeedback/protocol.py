"""One photon of the QND measurement + feedback protocol.

A step is: draw an outcome (D+ click, D- click, or no click), apply the
matching Kraus update, rotate the two ensembles by opposite angles about x,
and, on a click only, rotate both about y by the feedback angle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache

import numpy as np

from .spin_algebra import CArray, OperatorSet, ProductUnitary, SpinBasis, operator_set
from .state import QuantumState

ZERO_BRANCH_TOL = 1e-14
DEGENERATE_TOL = 1e-12
CHI_N_WARN = 0.5


class ImpossibleOutcomeError(ValueError):
    """The requested detection branch has (numerically) zero probability."""


class DegenerateFeedbackError(ArithmeticError):
    """``<Jx+>`` is too small to define a feedback angle."""


class SmallAngleWarning(UserWarning):
    """``chi * N`` is too large for the second-order feedback formula."""


class Outcome(str, Enum):
    PLUS = "plus"
    MINUS = "minus"
    NONE = "none"


class FeedbackMode(str, Enum):
    NONE = "none"
    SIMPLE_EXACT = "simple-exact"
    SIMPLE_APPROX = "simple-approx"
    ADIABATIC = "adiabatic"


MODE_ALIASES = {"simple": FeedbackMode.SIMPLE_APPROX}


def parse_mode(value: str | FeedbackMode) -> FeedbackMode:
    if isinstance(value, FeedbackMode):
        return value
    if value in MODE_ALIASES:
        return MODE_ALIASES[value]
    try:
        return FeedbackMode(value)
    except ValueError:
        choices = ", ".join(m.value for m in FeedbackMode)
        raise ValueError(f"unknown feedback mode {value!r} (expected one of {choices})")


@dataclass(frozen=True)
class FeedbackPolicy:
    """How the feedback angle is chosen.

    ``approx_base`` picks the angle formula underneath the adiabatic clamp:
    ``"approx"`` (second order in chi, pre-measurement moments) or
    ``"exact"`` (zero ``<Jz+>`` of the post-measurement state).
    """

    mode: FeedbackMode = FeedbackMode.ADIABATIC
    cut_scale: float = 1e-4
    activation_step: int = 20_000
    approx_base: str = "approx"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", parse_mode(self.mode))
        if not self.cut_scale > 0:
            raise ValueError(f"cut_scale must be > 0, got {self.cut_scale}")
        if self.activation_step < 0:
            raise ValueError(f"activation_step must be >= 0, got {self.activation_step}")
        if self.approx_base not in ("approx", "exact"):
            raise ValueError(f"approx_base must be 'approx' or 'exact', got {self.approx_base!r}")

    @property
    def uses_exact(self) -> bool:
        if self.mode is FeedbackMode.SIMPLE_EXACT:
            return True
        return self.mode is FeedbackMode.ADIABATIC and self.approx_base == "exact"


@dataclass(frozen=True)
class ProtocolConfig:
    n_atoms: int = 10
    chi: float = 0.03
    omega: float = math.pi / 10
    eta: float = 1.0
    n_photons: int = 50_000
    policy: FeedbackPolicy = field(default_factory=FeedbackPolicy)
    seed: int = 0
    record_stride: int = 100
    # use cos/sin of the accumulated angle (n+1)*omega in the approximate formula
    accumulated_angle: bool = False

    def __post_init__(self) -> None:
        SpinBasis(self.n_atoms)
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.n_photons < 0:
            raise ValueError(f"n_photons must be >= 0, got {self.n_photons}")
        if self.record_stride < 1:
            raise ValueError(f"record_stride must be >= 1, got {self.record_stride}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not (math.isfinite(self.chi) and math.isfinite(self.omega)):
            raise ValueError("chi and omega must be finite")
        if abs(self.chi) * self.n_atoms > CHI_N_WARN:
            warnings.warn(
                f"chi*N = {abs(self.chi) * self.n_atoms:.3g} > {CHI_N_WARN}; "
                "the second-order feedback formula is unreliable",
                SmallAngleWarning,
                stacklevel=3,
            )

    @property
    def basis(self) -> SpinBasis:
        return SpinBasis(self.n_atoms)

    def with_updates(self, **changes) -> ProtocolConfig:
        return replace(self, **changes)


@dataclass(frozen=True)
class KrausPair:
    """``M± = (I ± exp(-i chi (N - Jz+))) / 2``, stored as diagonals.

    Both operators are diagonal in the Dicke product basis; the full matrices
    are available as properties.
    """

    plus_diag: CArray
    minus_diag: CArray
    chi: float

    @property
    def m_plus(self) -> CArray:
        return np.diag(self.plus_diag)

    @property
    def m_minus(self) -> CArray:
        return np.diag(self.minus_diag)

    def diag(self, which: Outcome | str) -> CArray:
        which = Outcome(which)
        if which is Outcome.PLUS:
            return self.plus_diag
        if which is Outcome.MINUS:
            return self.minus_diag
        raise ValueError("no Kraus operator for the no-detection outcome")


def kraus_pair(basis: SpinBasis, chi: float) -> KrausPair:
    return _kraus_pair(basis.n_atoms, float(chi))


@lru_cache(maxsize=64)
def _kraus_pair(n_atoms: int, chi: float) -> KrausPair:
    jzp = operator_set(n_atoms).jzp_diag
    phase = np.exp(-1j * chi * (n_atoms - jzp))
    plus = (1 + phase) / 2
    minus = (1 - phase) / 2
    plus.setflags(write=False)
    minus.setflags(write=False)
    return KrausPair(plus, minus, chi)


@lru_cache(maxsize=64)
def _frame_rotation(n_atoms: int, omega: float) -> ProductUnitary:
    return operator_set(n_atoms).frame_rotation(omega)


def _populations(state: QuantumState) -> np.ndarray:
    if state.is_pure:
        return np.abs(state.data) ** 2
    return np.diagonal(state.data).real


def _apply_diag(state: QuantumState, diag: CArray) -> CArray:
    if state.is_pure:
        return state.data * diag
    return state.data * np.outer(diag, diag.conj())


def step_probabilities(
    state: QuantumState, kraus: KrausPair, eta: float
) -> tuple[float, float, float]:
    """``(P+, P-, P_none)`` with ``P± = eta Tr[M± rho M±^†]``."""
    state.require_normalized()
    pops = _populations(state)
    p_plus = float(pops @ (np.abs(kraus.plus_diag) ** 2))
    p_minus = float(pops @ (np.abs(kraus.minus_diag) ** 2))
    return eta * p_plus, eta * p_minus, 1.0 - eta


def apply_detection(
    state: QuantumState, kraus: KrausPair, which: Outcome | str, omega: float
) -> QuantumState:
    """Kraus update for a D+/D- click followed by the x frame rotation.

    The result is unnormalized; its trace is ``Tr[M rho M^†]``.
    """
    state.require_normalized()
    data = _apply_diag(state, kraus.diag(which))
    out = QuantumState(data, normalized=False)
    if out.trace() < ZERO_BRANCH_TOL:
        raise ImpossibleOutcomeError(f"outcome {Outcome(which).value} has zero probability")
    out.data = _frame_rotation(state.n_atoms, float(omega)).apply(out.data)
    return out


def apply_no_detection(state: QuantumState, kraus: KrausPair, omega: float) -> QuantumState:
    """Lost photon: ``M+ rho M+^† + M- rho M-^†`` then the frame rotation."""
    rho = state.density_matrix()
    kp, km = kraus.plus_diag, kraus.minus_diag
    channel = np.outer(kp, kp.conj()) + np.outer(km, km.conj())
    rho = _frame_rotation(state.n_atoms, float(omega)).apply(rho * channel)
    return QuantumState(rho, normalized=state.normalized)


def _jx_plus(state: QuantumState, ops: OperatorSet) -> float:
    d = state.single_dim
    jx = ops.jx.matrix
    if state.is_pure:
        psi = state.data.reshape(d, d)
        return float(np.vdot(psi, jx @ psi + psi @ jx.T).real)
    t = state.data.reshape(d, d, d, d)
    rho1 = np.einsum("abcb->ac", t)
    rho2 = np.einsum("abad->bd", t)
    return float((np.sum(jx.T * rho1) + np.sum(jx.T * rho2)).real)


def _jz_plus(state: QuantumState, ops: OperatorSet) -> float:
    return float(_populations(state) @ ops.jzp_diag)


def _approx_moments(state: QuantumState, ops: OperatorSet) -> tuple[float, float, float]:
    """``<(Jz+)^2>``, ``<{Jy-, Jz+}>`` and ``<Jx+>`` of a normalized state."""
    d = state.single_dim
    jzp = ops.jzp_diag
    jz2 = float(_populations(state) @ jzp**2)
    jy = ops.jy.matrix
    if state.is_pure:
        psi = state.data.reshape(d, d)
        jym_psi = jy @ psi - psi @ jy.T
        anti = 2.0 * float(np.vdot(jym_psi.reshape(-1), jzp * state.data).real)
    else:
        # <{A, B}> = 2 Re Tr[A B rho] for Hermitian A, B
        b_rho = jzp[:, None] * state.data
        anti = 2.0 * float(np.sum(ops.joint["Jy-"].matrix.T * b_rho).real)
    return jz2, anti, _jx_plus(state, ops)


def feedback_angle_exact(post: QuantumState) -> float:
    """Angle that zeroes ``<Jz+>`` of ``exp(i lam Jy+) post exp(-i lam Jy+)``.

    ``exp(-i lam Jy+) Jz+ exp(i lam Jy+) = Jz+ cos(lam) + Jx+ sin(lam)``, so
    ``tan(lam) = -<Jz+>/<Jx+>`` on the (possibly unnormalized) input.
    """
    ops = operator_set(post.n_atoms)
    jz = _jz_plus(post, ops)
    jx = _jx_plus(post, ops)
    if abs(jx) < DEGENERATE_TOL * post.trace():
        raise DegenerateFeedbackError(f"<Jx+> = {jx:.3g} is degenerate")
    return math.atan(-jz / jx)


def feedback_angle_approx(
    pre: QuantumState,
    which: Outcome | str,
    chi: float,
    omega: float,
    n_atoms: int | None = None,
) -> float:
    """Second-order-in-chi feedback angle from pre-measurement moments.

    With ``S = 2<(Jz+)^2> cos(omega) + <{Jy-, Jz+}> sin(omega)``::

        tan(lam+) = -chi^2 N S / (4 <Jx+>)
        tan(lam-) =          S / (N <Jx+>)
    """
    which = Outcome(which)
    if which is Outcome.NONE:
        raise ValueError("no feedback angle for the no-detection outcome")
    n = pre.n_atoms if n_atoms is None else n_atoms
    jz2, anti, jx = _approx_moments(pre, operator_set(pre.n_atoms))
    if abs(jx) < DEGENERATE_TOL:
        raise DegenerateFeedbackError(f"<Jx+> = {jx:.3g} is degenerate")
    s = 2.0 * jz2 * math.cos(omega) + anti * math.sin(omega)
    if which is Outcome.PLUS:
        return math.atan(-(chi**2) * n * s / (4.0 * jx))
    return math.atan(s / (n * jx))


def adiabatic_clamp(lambda_raw: float, n: int, policy: FeedbackPolicy) -> float:
    """Clip ``|lam|`` to ``x exp(-x)``, ``x = n * cut_scale``, once active."""
    if n < policy.activation_step:
        return lambda_raw
    x = n * policy.cut_scale
    cut = x * math.exp(-x)
    if abs(lambda_raw) >= cut:
        return math.copysign(cut, lambda_raw) if lambda_raw != 0 else 0.0
    return lambda_raw


def apply_feedback(state: QuantumState, lam: float) -> QuantumState:
    """Conjugate by ``exp(i lam Jy+)``."""
    if lam == 0.0:
        return QuantumState(state.data.copy(), state.normalized)
    u = operator_set(state.n_atoms).feedback_rotation(lam)
    return QuantumState(u.apply(state.data), state.normalized)


@dataclass(frozen=True)
class StepOutcome:
    kind: Outcome
    probability: float
    lambda_applied: float = 0.0
    degenerate: bool = False


def _draw(u: float, p_plus: float, eta: float) -> Outcome:
    # inverse CDF in the order plus, minus, none; P+ + P- = eta
    if u < p_plus:
        return Outcome.PLUS
    if u < eta:
        return Outcome.MINUS
    return Outcome.NONE


def protocol_step(
    state: QuantumState,
    config: ProtocolConfig,
    n: int,
    random_draw: float,
    lambda_scale: float = 1.0,
) -> tuple[QuantumState, StepOutcome]:
    """Advance ``state`` by one photon; ``n`` is the 0-based photon index.

    ``lambda_scale`` multiplies the applied feedback angle (robustness study).
    A degenerate ``<Jx+>`` yields ``lam = 0`` and ``degenerate=True``.
    """
    if not 0.0 <= random_draw < 1.0:
        raise ValueError(f"random_draw must lie in [0, 1), got {random_draw}")
    kraus = kraus_pair(config.basis, config.chi)
    p_plus, p_minus, p_none = step_probabilities(state, kraus, config.eta)
    kind = _draw(random_draw, p_plus, config.eta)
    prob = {Outcome.PLUS: p_plus, Outcome.MINUS: p_minus, Outcome.NONE: p_none}[kind]

    if kind is Outcome.NONE:
        post = apply_no_detection(state, kraus, config.omega)
        return post.normalize(), StepOutcome(kind, prob)

    policy = config.policy
    lam = 0.0
    degenerate = False
    if policy.mode is not FeedbackMode.NONE and not policy.uses_exact:
        angle = (n + 1) * config.omega if config.accumulated_angle else config.omega
        try:
            lam = feedback_angle_approx(state, kind, config.chi, angle, config.n_atoms)
        except DegenerateFeedbackError:
            degenerate = True
    post = apply_detection(state, kraus, kind, config.omega)
    if policy.uses_exact:
        try:
            lam = feedback_angle_exact(post)
        except DegenerateFeedbackError:
            degenerate = True
    if policy.mode is FeedbackMode.ADIABATIC:
        lam = adiabatic_clamp(lam, n, policy)
    lam *= lambda_scale
    if lam != 0.0:
        post = apply_feedback(post, lam)
    return post.normalize(), StepOutcome(kind, prob, lam, degenerate)
