"""Fast self-check of the operator algebra, the POVM and the feedback loop."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import trajectory_streams
from .metrics import expectation, maximally_entangled_state, variance
from .protocol import (
    FeedbackMode,
    FeedbackPolicy,
    Outcome,
    ProtocolConfig,
    apply_detection,
    apply_feedback,
    feedback_angle_exact,
    kraus_pair,
    step_probabilities,
)
from .spin_algebra import SpinBasis, operator_set
from .state import initial_state

VERIFY_SIZES = (1, 2, 4, 10)
VERIFY_CHIS = (0.0, 0.01, 0.03, 0.3)
ALGEBRA_TOL = 1e-12
CASIMIR_TOL = 1e-10
POVM_TOL = 1e-12
NULL_TOL = 1e-10
POSTCONDITION_TOL = 1e-8
POSTCONDITION_STEPS = 100


@dataclass(frozen=True)
class CheckResult:
    name: str
    n_atoms: int
    passed: bool
    detail: str


def check_algebra(n_atoms: int) -> CheckResult:
    ops = operator_set(n_atoms)
    jx, jy, jz = ops.jx.matrix, ops.jy.matrix, ops.jz.matrix
    comm = max(
        np.abs(jx @ jy - jy @ jx - 1j * jz).max(),
        np.abs(jy @ jz - jz @ jy - 1j * jx).max(),
        np.abs(jz @ jx - jx @ jz - 1j * jy).max(),
    )
    j = ops.basis.spin
    casimir = np.abs(jx @ jx + jy @ jy + jz @ jz - j * (j + 1) * np.eye(ops.basis.single_dim)).max()
    ok = comm <= ALGEBRA_TOL and casimir <= CASIMIR_TOL
    return CheckResult("algebra", n_atoms, ok, f"comm {comm:.1e} casimir {casimir:.1e}")


def check_povm(n_atoms: int, chi_sign: float = 1.0) -> CheckResult:
    worst = 0.0
    basis = SpinBasis(n_atoms)
    for chi in VERIFY_CHIS:
        k = kraus_pair(basis, chi_sign * chi)
        worst = max(worst, float(np.abs(np.abs(k.plus_diag) ** 2 + np.abs(k.minus_diag) ** 2 - 1).max()))
    return CheckResult("povm", n_atoms, worst <= POVM_TOL, f"max dev {worst:.1e}")


def check_null_triple(n_atoms: int) -> CheckResult:
    me = maximally_entangled_state(SpinBasis(n_atoms))
    joint = operator_set(n_atoms).joint
    worst = max(
        max(abs(expectation(me, joint[k])), abs(variance(me, joint[k])))
        for k in ("Jz+", "Jy-", "Jx-")
    )
    return CheckResult("null-triple", n_atoms, worst <= NULL_TOL, f"max |<A>|,Var {worst:.1e}")


def check_postcondition(
    n_atoms: int, steps: int = POSTCONDITION_STEPS, chi_sign: float = 1.0, seed: int = 12345
) -> CheckResult:
    """Simple-exact feedback must zero ``<Jz+>`` after every detection.

    The controller sees the true state but predicts the post-measurement state
    with its own Kraus model of chi scaled by ``chi_sign``. ``chi_sign = -1`` is
    the fault-injection hook: the POVM stays complete, yet the predicted angle
    no longer matches the plant and the postcondition breaks.
    """
    cfg = ProtocolConfig(n_atoms=n_atoms, policy=FeedbackPolicy(FeedbackMode.SIMPLE_EXACT))
    basis = cfg.basis
    plant_kraus = kraus_pair(basis, cfg.chi)
    model_kraus = kraus_pair(basis, chi_sign * cfg.chi)
    jzp = operator_set(n_atoms).joint["Jz+"]
    state = initial_state(basis)
    rng, _ = trajectory_streams(seed)
    worst = 0.0
    for _ in range(steps):
        p_plus, _, _ = step_probabilities(state, plant_kraus, 1.0)
        which = Outcome.PLUS if rng.random() < p_plus else Outcome.MINUS
        lam = feedback_angle_exact(apply_detection(state, model_kraus, which, cfg.omega))
        post = apply_detection(state, plant_kraus, which, cfg.omega)
        state = apply_feedback(post, lam).normalize()
        worst = max(worst, abs(expectation(state, jzp)))
    ok = worst <= POSTCONDITION_TOL * n_atoms
    return CheckResult("postcondition", n_atoms, ok, f"max |<Jz+>| {worst:.1e}")


def run_verification(
    sizes=VERIFY_SIZES, chi_sign: float = 1.0, steps: int = POSTCONDITION_STEPS
) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = []
    for n in sizes:
        results.append(check_algebra(n))
        results.append(check_povm(n, chi_sign))
        results.append(check_null_triple(n))
        results.append(check_postcondition(n, steps, chi_sign))
    return results, time.perf_counter() - start


def format_table(results: list[CheckResult]) -> str:
    rows = [f"{'check':<14} {'N':>3}  {'result':<6} detail"]
    for r in results:
        rows.append(f"{r.name:<14} {r.n_atoms:>3}  {'PASS' if r.passed else 'FAIL':<6} {r.detail}")
    return "\n".join(rows)
