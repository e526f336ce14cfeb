import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qndfeedback.engine import trajectory_streams
from qndfeedback.metrics import expectation
from qndfeedback.protocol import (
    DegenerateFeedbackError,
    FeedbackMode,
    FeedbackPolicy,
    ImpossibleOutcomeError,
    Outcome,
    ProtocolConfig,
    SmallAngleWarning,
    adiabatic_clamp,
    apply_detection,
    apply_feedback,
    apply_no_detection,
    feedback_angle_approx,
    feedback_angle_exact,
    kraus_pair,
    parse_mode,
    protocol_step,
    step_probabilities,
)
from qndfeedback.spin_algebra import SpinBasis, operator_set
from qndfeedback.state import QuantumState, initial_state
from qndfeedback.metrics import maximally_entangled_state, purity

from conftest import SIZES, random_density, random_pure

N10 = SpinBasis(10)
CHI = 0.03
OMEGA = math.pi / 10
# brute-force sector sum of C(2N,K)/4^N sin^2(chi (2N-K)/2), 30-digit arithmetic
P_MINUS_INITIAL = 0.023405341011121670872


def jz_plus_mean(state):
    return expectation(state.normalize(), operator_set(state.n_atoms).joint["Jz+"])


# --- configuration --------------------------------------------------------


def test_mode_parsing_and_alias():
    assert parse_mode("simple") is FeedbackMode.SIMPLE_APPROX
    assert parse_mode("adiabatic") is FeedbackMode.ADIABATIC
    with pytest.raises(ValueError, match="unknown feedback mode"):
        parse_mode("bang-bang")


@pytest.mark.parametrize(
    "kwargs",
    [dict(eta=1.5), dict(eta=-0.1), dict(n_photons=-1), dict(record_stride=0),
     dict(seed=-1), dict(seed=2**64), dict(n_atoms=0), dict(chi=math.inf)],
)
def test_config_rejects_invalid_values(kwargs):
    with pytest.raises(ValueError):
        ProtocolConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [dict(cut_scale=0), dict(activation_step=-1), dict(approx_base="x")])
def test_policy_rejects_invalid_values(kwargs):
    with pytest.raises(ValueError):
        FeedbackPolicy(**kwargs)


def test_large_chi_n_warns_but_is_accepted():
    with pytest.warns(SmallAngleWarning):
        cfg = ProtocolConfig(n_atoms=10, chi=0.3)
    assert cfg.chi == 0.3
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ProtocolConfig(n_atoms=10, chi=0.03)


# --- Kraus operators and probabilities -------------------------------------


@given(n=st.sampled_from(SIZES), chi=st.sampled_from([0.0, 0.01, 0.03, 0.3]) | st.floats(-3, 3))
def test_povm_completeness(n, chi):
    k = kraus_pair(SpinBasis(n), chi)
    total = k.m_plus.conj().T @ k.m_plus + k.m_minus.conj().T @ k.m_minus
    assert np.abs(total - np.eye(total.shape[0])).max() <= 1e-12


def test_kraus_zero_chi_is_trivial():
    k = kraus_pair(N10, 0.0)
    np.testing.assert_allclose(k.plus_diag, 1)
    np.testing.assert_allclose(k.minus_diag, 0)


def test_kraus_matches_definition():
    k = kraus_pair(SpinBasis(2), CHI)
    jzp = operator_set(2).jzp_diag
    np.testing.assert_allclose(k.plus_diag, (1 + np.exp(-1j * CHI * (2 - jzp))) / 2)
    np.testing.assert_allclose(k.minus_diag, (1 - np.exp(-1j * CHI * (2 - jzp))) / 2)
    with pytest.raises(ValueError):
        k.diag("none")


def test_kraus_on_balanced_sector():
    k = kraus_pair(N10, CHI)
    zero = operator_set(10).jzp_diag == 0
    np.testing.assert_allclose(np.abs(k.plus_diag[zero]) ** 2, math.cos(0.15) ** 2, atol=1e-15)
    assert math.cos(0.15) ** 2 == pytest.approx(0.977668244562803, abs=1e-15)


def test_initial_state_probabilities():
    s = initial_state(N10)
    k = kraus_pair(N10, CHI)
    p_plus, p_minus, p_none = step_probabilities(s, k, 1.0)
    assert p_plus + p_minus == pytest.approx(1.0, abs=1e-12)
    assert p_minus == pytest.approx(P_MINUS_INITIAL, abs=1e-14)
    assert p_none == 0.0
    assert step_probabilities(s, k, 0.0) == (0.0, 0.0, 1.0)
    p = step_probabilities(s, k, 0.9)
    assert sum(p) == pytest.approx(1.0, abs=1e-10)
    assert p[1] == pytest.approx(0.9 * P_MINUS_INITIAL, abs=1e-14)


def test_probabilities_require_normalized_state():
    s = QuantumState(2 * initial_state(N10).data, normalized=False)
    with pytest.raises(ValueError):
        step_probabilities(s, kraus_pair(N10, CHI), 1.0)


@given(seed=st.integers(0, 2**32), eta=st.floats(0, 1), mixed=st.booleans())
def test_probabilities_sum_to_one(seed, eta, mixed):
    rng = np.random.default_rng(seed)
    data = random_density(rng, 2) if mixed else random_pure(rng, 2)
    p = step_probabilities(QuantumState(data), kraus_pair(SpinBasis(2), 0.3), eta)
    assert sum(p) == pytest.approx(1.0, abs=1e-10)
    assert min(p) >= 0


# --- conditional updates -----------------------------------------------------


def test_detection_with_zero_chi_and_omega_is_identity():
    s = initial_state(N10)
    out = apply_detection(s, kraus_pair(N10, 0.0), "plus", 0.0)
    np.testing.assert_allclose(out.data, s.data, atol=1e-15)


def test_detection_trace_equals_branch_probability():
    s = initial_state(N10)
    k = kraus_pair(N10, CHI)
    for which in ("plus", "minus"):
        out = apply_detection(s, k, which, OMEGA)
        assert not out.normalized and out.is_pure
        assert out.trace() == pytest.approx(step_probabilities(s, k, 1.0)[which == "minus"], abs=1e-12)


def test_spin_half_detection_by_hand():
    # |m1, m2> = |-1/2, -1/2>: Jz+ = -1, so |M+|^2 = |(1 + e^{-2i chi})/2|^2 = cos^2 chi;
    # exp(-i w Jx) |down> = cos(w/2)|down> - i sin(w/2)|up> (and +w for ensemble 2)
    b = SpinBasis(1)
    psi = np.zeros(4, dtype=complex)
    psi[b.joint_index(0, 0)] = 1
    chi, omega = 0.2, 0.7
    out = apply_detection(QuantumState(psi), kraus_pair(b, chi), "plus", omega)
    c2, s2 = math.cos(omega / 2) ** 2, math.sin(omega / 2) ** 2
    expected = math.cos(chi) ** 2 * np.array([c2 * c2, c2 * s2, s2 * c2, s2 * s2])
    np.testing.assert_allclose(np.abs(out.data) ** 2, expected, atol=1e-14)
    minus = apply_detection(QuantumState(psi), kraus_pair(b, chi), "minus", omega)
    assert minus.trace() == pytest.approx(math.sin(chi) ** 2, abs=1e-14)


def test_impossible_outcome_is_rejected():
    # chi = 0 makes M- vanish
    with pytest.raises(ImpossibleOutcomeError):
        apply_detection(initial_state(N10), kraus_pair(N10, 0.0), "minus", OMEGA)


def test_pure_and_mixed_detection_agree(rng):
    b = SpinBasis(3)
    psi = QuantumState(random_pure(rng, 3))
    k = kraus_pair(b, 0.1)
    pure = apply_detection(psi, k, "minus", 0.5)
    mixed = apply_detection(psi.to_mixed(), k, "minus", 0.5)
    np.testing.assert_allclose(mixed.data, np.outer(pure.data, pure.data.conj()), atol=1e-12)


def test_no_detection_identity_channel(rng):
    b = SpinBasis(2)
    rho = random_density(rng, 2)
    out = apply_no_detection(QuantumState(rho), kraus_pair(b, 0.0), 0.0)
    np.testing.assert_allclose(out.data, rho, atol=1e-14)


@given(seed=st.integers(0, 2**32), chi=st.floats(0, 1), omega=st.floats(-3, 3))
def test_no_detection_preserves_trace_and_does_not_purify(seed, chi, omega):
    rng = np.random.default_rng(seed)
    b = SpinBasis(2)
    rho = QuantumState(random_density(rng, 2))
    out = apply_no_detection(rho, kraus_pair(b, chi), omega)
    assert not out.is_pure
    assert out.trace() == pytest.approx(1.0, abs=1e-12)
    assert purity(out) <= purity(rho) + 1e-12
    out.check_health()


def test_no_detection_promotes_pure_state():
    out = apply_no_detection(initial_state(N10), kraus_pair(N10, CHI), OMEGA)
    assert not out.is_pure and purity(out) < 1 - 1e-6


@pytest.mark.parametrize("label", ["plus", "minus", "none"])
def test_operations_stay_in_symmetric_sector(label):
    # Casimir of each ensemble is fixed by construction; check it on the output
    n = 4
    ops = operator_set(n)
    eye = np.eye(n + 1)
    cas = sum(np.kron(m @ m, eye) for m in (ops.jx.matrix, ops.jy.matrix, ops.jz.matrix))
    s = initial_state(ops.basis)
    k = kraus_pair(ops.basis, 0.2)
    if label == "none":
        out = apply_no_detection(s, k, OMEGA)
    else:
        out = apply_feedback(apply_detection(s, k, label, OMEGA), 0.3)
    out = out.normalize()
    assert expectation(out, cas) == pytest.approx((n / 2) * (n / 2 + 1), abs=1e-8)


# --- feedback angles -------------------------------------------------------------


def test_exact_angle_zero_when_mean_is_zero():
    assert feedback_angle_exact(initial_state(N10)) == pytest.approx(0.0, abs=1e-15)


def test_exact_angle_pi_over_four():
    # both spins at 45 degrees between +z and +x: <Jz+> = <Jx+> = 1/sqrt(2)
    # (index 0 is m = -1/2, index 1 is m = +1/2)
    single = np.array([math.sin(math.pi / 8), math.cos(math.pi / 8)])
    state = QuantumState(np.kron(single, single).astype(complex))
    joint = operator_set(1).joint
    jz, jx = expectation(state, joint["Jz+"]), expectation(state, joint["Jx+"])
    assert jz == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert jx == pytest.approx(jz, abs=1e-12)
    lam = feedback_angle_exact(state)
    assert lam == pytest.approx(-math.pi / 4, abs=1e-12)
    assert abs(jz_plus_mean(apply_feedback(state, lam))) < 1e-12


def test_feedback_reduces_positive_offset_to_zero_not_past_it():
    # sign convention: an offset <Jz+> = c > 0 must go to 0, not to -c
    state = apply_feedback(initial_state(N10), 0.2)
    before = jz_plus_mean(state)
    assert before == pytest.approx(10 * math.sin(0.2), abs=1e-10)
    lam = feedback_angle_exact(state)
    assert lam == pytest.approx(-0.2, abs=1e-12)
    assert abs(jz_plus_mean(apply_feedback(state, lam))) < 1e-12
    # the opposite sign doubles the offset instead
    assert jz_plus_mean(apply_feedback(state, -lam)) == pytest.approx(10 * math.sin(0.4), abs=1e-10)


@pytest.mark.parametrize("which", ["plus", "minus"])
def test_exact_angle_postcondition_on_initial_state(which):
    k = kraus_pair(N10, CHI)
    post = apply_detection(initial_state(N10), k, which, OMEGA)
    lam = feedback_angle_exact(post)
    after = apply_feedback(post, lam)
    assert abs(expectation(after.normalize(), operator_set(10).joint["Jz+"])) <= 1e-9
    assert -math.pi / 2 < lam <= math.pi / 2


@given(seed=st.integers(0, 2**32), n=st.sampled_from([1, 2, 4]), mixed=st.booleans())
def test_exact_angle_postcondition_random_states(seed, n, mixed):
    rng = np.random.default_rng(seed)
    data = random_density(rng, n) if mixed else random_pure(rng, n)
    post = QuantumState(3.0 * data, normalized=False)
    try:
        lam = feedback_angle_exact(post)
    except DegenerateFeedbackError:
        return
    after = apply_feedback(post, lam)
    jzp = operator_set(n).joint["Jz+"].matrix
    val = (np.trace(jzp @ after.data) if mixed else np.vdot(after.data, jzp @ after.data)).real
    assert abs(val) <= 1e-9 * post.trace()


def test_exact_angle_degenerate_denominator():
    me = maximally_entangled_state(N10)
    with pytest.raises(DegenerateFeedbackError):
        feedback_angle_exact(me)


def test_approx_angles_on_initial_state():
    s = initial_state(N10)
    lam_minus = feedback_angle_approx(s, "minus", CHI, OMEGA, 10)
    lam_plus = feedback_angle_approx(s, "plus", CHI, OMEGA, 10)
    assert math.tan(lam_minus) == pytest.approx(math.cos(math.pi / 10) / 10, abs=1e-13)
    assert math.tan(lam_plus) == pytest.approx(-(CHI**2) * 10 * math.cos(math.pi / 10) / 4, abs=1e-15)
    assert lam_minus > 0 > lam_plus


@pytest.mark.parametrize("which", ["plus", "minus"])
def test_approx_agrees_with_exact_on_first_step(which):
    # on the initial state the first moments vanish, which the expansion assumes
    s = initial_state(N10)
    k = kraus_pair(N10, CHI)
    exact = feedback_angle_exact(apply_detection(s, k, which, OMEGA))
    approx = feedback_angle_approx(s, which, CHI, OMEGA)
    assert abs(approx - exact) <= 0.1 * max(abs(exact), 1e-4)


def test_approx_angle_vanishes_on_target():
    # <(Jz+)^2> = <{Jy-, Jz+}> = 0 on the target; <Jx+> = 0 too, so the
    # denominator is degenerate and the raw operation reports it
    with pytest.raises(DegenerateFeedbackError):
        feedback_angle_approx(maximally_entangled_state(N10), "minus", CHI, OMEGA)


def test_approx_angle_no_detection_is_an_error():
    with pytest.raises(ValueError):
        feedback_angle_approx(initial_state(N10), "none", CHI, OMEGA)


def test_approx_mixed_matches_pure(rng):
    psi = QuantumState(random_pure(rng, 3))
    for which in ("plus", "minus"):
        a = feedback_angle_approx(psi, which, 0.05, 0.4)
        b = feedback_angle_approx(psi.to_mixed(), which, 0.05, 0.4)
        assert a == pytest.approx(b, abs=1e-12)


def test_adiabatic_clamp_examples():
    pol = FeedbackPolicy()
    assert adiabatic_clamp(0.7, 0, pol) == 0.7
    assert adiabatic_clamp(0.7, 19_999, pol) == 0.7
    cut = 5 * math.exp(-5)
    assert cut == pytest.approx(0.0336897349954273, abs=1e-15)
    assert adiabatic_clamp(0.2, 50_000, pol) == pytest.approx(cut, abs=1e-15)
    assert adiabatic_clamp(-0.2, 50_000, pol) == pytest.approx(-cut, abs=1e-15)
    assert adiabatic_clamp(0.01, 50_000, pol) == 0.01
    assert adiabatic_clamp(0.0, 50_000, pol) == 0.0


@given(lam=st.floats(-1.5, 1.5), n=st.integers(0, 200_000))
def test_adiabatic_clamp_bounds(lam, n):
    pol = FeedbackPolicy()
    out = adiabatic_clamp(lam, n, pol)
    if n < pol.activation_step:
        assert out == lam
    else:
        x = n * pol.cut_scale
        assert abs(out) <= max(x * math.exp(-x), 0) + 1e-15
        assert out == 0 or math.copysign(1, out) == math.copysign(1, lam)
        assert abs(out) <= abs(lam)


@given(lam=st.floats(-3, 3), seed=st.integers(0, 2**32))
def test_feedback_is_unitary_and_invertible(lam, seed):
    rng = np.random.default_rng(seed)
    s = QuantumState(random_density(rng, 2))
    out = apply_feedback(s, lam)
    assert out.trace() == pytest.approx(1.0, abs=1e-10)
    assert purity(out) == pytest.approx(purity(s), abs=1e-10)
    np.testing.assert_allclose(apply_feedback(out, -lam).data, s.data, atol=1e-9)


def test_feedback_zero_angle_is_identity():
    s = initial_state(N10)
    np.testing.assert_array_equal(apply_feedback(s, 0.0).data, s.data)


# --- the full step ------------------------------------------------------------------


def test_step_eta_one_keeps_pure():
    cfg = ProtocolConfig(policy=FeedbackPolicy("simple-approx"))
    s, out = protocol_step(initial_state(N10), cfg, 0, 0.5)
    assert s.is_pure and out.kind is Outcome.PLUS
    assert abs(s.trace() - 1) < 1e-12


def test_step_draw_thresholds():
    cfg = ProtocolConfig(eta=0.9, policy=FeedbackPolicy("none"))
    s0 = initial_state(N10)
    p_plus = 0.9 * (1 - P_MINUS_INITIAL)
    assert protocol_step(s0, cfg, 0, p_plus - 1e-9)[1].kind is Outcome.PLUS
    assert protocol_step(s0, cfg, 0, p_plus + 1e-9)[1].kind is Outcome.MINUS
    assert protocol_step(s0, cfg, 0, 0.9 - 1e-12)[1].kind is Outcome.MINUS
    out = protocol_step(s0, cfg, 0, 0.9)[1]
    assert out.kind is Outcome.NONE and out.probability == pytest.approx(0.1)
    with pytest.raises(ValueError):
        protocol_step(s0, cfg, 0, 1.0)


def test_policy_none_never_applies_feedback():
    cfg = ProtocolConfig(policy=FeedbackPolicy("none"))
    rng, _ = trajectory_streams(3)
    s = initial_state(N10)
    for n in range(50):
        s, out = protocol_step(s, cfg, n, rng.random())
        assert out.lambda_applied == 0.0


def test_no_feedback_without_detection():
    cfg = ProtocolConfig(eta=0.5, policy=FeedbackPolicy("simple-exact"))
    s, out = protocol_step(initial_state(N10), cfg, 0, 0.75)
    assert out.kind is Outcome.NONE and out.lambda_applied == 0.0
    expected = apply_no_detection(initial_state(N10), kraus_pair(N10, CHI), OMEGA).normalize()
    np.testing.assert_allclose(s.data, expected.data, atol=1e-14)


def test_minus_step_feedback_reduces_offset():
    cfg = ProtocolConfig(policy=FeedbackPolicy("simple-approx"))
    s0 = initial_state(N10)
    draw = 1 - P_MINUS_INITIAL / 2
    fed, out = protocol_step(s0, cfg, 0, draw)
    assert out.kind is Outcome.MINUS and out.lambda_applied > 0
    bare = apply_detection(s0, kraus_pair(N10, CHI), "minus", OMEGA).normalize()
    assert abs(jz_plus_mean(fed)) < 0.1 * abs(jz_plus_mean(bare))


def test_lambda_scale_multiplies_applied_angle():
    cfg = ProtocolConfig(policy=FeedbackPolicy("simple-approx"))
    s0 = initial_state(N10)
    _, a = protocol_step(s0, cfg, 0, 0.3)
    _, b = protocol_step(s0, cfg, 0, 0.3, lambda_scale=1.1)
    assert b.lambda_applied == pytest.approx(1.1 * a.lambda_applied, rel=1e-14)


def test_degenerate_step_is_flagged_not_raised():
    cfg = ProtocolConfig(policy=FeedbackPolicy("simple-exact"))
    s, out = protocol_step(maximally_entangled_state(N10), cfg, 0, 0.5)
    assert out.degenerate and out.lambda_applied == 0.0
    assert abs(s.trace() - 1) < 1e-12


def test_adiabatic_step_is_clamped():
    pol = FeedbackPolicy("adiabatic", activation_step=0)
    cfg = ProtocolConfig(policy=pol)
    s0 = initial_state(N10)
    _, out = protocol_step(s0, cfg, 1, 1 - P_MINUS_INITIAL / 2)
    assert out.kind is Outcome.MINUS
    assert abs(out.lambda_applied) == pytest.approx(1e-4 * math.exp(-1e-4), rel=1e-12)


@pytest.mark.parametrize("eta", [1.0, 0.9])
def test_state_health_along_steps(eta):
    cfg = ProtocolConfig(eta=eta, policy=FeedbackPolicy("simple-exact"))
    rng, _ = trajectory_streams(11)
    s = initial_state(N10)
    if eta < 1:
        s = s.to_mixed()
    for n in range(40):
        s, out = protocol_step(s, cfg, n, rng.random())
        s.check_health(tol=1e-8, eig_tol=1e-7)
        if eta == 1.0:
            assert purity(s) == pytest.approx(1.0, abs=1e-8)


# --- postcondition and derived properties ---------------------------------------


def test_feedback_postcondition_over_1000_exact_steps():
    cfg = ProtocolConfig(policy=FeedbackPolicy("simple-exact"))
    jzp = operator_set(10).joint["Jz+"]
    rng, _ = trajectory_streams(0)
    s = initial_state(N10)
    worst = 0.0
    for n in range(1000):
        s, out = protocol_step(s, cfg, n, rng.random())
        assert out.kind is not Outcome.NONE
        worst = max(worst, abs(expectation(s, jzp)))
    assert worst <= 1e-8 * 10


def _first_steps(mode, steps=1000, seed=0):
    """Yield (state after step, approx angle, exact angle) along a trajectory."""
    cfg = ProtocolConfig(policy=FeedbackPolicy(mode))
    k = kraus_pair(N10, CHI)
    rng, _ = trajectory_streams(seed)
    s = initial_state(N10)
    for n in range(steps):
        p_plus, _, _ = step_probabilities(s, k, 1.0)
        which = Outcome.PLUS if rng.random() < p_plus else Outcome.MINUS
        approx = feedback_angle_approx(s, which, CHI, OMEGA)
        post = apply_detection(s, k, which, OMEGA)
        exact = feedback_angle_exact(post)
        s = apply_feedback(post, exact if cfg.policy.uses_exact else approx).normalize()
        yield s, approx, exact


def test_mean_zeroing_cascade_under_exact_feedback():
    jym = operator_set(10).joint["Jy-"]
    worst = max(abs(expectation(s, jym)) for s, _, _ in _first_steps("simple-exact", 200))
    assert worst <= 1e-6 * 10


def test_approx_tracks_exact_over_first_thousand_steps():
    worst = max(
        abs(a - e) / max(abs(e), 1e-4) for _, a, e in _first_steps("simple-approx")
    )
    assert worst <= 0.1
