"""Fast inner loops for whole trajectories.

These advance a state through many photons with the same arithmetic as
:func:`qndfeedback.protocol.protocol_step`, which remains the reference
implementation (the test-suite checks the two agree step by step). The pure
path is compiled with numba; the mixed path is dominated by small BLAS calls
and stays in numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .protocol import (
    DEGENERATE_TOL,
    FeedbackMode,
    ProtocolConfig,
    kraus_pair,
)
from .spin_algebra import operator_set, rotation_unitary

PLUS, MINUS, NONE = 0, 1, 2
KIND_NAMES = ("plus", "minus", "none")


@dataclass
class ChunkStats:
    counts: np.ndarray
    degenerate: int
    last_kind: int
    last_lambda: float


@njit(cache=True)
def _mm(a, b, out):  # pragma: no cover - compiled
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            acc = 0j
            for k in range(d):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc


@njit(cache=True)
def _mm_bt(a, b, out):  # pragma: no cover - compiled
    """``out = a @ b.T``."""
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            acc = 0j
            for k in range(d):
                acc += a[i, k] * b[j, k]
            out[i, j] = acc


@njit(cache=True)
def _jx_plus(psi, jx, tmp):  # pragma: no cover - compiled
    """``<psi| Jx⊗1 + 1⊗Jx |psi>`` with ``Jx`` real symmetric."""
    d = psi.shape[0]
    _mm(jx, psi, tmp)
    acc = 0.0
    for i in range(d):
        for j in range(d):
            acc += (psi[i, j].conjugate() * tmp[i, j]).real
    _mm_bt(psi, jx, tmp)
    for i in range(d):
        for j in range(d):
            acc += (psi[i, j].conjugate() * tmp[i, j]).real
    return acc


@njit(cache=True)
def _advance_pure(
    psi, n0, draws, scales, kp, km, r1, r2, jx, jy, vy, wy, jzp,
    chi, omega, n_atoms, eta, feedback, use_exact, adiabatic, cut_scale,
    activation, accumulated,
):  # pragma: no cover - compiled
    d = psi.shape[0]
    counts = np.zeros(3, np.int64)
    degenerate = 0
    last_kind = -1
    last_lam = 0.0
    tmp = np.empty((d, d), np.complex128)
    tmp2 = np.empty((d, d), np.complex128)
    f = np.empty((d, d), np.complex128)
    phases = np.empty(d, np.complex128)
    for s in range(draws.size):
        n = n0 + s
        p_plus = 0.0
        for i in range(d):
            for j in range(d):
                p_plus += (psi[i, j].real ** 2 + psi[i, j].imag ** 2) * (
                    kp[i, j].real ** 2 + kp[i, j].imag ** 2
                )
        p_plus *= eta
        u = draws[s]
        if u < p_plus:
            kind = PLUS
        elif u < eta:
            kind = MINUS
        else:
            # caller guarantees eta == 1 on this path
            raise ValueError("pure kernel drew a lost photon")
        counts[kind] += 1
        last_kind = kind

        lam = 0.0
        bad = False
        if feedback and not use_exact:
            jz2 = 0.0
            for i in range(d):
                for j in range(d):
                    jz2 += (psi[i, j].real ** 2 + psi[i, j].imag ** 2) * jzp[i, j] ** 2
            # <{Jy-, Jz+}> = 2 Re <Jy- psi, Jz+ psi>
            _mm(jy, psi, tmp)
            _mm_bt(psi, jy, tmp2)
            anti = 0.0
            for i in range(d):
                for j in range(d):
                    anti += ((tmp[i, j] - tmp2[i, j]).conjugate() * jzp[i, j] * psi[i, j]).real
            anti *= 2.0
            jxv = _jx_plus(psi, jx, tmp)
            ang = omega * (n + 1) if accumulated else omega
            if abs(jxv) < DEGENERATE_TOL:
                bad = True
            else:
                sval = 2.0 * jz2 * math.cos(ang) + anti * math.sin(ang)
                if kind == PLUS:
                    lam = math.atan(-(chi**2) * n_atoms * sval / (4.0 * jxv))
                else:
                    lam = math.atan(sval / (n_atoms * jxv))

        k = kp if kind == PLUS else km
        for i in range(d):
            for j in range(d):
                psi[i, j] *= k[i, j]
        _mm(r1, psi, tmp)
        _mm_bt(tmp, r2, psi)

        if feedback and use_exact:
            tr = 0.0
            jzv = 0.0
            for i in range(d):
                for j in range(d):
                    p = psi[i, j].real ** 2 + psi[i, j].imag ** 2
                    tr += p
                    jzv += p * jzp[i, j]
            jxv = _jx_plus(psi, jx, tmp)
            if abs(jxv) < DEGENERATE_TOL * tr:
                bad = True
            else:
                lam = math.atan(-jzv / jxv)

        if bad:
            degenerate += 1
            lam = 0.0
        if adiabatic and n >= activation:
            x = n * cut_scale
            cut = x * math.exp(-x)
            if abs(lam) >= cut and lam != 0.0:
                lam = math.copysign(cut, lam)
        lam *= scales[s]
        if lam != 0.0:
            for i in range(d):
                phases[i] = np.exp(1j * lam * wy[i])
            for i in range(d):
                for j in range(d):
                    acc = 0j
                    for k2 in range(d):
                        acc += vy[i, k2] * phases[k2] * vy[j, k2].conjugate()
                    f[i, j] = acc
            _mm(f, psi, tmp)
            _mm_bt(tmp, f, psi)
        norm = 0.0
        for i in range(d):
            for j in range(d):
                norm += psi[i, j].real ** 2 + psi[i, j].imag ** 2
        norm = math.sqrt(norm)
        for i in range(d):
            for j in range(d):
                psi[i, j] /= norm
        last_lam = lam
    return counts, degenerate, last_kind, last_lam


def _conjugate(left, right, rho, d):
    """``(L⊗R) rho (L⊗R)^†`` as four single-factor BLAS products."""
    x = (left @ rho.reshape(d, -1)).reshape(d, d, d, d)
    x = (right @ x.transpose(1, 0, 2, 3).reshape(d, -1)).reshape(d, d, d, d)
    x = (x.reshape(-1, d) @ right.conj().T).reshape(d, d, d, d)
    x = (x.transpose(0, 1, 3, 2).reshape(-1, d) @ left.conj().T).reshape(d, d, d, d)
    return np.ascontiguousarray(x.transpose(1, 0, 3, 2)).reshape(d * d, d * d)


class TrajectoryKernel:
    """Precomputed operators for advancing one configuration quickly."""

    def __init__(self, config: ProtocolConfig):
        self.config = config
        ops = operator_set(config.n_atoms)
        d = ops.basis.single_dim
        self.d = d
        kraus = kraus_pair(ops.basis, config.chi)
        self.kp = kraus.plus_diag
        self.km = kraus.minus_diag
        self.r1 = rotation_unitary(ops.jx_cache, -config.omega)
        self.r2 = rotation_unitary(ops.jx_cache, config.omega)
        self.jx = np.ascontiguousarray(ops.jx.matrix)
        self.jy = np.ascontiguousarray(ops.jy.matrix)
        self.jz = ops.jz.matrix
        self.vy = np.ascontiguousarray(ops.jy_cache.eigenvectors)
        self.wy = np.ascontiguousarray(ops.jy_cache.eigenvalues)
        self.jzp = ops.jzp_diag.reshape(d, d).copy()
        self.jym = ops.joint["Jy-"].matrix
        policy = config.policy
        self.feedback = policy.mode is not FeedbackMode.NONE
        self.use_exact = policy.uses_exact
        self.adiabatic = policy.mode is FeedbackMode.ADIABATIC
        # Heisenberg-picture Jz, Jx after the frame rotation, per ensemble
        self.jz_rot = (self.r1.conj().T @ self.jz @ self.r1, self.r2.conj().T @ self.jz @ self.r2)
        self.jx_rot = (self.r1.conj().T @ self.jx @ self.r1, self.r2.conj().T @ self.jx @ self.r2)
        self.kp_outer = np.outer(self.kp, self.kp.conj())
        self.km_outer = np.outer(self.km, self.km.conj())
        self.lost_outer = self.kp_outer + self.km_outer

    def advance(
        self, data: np.ndarray, n0: int, draws: np.ndarray, scales: np.ndarray
    ) -> tuple[np.ndarray, ChunkStats]:
        if data.ndim == 1:
            return self._advance_pure(data, n0, draws, scales)
        return self._advance_mixed(data, n0, draws, scales)

    def _advance_pure(self, data, n0, draws, scales):
        cfg = self.config
        if cfg.eta != 1.0:
            raise ValueError("pure-state kernel requires eta == 1")
        pol = cfg.policy
        psi = data.reshape(self.d, self.d).copy()
        counts, degenerate, kind, lam = _advance_pure(
            psi, n0, draws, scales, self.kp.reshape(self.d, self.d), self.km.reshape(self.d, self.d),
            self.r1, self.r2, self.jx, self.jy, self.vy, self.wy, self.jzp,
            float(cfg.chi), float(cfg.omega), cfg.n_atoms, float(cfg.eta),
            self.feedback, self.use_exact, self.adiabatic, float(pol.cut_scale),
            int(pol.activation_step), bool(cfg.accumulated_angle),
        )
        return psi.reshape(-1), ChunkStats(counts, int(degenerate), int(kind), float(lam))

    def _local_expect(self, rho, op1, op2) -> float:
        d = self.d
        t = rho.reshape(d, d, d, d)
        rho1 = np.einsum("abcb->ac", t)
        rho2 = np.einsum("abad->bd", t)
        return float((np.sum(op1.T * rho1) + np.sum(op2.T * rho2)).real)

    def _advance_mixed(self, rho, n0, draws, scales):
        cfg = self.config
        pol = cfg.policy
        d = self.d
        eta = cfg.eta
        jzp = self.jzp.reshape(-1)
        kp2 = np.abs(self.kp) ** 2
        counts = np.zeros(3, np.int64)
        degenerate = 0
        kind = -1
        lam = 0.0
        for s in range(draws.size):
            n = n0 + s
            pops = np.diagonal(rho).real
            p_plus = eta * float(pops @ kp2)
            u = draws[s]
            kind = PLUS if u < p_plus else (MINUS if u < eta else NONE)
            counts[kind] += 1
            lam = 0.0
            if kind == NONE:
                rho = _conjugate(self.r1, self.r2, rho * self.lost_outer, d)
                rho = rho / np.trace(rho).real
                continue
            bad = False
            if self.feedback and not self.use_exact:
                jz2 = float(pops @ jzp**2)
                anti = 2.0 * float(np.sum(self.jym.T * (jzp[:, None] * rho)).real)
                jxv = self._local_expect(rho, self.jx, self.jx)
                ang = cfg.omega * (n + 1) if cfg.accumulated_angle else cfg.omega
                if abs(jxv) < DEGENERATE_TOL:
                    bad = True
                else:
                    sval = 2.0 * jz2 * math.cos(ang) + anti * math.sin(ang)
                    if kind == PLUS:
                        lam = math.atan(-(cfg.chi**2) * cfg.n_atoms * sval / (4.0 * jxv))
                    else:
                        lam = math.atan(sval / (cfg.n_atoms * jxv))
            sigma = rho * (self.kp_outer if kind == PLUS else self.km_outer)
            if self.feedback and self.use_exact:
                tr = float(np.trace(sigma).real)
                jzv = self._local_expect(sigma, *self.jz_rot)
                jxv = self._local_expect(sigma, *self.jx_rot)
                if abs(jxv) < DEGENERATE_TOL * tr:
                    bad = True
                else:
                    lam = math.atan(-jzv / jxv)
            if bad:
                degenerate += 1
                lam = 0.0
            if self.adiabatic and n >= pol.activation_step:
                x = n * pol.cut_scale
                cut = x * math.exp(-x)
                if abs(lam) >= cut and lam != 0.0:
                    lam = math.copysign(cut, lam)
            lam *= scales[s]
            left, right = self.r1, self.r2
            if lam != 0.0:
                f = rotation_unitary(operator_set(cfg.n_atoms).jy_cache, lam)
                left, right = f @ left, f @ right
            rho = _conjugate(left, right, sigma, d)
            rho = rho / np.trace(rho).real
        return rho, ChunkStats(counts, degenerate, kind, lam)
