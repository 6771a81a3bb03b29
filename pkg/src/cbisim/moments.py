"""Closed-form first and second moments and asymptotic covariances of projections."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np
import scipy.linalg as la

from .measures import projection_quadratics
from .model import CbiParams, EffectiveParams, InitialLaw, ModelError, is_trivial
from .spectral import IMAG_SNAP, EigenPair, Regime, SpectralSummary, regime


class SigmaClass(str, Enum):
    ZERO = "Zero"
    SINGULAR_NONZERO = "SingularNonzero"
    INVERTIBLE = "Invertible"


@dataclass(frozen=True)
class SigmaReport:
    regime: Regime
    C: np.ndarray
    Ctilde: np.ndarray
    Sigma: np.ndarray
    classification: SigmaClass

    def to_json(self) -> dict:
        return {
            "regime": self.regime.value,
            "C": self.C.tolist(),
            "Ctilde": [[z.real, z.imag] for z in self.Ctilde],
            "Sigma": self.Sigma.tolist(),
            "classification": self.classification.value,
        }


@dataclass(frozen=True)
class MomentReport:
    t: float
    value: float
    h_of_t: float
    M2: float

    def to_json(self) -> dict:
        return {"t": self.t, "value": self.value, "h": self.h_of_t, "M2": self.M2}


def mean_at(eff: EffectiveParams, Ex0, t: float) -> np.ndarray:
    """``E X_t = e^{t Bt} E X_0 + int_0^t e^{u Bt} betatilde du``.

    One exponential of the block matrix ``[[Bt, betatilde], [0, 0]]``.
    """
    if t < 0:
        raise ModelError("t must be non-negative")
    Ex0 = np.asarray(Ex0, dtype=float)
    d = Ex0.shape[0]
    A = np.zeros((d + 1, d + 1))
    A[:d, :d] = eff.Btilde
    A[:d, d] = eff.betatilde
    E = la.expm(t * A)
    return np.maximum(E[:d, :d] @ Ex0 + E[:d, d], 0.0)


def w_mean(spec: SpectralSummary, eff: EffectiveParams, Ex0) -> float:
    """``E w_u = <u, E X_0> + <u, betatilde> / s``."""
    if spec.s <= 0:
        raise ModelError("w_mean requires a supercritical model")
    if spec.u is None:
        raise ModelError("w_mean requires an irreducible model")
    return float(spec.u @ np.asarray(Ex0, dtype=float) + spec.u @ eff.betatilde / spec.s)


def projection_constants(params: CbiParams, pair: EigenPair) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-type ``C_l``, ``Ctilde_l`` and the branching support masses.

    ``C_l = 2 |v_l|^2 c_l + int |<v,z>|^2 mu_l(dz)``,
    ``Ctilde_l = 2 v_l^2 c_l + int <v,z>^2 mu_l(dz)``.
    """
    v = np.asarray(pair.v, dtype=complex)
    d = params.d
    C = np.empty(d)
    Ct = np.empty(d, dtype=complex)
    hits = np.empty(d)
    for l, m in enumerate(params.mu):
        I2, J2, _, h = projection_quadratics(m, v)
        C[l] = 2 * abs(v[l]) ** 2 * params.c[l] + I2
        Ct[l] = 2 * v[l] ** 2 * params.c[l] + J2
        hits[l] = h
    return C, Ct, hits


def _rot_block(z: complex) -> np.ndarray:
    return np.array([[z.real, z.imag], [z.imag, -z.real]])


def _kills_projection(params: CbiParams, pair: EigenPair, hits: np.ndarray) -> bool:
    v = np.asarray(pair.v, dtype=complex)
    vnorm = np.linalg.norm(v)
    diff_zero = np.abs(params.c * v) <= 1e-12 * vnorm * np.maximum(params.c, 1.0)
    return bool(np.all(diff_zero) and np.all(hits == 0))


def _is_real(lam: complex, s: float) -> bool:
    return abs(np.imag(lam)) < IMAG_SNAP * max(1.0, abs(s))


def sigma_classification(params: CbiParams, pair: EigenPair, s: float | None = None) -> tuple[SigmaClass, str]:
    """Structural zero / singular / invertible verdict for ``Sigma_v``."""
    _, _, hits = projection_constants(params, pair)
    if _kills_projection(params, pair, hits):
        return SigmaClass.ZERO, "c_l <v,e_l> = 0 and mu_l{<v,z> != 0} = 0 for every type"
    if _is_real(pair.lam, 1.0 if s is None else s):
        return SigmaClass.SINGULAR_NONZERO, "real eigenvalue: Sigma_v has rank one"
    return SigmaClass.INVERTIBLE, "complex eigenvalue with a type feeding noise into the projection"


def sigma_v(params: CbiParams, spec: SpectralSummary, pair: EigenPair) -> SigmaReport:
    """Asymptotic 2x2 covariance of ``(Re, Im) <v, X_t>`` in regimes II and III."""
    if spec.s <= 0 or spec.utilde is None:
        raise ModelError("sigma_v requires a supercritical irreducible model")
    reg = regime(pair.lam, spec.s)
    if reg is Regime.I:
        raise ModelError("Sigma_v is not defined in regime I")
    C, Ct, hits = projection_constants(params, pair)
    s = spec.s
    lam = complex(pair.lam)
    real_lam = _is_real(lam, s)
    Sigma = np.zeros((2, 2))
    for l in range(params.d):
        wl = spec.utilde[l]
        if reg is Regime.II:
            term = C[l] * np.eye(2)
            if real_lam:
                term = term + _rot_block(Ct[l])
        else:
            term = C[l] / (s - 2 * lam.real) * np.eye(2) + _rot_block(Ct[l] / (s - 2 * lam))
        Sigma += 0.5 * wl * term
    Sigma = 0.5 * (Sigma + Sigma.T)
    cls, _ = sigma_classification(params, pair, s)
    return SigmaReport(reg, C, Ct, Sigma, cls)


def classify_matrix(Sigma: np.ndarray) -> SigmaClass:
    """Direct verdict from a 2x2 PSD matrix."""
    if np.linalg.norm(Sigma) <= 1e-12:
        return SigmaClass.ZERO
    tr = np.trace(Sigma)
    if np.linalg.det(Sigma) > 1e-12 * tr**2:
        return SigmaClass.INVERTIBLE
    return SigmaClass.SINGULAR_NONZERO


def variance_limit(params: CbiParams, spec: SpectralSummary, eff: EffectiveParams, pair: EigenPair, Ex0) -> np.ndarray:
    """``lim h(t) E[(Re, Im)(Re, Im)^T] = E w_u * Sigma_v``."""
    rep = sigma_v(params, spec, pair)
    return w_mean(spec, eff, Ex0) * rep.Sigma


def _int_exp(a: complex, t: float) -> complex:
    """``int_0^t e^{a u} du``."""
    if abs(a * t) < 1e-8:
        return t * (1 + a * t / 2)
    return (np.exp(a * t) - 1) / a


def adaptive_simpson(
    f: Callable[[float], np.ndarray], a: float, b: float, tol: float = 1e-9, rtol: float = 0.0, max_depth: int = 50
) -> np.ndarray:
    """Adaptive Simpson quadrature of a vector-valued ``f`` on ``[a, b]``.

    Panels are accepted once the Richardson error estimate is below ``tol``
    or ``rtol`` times the panel value.
    """
    fa, fb = np.asarray(f(a)), np.asarray(f(b))
    m = 0.5 * (a + b)
    fm = np.asarray(f(m))
    whole = (b - a) / 6 * (fa + 4 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = np.asarray(f(lm)), np.asarray(f(rm))
        left = (m - a) / 6 * (fa + 4 * flm + fm)
        right = (b - m) / 6 * (fm + 4 * frm + fb)
        err = left + right - whole
        if depth <= 0 or np.max(np.abs(err)) <= 15 * max(tol, rtol * np.max(np.abs(left + right))):
            return left + right + err / 15
        return rec(a, m, fa, flm, fm, left, tol / 2, depth - 1) + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1)

    return rec(a, b, fa, fm, fb, whole, tol, max_depth)


def second_moment_terms(params: CbiParams, eff: EffectiveParams, pair: EigenPair, x0, t: float, tol: float = 1e-9) -> dict:
    """The pieces of ``E|<v, X_t>|^2``: deterministic part, ``I_{lam,l}(t)``, ``I_lam(t)``."""
    law = InitialLaw.coerce(x0)
    v = np.asarray(pair.v, dtype=complex)
    lam = complex(pair.lam)
    a = 2 * lam.real
    proj0 = law.points @ v
    drift = (v @ eff.betatilde) * _int_exp(lam, t)
    E_det = float(law.probs @ np.abs(np.exp(lam * t) * proj0 + drift) ** 2)
    Ex0 = law.mean
    if t > 0:
        I_l = adaptive_simpson(lambda u: np.exp(a * (t - u)) * mean_at(eff, Ex0, u), 0.0, t, tol, rtol=1e-11)
    else:
        I_l = np.zeros(params.d)
    I_lam = float(np.real(_int_exp(a, t)))
    C, _, _ = projection_constants(params, pair)
    nu_I2 = projection_quadratics(params.nu, v)[0]
    return {"E": E_det, "I_l": np.asarray(I_l, dtype=float), "I": I_lam, "C": C, "nu_I2": nu_I2}


def second_moment(params: CbiParams, eff: EffectiveParams, spec: SpectralSummary | None, pair: EigenPair, x0, t: float) -> MomentReport:
    """``E|<v, X_t>|^2`` in closed form up to a one-dimensional quadrature."""
    if t < 0:
        raise ModelError("t must be non-negative")
    p = second_moment_terms(params, eff, pair, x0, t)
    value = p["E"] + float(p["C"] @ p["I_l"]) + p["I"] * p["nu_I2"]
    h, M2 = (np.nan, np.nan)
    if spec is not None and spec.s > 0 and spec.u is not None:
        hfun, M2 = m2_limit(params, eff, spec, pair, x0)
        h = hfun(t) if t > 0 else np.nan
    return MomentReport(t, value, h, M2)


def scaling_function(spec: SpectralSummary, pair: EigenPair) -> tuple[str, Callable[[float], float]]:
    s = spec.s
    reg = regime(pair.lam, s)
    if reg is Regime.III:
        return "exp(-s t)", lambda t: float(np.exp(-s * t))
    if reg is Regime.II:
        return "exp(-s t)/t", lambda t: float(np.exp(-s * t) / t)
    a = 2 * np.real(pair.lam)
    return "exp(-2 Re(lam) t)", lambda t: float(np.exp(-a * t))


def m2_limit(params: CbiParams, eff: EffectiveParams, spec: SpectralSummary, pair: EigenPair, x0) -> tuple[Callable[[float], float], float]:
    """Scaling ``h`` and limit ``M2 = lim h(t) E|<v, X_t>|^2``."""
    if spec.s <= 0 or spec.u is None:
        raise ModelError("m2_limit requires a supercritical irreducible model")
    law = InitialLaw.coerce(x0)
    s = spec.s
    reg = regime(pair.lam, s)
    _, h = scaling_function(spec, pair)
    C, _, _ = projection_constants(params, pair)
    if reg is not Regime.I:
        wm = w_mean(spec, eff, law.mean)
        core = float(C @ spec.utilde)
        if reg is Regime.III:
            core /= s - 2 * np.real(pair.lam)
        return h, wm * core
    v = np.asarray(pair.v, dtype=complex)
    lam = complex(pair.lam)
    a = 2 * lam.real
    first = float(law.probs @ np.abs(law.points @ v + (v @ eff.betatilde) / lam) ** 2)
    nu_term = projection_quadratics(params.nu, v)[0] / a
    K = a * np.eye(params.d) - eff.Btilde
    if abs(np.linalg.det(K)) < 1e-14 * max(1.0, np.linalg.norm(K)) ** params.d:
        raise ModelError("2 Re(lam) I - Btilde is singular")
    sol = np.linalg.solve(K, law.mean + eff.betatilde / a)
    return h, first + nu_term + float(C @ sol)


def deterministic_projection(
    params: CbiParams, eff: EffectiveParams, pair: EigenPair, x0_deterministic: bool, Ex0
) -> Callable[[float], complex] | None:
    """Trajectory ``t -> <v, X_t>`` when the projection is deterministic, else ``None``."""
    Ex0 = np.asarray(Ex0, dtype=float)
    lam = complex(pair.lam)
    v = np.asarray(pair.v, dtype=complex)
    trivial = is_trivial(params, x0_deterministic and not np.any(Ex0))
    if not trivial:
        _, _, hits = projection_constants(params, pair)
        nu_hits = projection_quadratics(params.nu, v)[3]
        if not (x0_deterministic and _kills_projection(params, pair, hits) and nu_hits == 0):
            return None
    p0 = complex(v @ Ex0)
    pb = complex(v @ eff.betatilde)

    def trajectory(t: float) -> complex:
        return np.exp(lam * t) * p0 + pb * _int_exp(lam, t)

    return trajectory
