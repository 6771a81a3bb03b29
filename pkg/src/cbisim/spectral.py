"""Eigenstructure of the mean-matrix generator: Perron pair, left eigenpairs, regimes."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg as la

from .model import ModelError, NumericalError

# eigenvalues with |Im| below this (relative to max(1, |B|)) are real
IMAG_SNAP = 1e-12
# tolerance for Re(lam) == s/2
REGIME_TOL = 1e-10


class Criticality(str, Enum):
    SUBCRITICAL = "Subcritical"
    CRITICAL = "Critical"
    SUPERCRITICAL = "Supercritical"


class Regime(str, Enum):
    I = "I"  # noqa: E741
    II = "II"
    III = "III"


@dataclass(frozen=True)
class EigenPair:
    """Eigenvalue ``lam`` with left eigenvector ``v``: ``v^T Btilde = lam v^T``.

    The projection of a state ``x`` is ``<x, v>``-free of conjugation:
    ``sum_j v_j x_j``. :func:`left_eigenpair` returns unit-norm vectors, but
    any nonzero rescaling is a valid pair.
    """

    lam: complex
    v: np.ndarray

    def scaled(self, const: complex) -> "EigenPair":
        return EigenPair(self.lam, const * self.v)

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.v


@dataclass(frozen=True)
class SpectralSummary:
    eigenvalues: np.ndarray
    s: float
    irreducible: bool
    criticality: Criticality
    u: np.ndarray | None = None
    utilde: np.ndarray | None = None

    def to_json(self) -> dict:
        def cplx(z):
            z = complex(z)
            return z.real if z.imag == 0 else [z.real, z.imag]

        return {
            "eigenvalues": [cplx(z) for z in self.eigenvalues],
            "s": self.s,
            "irreducible": self.irreducible,
            "class": self.criticality.value,
            "u": None if self.u is None else self.u.tolist(),
            "utilde": None if self.utilde is None else self.utilde.tolist(),
        }


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i] & ~seen):
            seen[j] = True
            stack.append(j)
    return seen


def is_irreducible(M) -> bool:
    """Strong connectivity of the graph with an edge ``i -> j`` iff ``M[j, i] > 0``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    d = M.shape[0]
    if d == 1:
        return True
    adj = (M.T > 0) & ~np.eye(d, dtype=bool)
    return bool(_reachable(adj, 0).all() and _reachable(adj.T, 0).all())


def _snap(eigs: np.ndarray, scale: float) -> np.ndarray:
    eigs = np.asarray(eigs, dtype=complex).copy()
    small = np.abs(eigs.imag) < IMAG_SNAP * scale
    eigs[small] = eigs[small].real
    return eigs


def eigenvalues(Bt) -> np.ndarray:
    Bt = np.atleast_2d(np.asarray(Bt, dtype=float))
    try:
        eigs = la.eigvals(Bt)
    except la.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    eigs = _snap(eigs, max(1.0, la.norm(Bt, 2)))
    order = np.lexsort((eigs.imag, eigs.real))
    return eigs[order]


def _null_vector(A: np.ndarray, scale: float) -> tuple[np.ndarray, int]:
    """Unit vector spanning the (numerical) null space of ``A`` and its dimension."""
    _, sv, vh = la.svd(A)
    tol = 1e-8 * max(1.0, scale)
    nullity = int(np.sum(sv <= tol))
    return vh[-1].conj(), nullity


def _fix_phase(v: np.ndarray) -> np.ndarray:
    mod = np.abs(v)
    k = int(np.flatnonzero(mod >= mod.max() * (1 - 1e-9))[0])
    v = v * (np.abs(v[k]) / v[k])
    v = v / la.norm(v)
    if np.all(np.abs(v.imag) <= 1e-15 * max(1.0, np.abs(v).max())):
        v = v.real.astype(complex)
    return v


def spectral_summary(Bt) -> SpectralSummary:
    """Eigenvalues, ``s(Btilde)``, criticality and (if irreducible) the Perron pair.

    ``utilde`` is the right Perron vector with coordinates summing to 1 and
    ``u`` the left one with ``utilde @ u == 1``.
    """
    Bt = np.atleast_2d(np.asarray(Bt, dtype=float))
    d = Bt.shape[0]
    scale = max(1.0, la.norm(Bt, 2))
    eigs = eigenvalues(Bt)
    s = float(np.max(eigs.real))
    if abs(s) <= 1e-12 * scale:
        crit = Criticality.CRITICAL
    elif s < 0:
        crit = Criticality.SUBCRITICAL
    else:
        crit = Criticality.SUPERCRITICAL
    irr = is_irreducible(Bt)
    if not irr:
        return SpectralSummary(eigs, s, False, crit)
    right, _ = _null_vector(Bt - s * np.eye(d), scale)
    left, _ = _null_vector(Bt.T - s * np.eye(d), scale)
    right, left = right.real, left.real
    right = right / right.sum()
    left = left / (right @ left)
    if np.any(right <= 0) or np.any(left <= 0):
        raise NumericalError("Perron vectors are not strictly positive")
    return SpectralSummary(eigs, s, True, crit, u=left, utilde=right)


def left_eigenpair(Bt, target: complex) -> EigenPair:
    """Unit left eigenvector for the eigenvalue nearest ``target``.

    The largest-modulus coordinate (first one on ties) is made real positive.
    """
    Bt = np.atleast_2d(np.asarray(Bt, dtype=float))
    d = Bt.shape[0]
    eigs = eigenvalues(Bt)
    k = int(np.argmin(np.abs(eigs - target)))
    if abs(eigs[k] - target) > 1e-8 * max(1.0, abs(target)):
        raise ModelError(f"{target} is not an eigenvalue (nearest {eigs[k]})")
    lam = complex(eigs[k])
    scale = max(1.0, la.norm(Bt, 2))
    v, nullity = _null_vector(Bt.T.astype(complex) - lam * np.eye(d), scale)
    if nullity > 1:
        raise ModelError(f"eigenvalue {lam} is geometrically multiple ({nullity})")
    return EigenPair(lam, _fix_phase(v))


def eigenpair_by_index(Bt, index: int) -> EigenPair:
    """Eigenpair for the ``index``-th eigenvalue in ascending (Re, Im) order."""
    return left_eigenpair(Bt, eigenvalues(Bt)[index])


def regime(lam: complex, s: float) -> Regime:
    """Regime I: ``Re lam in (s/2, s]``; II: ``Re lam = s/2``; III: ``Re lam < s/2``."""
    if s <= 0:
        raise ModelError("regimes are defined for supercritical models only")
    re = float(np.real(lam))
    half = 0.5 * s
    if abs(re - half) <= REGIME_TOL * max(1.0, s):
        return Regime.II
    return Regime.I if re > half else Regime.III
