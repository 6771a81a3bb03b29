"""Admissible CBI parameters, effective mean parameters and the Laplace transform."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .measures import (
    DiscreteMeasure,
    mean_vector,
    positive_part_integral,
    tail_moment,
)

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    """Raised for inputs outside the domain of an operation."""


class NumericalError(RuntimeError):
    """Raised when a numerical scheme leaves its region of validity."""


@dataclass(frozen=True)
class CbiParams:
    """The admissible tuple ``(d, c, beta, B, nu, mu)``.

    Construction normalizes array shapes only; admissibility is reported by
    :func:`validate` so that bad configurations can be diagnosed as data.
    """

    c: np.ndarray
    beta: np.ndarray
    B: np.ndarray
    nu: DiscreteMeasure
    mu: tuple[DiscreteMeasure, ...]

    def __post_init__(self) -> None:
        c = np.asarray(self.c, dtype=float).reshape(-1)
        d = c.shape[0]
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        B = np.asarray(self.B, dtype=float)
        if B.size == d * d:
            B = B.reshape(d, d)
        for a in (c, beta, B):
            a.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "mu", tuple(self.mu))

    @property
    def d(self) -> int:
        return self.c.shape[0]

    @classmethod
    def build(
        cls,
        c: Sequence[float],
        beta: Sequence[float],
        B,
        nu: DiscreteMeasure | None = None,
        mu: Sequence[DiscreteMeasure] | None = None,
    ) -> "CbiParams":
        d = len(c)
        nu = nu if nu is not None else DiscreteMeasure.empty(d)
        mu = tuple(mu) if mu is not None else tuple(DiscreteMeasure.empty(d) for _ in range(d))
        return cls(np.asarray(c), np.asarray(beta), np.asarray(B), nu, mu)

    @classmethod
    def from_json(cls, obj: dict) -> "CbiParams":
        d = int(obj["d"])
        mu_raw = obj.get("mu", [[] for _ in range(d)])
        return cls.build(
            c=obj["c"],
            beta=obj["beta"],
            B=np.array(obj["B"], dtype=float),
            nu=DiscreteMeasure.from_json(obj.get("nu", []), d),
            mu=[DiscreteMeasure.from_json(m, d) for m in mu_raw],
        )

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "c": self.c.tolist(),
            "beta": self.beta.tolist(),
            "B": self.B.tolist(),
            "nu": self.nu.to_json(),
            "mu": [m.to_json() for m in self.mu],
        }

    def digest(self) -> str:
        """Stable short hash of the parameter tuple, embedded in reports."""
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def without_immigration(self) -> "CbiParams":
        """Same branching mechanism with ``beta = 0`` and ``nu = 0``."""
        return CbiParams(self.c, np.zeros(self.d), self.B, DiscreteMeasure.empty(self.d), self.mu)


@dataclass(frozen=True)
class InitialLaw:
    """Law of ``X_0``: a deterministic vector or a finite mixture of points."""

    points: np.ndarray
    probs: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        probs = np.ones(1) if self.probs is None else np.asarray(self.probs, dtype=float)
        if probs.shape != (pts.shape[0],):
            raise ModelError("one probability per initial point is required")
        if np.any(pts < 0):
            raise ModelError("initial points must be non-negative")
        if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-12):
            raise ModelError("initial probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def coerce(cls, x0) -> "InitialLaw":
        return x0 if isinstance(x0, InitialLaw) else cls(np.asarray(x0, dtype=float))

    @property
    def deterministic(self) -> bool:
        return self.points.shape[0] == 1 or bool(np.all(self.points == self.points[0]))

    @property
    def mean(self) -> np.ndarray:
        return self.probs @ self.points

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.points[self.probs > 0] == 0))

    @classmethod
    def from_json(cls, obj) -> "InitialLaw":
        if isinstance(obj, dict):
            return cls(np.array(obj["points"], dtype=float), np.array(obj["probs"], dtype=float))
        return cls(np.array(obj, dtype=float))

    def to_json(self):
        if self.points.shape[0] == 1:
            return self.points[0].tolist()
        return {"points": self.points.tolist(), "probs": self.probs.tolist()}


@dataclass(frozen=True)
class EffectiveParams:
    """Mean-matrix generator ``Btilde`` and immigration mean ``betatilde``."""

    Btilde: np.ndarray
    betatilde: np.ndarray


@dataclass(frozen=True)
class MomentFlags:
    mc_nu_first: bool
    mc_xlogx_or_power: bool
    mc_fourth_branch_second_immig: bool
    mc_second_both: bool
    values: dict


def validate(params: CbiParams) -> list[str]:
    """Return the list of admissibility violations (empty when admissible)."""
    out: list[str] = []
    d = params.d
    if d < 1:
        return ["d must be at least 1"]
    if params.beta.shape != (d,):
        out.append(f"beta has shape {params.beta.shape}, expected ({d},)")
    if params.B.shape != (d, d):
        out.append(f"B has shape {params.B.shape}, expected ({d}, {d})")
    if len(params.mu) != d:
        out.append(f"mu has {len(params.mu)} entries, expected {d}")
    if np.any(params.c < 0) or not np.all(np.isfinite(params.c)):
        out.append("c has a negative or non-finite component")
    if params.beta.shape == (d,) and (np.any(params.beta < 0) or not np.all(np.isfinite(params.beta))):
        out.append("beta has a negative or non-finite component")
    if params.B.shape == (d, d):
        if not np.all(np.isfinite(params.B)):
            out.append("B has non-finite entries")
        off = params.B[~np.eye(d, dtype=bool)]
        if np.any(off < 0):
            out.append("B: off-diagonal negative")
    measures = [("nu", params.nu)] + [(f"mu[{k}]", m) for k, m in enumerate(params.mu)]
    for name, m in measures:
        if m.n_atoms and m.d != d:
            out.append(f"{name}: atoms of dimension {m.d}, expected {d}")
            continue
        out.extend(m.violations(name))
    return out


def effective(params: CbiParams) -> EffectiveParams:
    """``Btilde_ij = B_ij + int (z_i - delta_ij)^+ mu_j(dz)``, ``betatilde = beta + int r nu(dr)``."""
    d = params.d
    Bt = params.B.astype(float).copy()
    for j, m in enumerate(params.mu):
        for i in range(d):
            Bt[i, j] += positive_part_integral(m, i, int(i == j))
    bt = params.beta + mean_vector(params.nu)
    Bt.setflags(write=False)
    bt.setflags(write=False)
    return EffectiveParams(Bt, bt)


def jump_drift_matrix(params: CbiParams) -> np.ndarray:
    """Linear drift once branching jumps are added uncompensated.

    ``B - diag(int (z_l ^ 1) mu_l(dz))``; equals ``Btilde`` minus the matrix
    whose column ``l`` is the jump mean of ``mu_l``.
    """
    D = params.B.astype(float).copy()
    for l, m in enumerate(params.mu):
        if m.n_atoms:
            D[l, l] -= float(m.masses @ np.minimum(m.points[:, l], 1.0))
    return D


def check_moments(params: CbiParams, lam: complex | None = None, s: float | None = None) -> MomentFlags:
    """Evaluate the tail-moment hypotheses used by the limit theorems.

    ``lam`` and ``s`` select the exponent of the first-moment-type condition:
    ``x log x`` when ``Re lam == s`` and ``x**(s / Re lam)`` otherwise.
    """
    nu, mu = params.nu, params.mu
    vals = {
        "nu_power1": tail_moment(nu, "power1"),
        "nu_power2": tail_moment(nu, "power2"),
        "mu_power2": sum(tail_moment(m, "power2") for m in mu),
        "mu_power4": sum(tail_moment(m, "power4") for m in mu),
    }
    if lam is None or s is None or np.isclose(np.real(lam), s, rtol=0, atol=1e-10 * max(1.0, abs(s))):
        vals["mu_growth"] = sum(tail_moment(m, "xlogx") for m in mu)
    else:
        vals["mu_growth"] = sum(tail_moment(m, "ratio", q=s / np.real(lam)) for m in mu)
    fin = {k: bool(np.isfinite(v)) for k, v in vals.items()}
    return MomentFlags(
        mc_nu_first=fin["nu_power1"],
        mc_xlogx_or_power=fin["mu_growth"],
        mc_fourth_branch_second_immig=fin["mu_power4"] and fin["nu_power2"],
        mc_second_both=fin["mu_power2"] and fin["nu_power2"],
        values=vals,
    )


def _check_nonneg(lam: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ModelError(f"argument must be non-negative, got {lam.tolist()}")
    return lam


def phi(params: CbiParams, lam) -> np.ndarray:
    """Branching mechanism ``phi(lam)``; ``lam`` must be in ``R_+^d``."""
    lam = _check_nonneg(lam)
    out = params.c * lam**2 - params.B.T @ lam
    for i, m in enumerate(params.mu):
        if m.n_atoms:
            e = np.exp(-(m.points @ lam))
            out[i] += m.masses @ (e - 1.0 + lam[i] * np.minimum(m.points[:, i], 1.0))
    return out


def psi(params: CbiParams, lam) -> float:
    """Immigration mechanism ``psi(lam)``; ``lam`` must be in ``R_+^d``."""
    lam = _check_nonneg(lam)
    val = float(params.beta @ lam)
    if params.nu.n_atoms:
        val += float(params.nu.masses @ (-np.expm1(-(params.nu.points @ lam))))
    return val


def _phi_unchecked(params: CbiParams, lam: np.ndarray) -> np.ndarray:
    return phi(params, np.maximum(lam, 0.0))


def riccati_flow(
    params: CbiParams, lam, t: float, ode_step: float = 1e-3
) -> tuple[np.ndarray, np.ndarray, float]:
    """Integrate ``dv/dt = -phi(v)``, ``v(0) = lam`` by RK4 on ``[0, t]``.

    Returns the time grid, ``v`` on the grid and ``int_0^t psi(v(s)) ds``
    (composite Simpson on the same grid; trapezoid on a final odd panel).
    """
    lam = _check_nonneg(lam)
    if t < 0 or ode_step <= 0:
        raise ModelError("t must be >= 0 and ode_step > 0")
    n = max(1, int(np.ceil(t / ode_step - 1e-9)))
    h = t / n if t > 0 else 0.0
    v = np.empty((n + 1, params.d))
    v[0] = lam
    tol = 1e-9 * max(1.0, float(lam.max(initial=0.0)))
    clamped = 0

    def f(x):
        return -_phi_unchecked(params, x)

    for k in range(n):
        x = v[k]
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        nxt = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(nxt)):
            raise NumericalError("Riccati flow became non-finite; reduce ode_step")
        if np.any(nxt < -tol):
            raise NumericalError(
                f"Riccati flow left R_+^d (min {nxt.min():.3e}); reduce ode_step"
            )
        if np.any(nxt < 0):
            clamped += 1
            nxt = np.maximum(nxt, 0.0)
        v[k + 1] = nxt
    if clamped:
        logger.warning("Riccati flow clamped at 0 on %d steps", clamped)
    grid = np.linspace(0.0, t, n + 1)
    ps = np.array([psi(params, x) for x in v])
    return grid, v, _simpson(ps, h)


def _simpson(y: np.ndarray, h: float) -> float:
    n = len(y) - 1
    if n == 0:
        return 0.0
    m = n - (n % 2)
    total = 0.0
    if m:
        total = h / 3.0 * (y[0] + 4 * y[1:m:2].sum() + 2 * y[2:m - 1:2].sum() + y[m])
    if n % 2:
        total += 0.5 * h * (y[-2] + y[-1])
    return float(total)


def laplace(params: CbiParams, x0, lam, t: float, ode_step: float = 1e-3) -> float:
    """``E exp(-<lam, X_t>)`` for ``X_0 ~ x0`` (vector or :class:`InitialLaw`)."""
    law = InitialLaw.coerce(x0)
    _, v, ipsi = riccati_flow(params, lam, t, ode_step)
    vals = np.exp(-(law.points @ v[-1]) - ipsi)
    return float(np.clip(law.probs @ vals, np.finfo(float).tiny, 1.0))


def is_trivial(params: CbiParams, x0_is_zero_as: bool) -> bool:
    """Trivial process: ``X_0 = 0`` a.s., ``beta = 0`` and ``nu = 0``."""
    return bool(x0_is_zero_as and not np.any(params.beta) and params.nu.n_atoms == 0)
