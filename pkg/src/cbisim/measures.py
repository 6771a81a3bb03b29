"""Finite discrete jump measures on the punctured positive orthant.

Every jump measure in a model (the immigration measure and the per-type
branching measures) is a finite list of weighted atoms, so all integrals
against it are exact finite sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# |<v, z>| <= ZERO_RTOL * |v| * |z| counts as an exact zero.
ZERO_RTOL = 1e-12


@dataclass(frozen=True)
class DiscreteMeasure:
    """A finite measure ``sum_k mass_k * delta(point_k)``.

    Parameters
    ----------
    points : (n_atoms, d) array
        Atom locations. Validation (``violations``) checks that each point is
        non-negative with at least one positive coordinate.
    masses : (n_atoms,) array
        Atom weights, strictly positive.
    """

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        ms = np.asarray(self.masses, dtype=float).reshape(-1)
        if pts.ndim == 1:
            pts = pts.reshape(len(ms), -1) if len(ms) else pts.reshape(0, 0)
        if pts.shape[0] != ms.shape[0]:
            raise ValueError(
                f"{pts.shape[0]} atom points but {ms.shape[0]} masses"
            )
        pts.setflags(write=False)
        ms.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", ms)

    @classmethod
    def empty(cls, d: int) -> "DiscreteMeasure":
        return cls(np.zeros((0, d)), np.zeros(0))

    @classmethod
    def from_atoms(
        cls, atoms: Iterable[tuple[Sequence[float], float]], d: int | None = None
    ) -> "DiscreteMeasure":
        """Build from ``[(point, mass), ...]``; ``d`` is required if empty."""
        atoms = list(atoms)
        if not atoms:
            if d is None:
                raise ValueError("dimension required for an empty measure")
            return cls.empty(d)
        pts = np.array([np.asarray(p, dtype=float) for p, _ in atoms])
        if d is not None and pts.shape[1] != d:
            raise ValueError(f"atom dimension {pts.shape[1]} != {d}")
        return cls(pts, np.array([m for _, m in atoms], dtype=float))

    @classmethod
    def from_json(cls, items: list[dict], d: int) -> "DiscreteMeasure":
        return cls.from_atoms(((it["point"], it["mass"]) for it in items), d=d)

    def to_json(self) -> list[dict]:
        return [
            {"point": [float(x) for x in p], "mass": float(m)}
            for p, m in zip(self.points, self.masses)
        ]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.masses.shape[0]

    def __len__(self) -> int:
        return self.n_atoms

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        """Atom-list concatenation (the sum of the two measures)."""
        if self.d != other.d:
            raise ValueError("dimension mismatch")
        return DiscreteMeasure(
            np.vstack([self.points, other.points]),
            np.concatenate([self.masses, other.masses]),
        )

    def violations(self, name: str = "measure") -> list[str]:
        out = []
        for k, (p, m) in enumerate(zip(self.points, self.masses)):
            if not np.all(np.isfinite(p)) or np.any(p < 0) or not np.any(p > 0):
                out.append(f"{name}: atom {k} at {p.tolist()} outside U_d")
            if not (np.isfinite(m) and m > 0):
                out.append(f"{name}: atom {k} has non-positive or infinite mass {m}")
        return out


def total_mass(m: DiscreteMeasure) -> float:
    return float(m.masses.sum())


def mean_vector(m: DiscreteMeasure) -> np.ndarray:
    """``int z m(dz)``."""
    return m.masses @ m.points if m.n_atoms else np.zeros(m.d)


def positive_part_integral(m: DiscreteMeasure, i: int, delta: int) -> float:
    """``int (z_i - delta)^+ m(dz)`` with a 0-based coordinate index ``i``."""
    if not 0 <= i < m.d:
        raise IndexError(f"coordinate {i} out of range for d={m.d}")
    if not m.n_atoms:
        return 0.0
    return float(m.masses @ np.maximum(m.points[:, i] - delta, 0.0))


def tail_moment(m: DiscreteMeasure, kind: str, q: float | None = None) -> float:
    """``int g(|z|) 1{|z| >= 1} m(dz)``.

    ``kind`` is one of ``"power1"``, ``"power2"``, ``"power4"``, ``"xlogx"``
    or ``"ratio"`` (``g(x) = x**q``, ``q >= 1`` required).
    """
    if not m.n_atoms:
        return 0.0
    r = np.linalg.norm(m.points, axis=1)
    big = r >= 1.0
    r, w = r[big], m.masses[big]
    if kind.startswith("power"):
        g = r ** int(kind[5:])
    elif kind == "xlogx":
        g = r * np.log(r)
    elif kind == "ratio":
        if q is None or q < 1:
            raise ValueError("ratio tail moment needs an exponent q >= 1")
        g = r**q
    else:
        raise ValueError(f"unknown tail moment kind {kind!r}")
    return float(w @ g)


def inner(v: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``<z, v>`` for real ``z``: ``sum_j v_j z_j`` (row-wise for 2-D ``z``).

    Real atoms paired with a left eigenvector give the linear functional
    ``x -> v^T x``.
    """
    return np.asarray(z) @ np.asarray(v)


def projection_quadratics(
    m: DiscreteMeasure, v: Sequence[complex]
) -> tuple[float, complex, complex, float]:
    """Exact projection integrals of ``m`` along ``v``.

    Returns
    -------
    I2 : float
        ``int |<v,z>|^2 m(dz)``
    J2 : complex
        ``int <v,z>^2 m(dz)``
    J1 : complex
        ``int <v,z> m(dz)``
    support_hits : float
        ``m{z : <v,z> != 0}`` with the relative zero test ``ZERO_RTOL``.
    """
    v = np.asarray(v, dtype=complex)
    if v.shape != (m.d,):
        raise ValueError(f"vector of shape {v.shape} for a measure on R^{m.d}")
    if not m.n_atoms:
        return 0.0, 0j, 0j, 0.0
    p = inner(v, m.points)
    w = m.masses
    scale = ZERO_RTOL * np.linalg.norm(v) * np.linalg.norm(m.points, axis=1)
    nonzero = np.abs(p) > scale
    p = np.where(nonzero, p, 0.0)
    return (
        float(w @ np.abs(p) ** 2),
        complex(w @ p**2),
        complex(w @ p),
        float(w[nonzero].sum()),
    )
