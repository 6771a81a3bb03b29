"""Scaled statistics of simulated ensembles and the statistical checks run on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from .model import ModelError
from .moments import SigmaClass, classify_matrix
from .simulate import Ensemble
from .spectral import EigenPair, Regime, SpectralSummary, regime


class Scaling(str, Enum):
    THM31_II = "Thm31ii"
    THM31_III = "Thm31iii"
    THM35_I = "Thm35i"
    THM35_II = "Thm35ii"
    THM35_III = "Thm35iii"


_REQUIRED_REGIME = {
    Scaling.THM31_II: Regime.II,
    Scaling.THM31_III: Regime.III,
    Scaling.THM35_I: Regime.I,
    Scaling.THM35_II: Regime.II,
    Scaling.THM35_III: Regime.III,
}


@dataclass
class ScaledSample:
    rows: np.ndarray
    survivor_mask: np.ndarray
    scaling_tag: str

    @property
    def survivors(self) -> np.ndarray:
        return self.rows[self.survivor_mask]


@dataclass
class TestReport:
    name: str
    passed: bool | None
    n: int
    statistics: dict = field(default_factory=dict)
    p_values: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "n": self.n,
            "statistics": _jsonable(self.statistics),
            "p_values": _jsonable(self.p_values),
            "tolerances": _jsonable(self.tolerances),
            "notes": list(self.notes),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _reim(z: np.ndarray) -> np.ndarray:
    return np.column_stack([z.real, z.imag])


def _u_proj(ens_states: np.ndarray, spec: SpectralSummary) -> np.ndarray:
    if spec.u is None:
        raise ModelError("the Perron vector is undefined for a reducible model")
    return ens_states @ spec.u


def w_samples(ens: Ensemble, spec: SpectralSummary, T: float | None = None) -> np.ndarray:
    """``exp(-s T) <u, X_T>`` per path."""
    if spec.s <= 0:
        raise ModelError("w samples need a supercritical model")
    T = ens.config.T if T is None else T
    return np.exp(-spec.s * T) * _u_proj(ens.terminal, spec)


def survivor_mask(ens: Ensemble, spec: SpectralSummary, threshold: float = 1.0) -> np.ndarray:
    """Proxy for ``{w_u > 0}``: ``<u, X_T> > threshold``."""
    return _u_proj(ens.terminal, spec) > threshold


def projection_statistic(
    ens: Ensemble,
    pair: EigenPair,
    spec: SpectralSummary,
    T: float | None,
    scaling: Scaling | str,
    threshold: float = 1.0,
) -> ScaledSample:
    """Per-path scaled ``(Re, Im) <v, X_T>`` with the normalization named by ``scaling``."""
    scaling = Scaling(scaling)
    T = ens.config.T if T is None else T
    reg = regime(pair.lam, spec.s)
    if reg is not _REQUIRED_REGIME[scaling]:
        raise ModelError(f"{scaling.value} needs regime {_REQUIRED_REGIME[scaling].value}, got {reg.value}")
    X = ens.terminal
    s = spec.s
    proj = pair.project(X)
    up = _u_proj(X, spec)
    mask = up > threshold
    nonzero = np.any(X != 0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        if scaling is Scaling.THM31_II:
            rows = _reim(proj) * (np.exp(-s * T / 2) / np.sqrt(T))
        elif scaling is Scaling.THM31_III:
            rows = _reim(proj) * np.exp(-s * T / 2)
        elif scaling is Scaling.THM35_I:
            lam = complex(pair.lam)
            rot = np.exp(-1j * lam.imag * T)
            scale = np.where(nonzero, up ** (-lam.real / s), 0.0)
            rows = _reim(proj * rot) * scale[:, None]
        elif scaling is Scaling.THM35_II:
            ok = up > 1
            scale = np.where(ok, 1.0 / np.sqrt(up * np.log(np.where(ok, up, 2.0))), 0.0)
            rows = _reim(proj) * scale[:, None]
        else:
            scale = np.where(nonzero, 1.0 / np.sqrt(np.where(nonzero, up, 1.0)), 0.0)
            rows = _reim(proj) * scale[:, None]
    rows = np.where(np.isfinite(rows), rows, 0.0)
    return ScaledSample(rows, mask, scaling.value)


def relative_frequencies(ens: Ensemble, utilde: np.ndarray | None = None, threshold: float = 0.0, spec: SpectralSummary | None = None) -> dict:
    """Per-path type proportions ``X_i / sum_k X_k`` on surviving paths.

    Survival means ``X_T != 0``, or ``<u, X_T> > threshold`` when ``spec`` is given.
    """
    X = ens.terminal
    tot = X.sum(axis=1)
    alive = tot > 0
    if spec is not None:
        alive &= _u_proj(X, spec) > threshold
    rows = X[alive] / tot[alive, None]
    out = {"rows": rows, "survivors": alive, "n_survivors": int(alive.sum())}
    if rows.shape[0]:
        out["mean"] = rows.mean(axis=0)
        if utilde is not None:
            out["max_deviation"] = float(np.max(np.abs(out["mean"] - utilde)))
    return out


def _psd_check(Sigma: np.ndarray) -> np.ndarray:
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape != (2, 2) or not np.allclose(Sigma, Sigma.T, atol=1e-12):
        raise ModelError("Sigma must be a symmetric 2x2 matrix")
    ev = np.linalg.eigvalsh(Sigma)
    if ev.min() < -1e-12:
        raise ModelError(f"Sigma is not positive semidefinite (eigenvalues {ev})")
    return Sigma


def gaussian_test(
    sample: ScaledSample | np.ndarray,
    Sigma,
    alpha: float = 0.01,
    collapse_rtol: float = 1e-3,
    collapse_atol: float = 1e-3,
    min_n: int = 20,
) -> TestReport:
    """Test survivor rows against ``N_2(0, Sigma)``.

    Invertible ``Sigma``: whiten and run a one-sample KS test per coordinate
    (the empirical covariance of the whitened rows is reported against the
    ``4 / sqrt(N)`` yardstick). Singular ``Sigma``: KS along the range
    direction, variance collapse along the null direction. Zero ``Sigma``:
    collapse of both coordinates.
    """
    Sigma = _psd_check(Sigma)
    rows = sample.survivors if isinstance(sample, ScaledSample) else np.asarray(sample, dtype=float)
    n = rows.shape[0]
    cls = classify_matrix(Sigma)
    rep = TestReport("gaussian", None, n, tolerances={"alpha": alpha})
    rep.statistics["sigma_class"] = cls.value
    if n < min_n:
        rep.notes.append("insufficient data")
        return rep
    if cls is SigmaClass.INVERTIBLE:
        ev, U = np.linalg.eigh(Sigma)
        W = U @ np.diag(ev**-0.5) @ U.T
        Z = rows @ W.T
        pvals = [stats.kstest(Z[:, j], "norm").pvalue for j in range(2)]
        cov = np.cov(Z, rowvar=False)
        dev = float(np.max(np.abs(cov - np.eye(2))))
        rep.p_values = {"ks_re": pvals[0], "ks_im": pvals[1]}
        rep.statistics.update({"whitened_cov": cov, "cov_max_dev": dev, "mean": Z.mean(axis=0)})
        rep.tolerances["cov_heuristic"] = 4 / np.sqrt(n)
        rep.statistics["cov_within_heuristic"] = dev <= 4 / np.sqrt(n)
        rep.passed = bool(min(pvals) > alpha)
    elif cls is SigmaClass.SINGULAR_NONZERO:
        ev, U = np.linalg.eigh(Sigma)
        rng_dir, null_dir, sig = U[:, 1], U[:, 0], ev[1]
        y = rows @ rng_dir / np.sqrt(sig)
        z = rows @ null_dir
        p = stats.kstest(y, "norm").pvalue
        var_null = float(np.mean(z**2))
        tol = collapse_rtol * sig
        rep.p_values = {"ks_range": p}
        rep.statistics.update({"null_second_moment": var_null, "range_var": float(np.var(y))})
        rep.tolerances["null_variance"] = tol
        rep.passed = bool(p > alpha and var_null <= tol)
    else:
        m2 = np.mean(rows**2, axis=0)
        rep.statistics["second_moments"] = m2
        rep.tolerances["collapse"] = collapse_atol
        rep.passed = bool(np.all(m2 <= collapse_atol))
    return rep


def atom_scan(samples, dup_factor: float = 3.0, bin_factor: float = 10.0, min_n: int = 1000) -> TestReport:
    """Heuristic atomlessness check: exact duplicates and over-full bins.

    Bins have width ``range / sqrt(N)`` on each coordinate; a bin holding more
    than ``bin_factor`` times the uniform share, or any value repeated more
    than ``dup_factor`` times, flags an atom.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    rep = TestReport("atom_scan", None, n, tolerances={"dup_factor": dup_factor, "bin_factor": bin_factor})
    if n < min_n:
        rep.notes.append("insufficient data")
        return rep
    _, counts = np.unique(x, axis=0, return_counts=True)
    dup = counts.max() / n
    n_bins = max(1, int(np.sqrt(n)))
    max_bin = 0.0
    for j in range(x.shape[1]):
        col = x[:, j]
        lo, hi = col.min(), col.max()
        if hi == lo:
            max_bin = 1.0
            continue
        hist, _ = np.histogram(col, bins=n_bins, range=(lo, hi))
        max_bin = max(max_bin, hist.max() / n)
    rep.statistics = {"max_duplicate_frequency": dup, "max_bin_mass": max_bin, "n_bins": n_bins}
    rep.tolerances.update({"duplicate": dup_factor / n, "bin": bin_factor / n_bins})
    rep.passed = bool(dup <= dup_factor / n and max_bin <= bin_factor / n_bins)
    return rep


def _checkpoint_states(ens: Ensemble, checkpoints) -> tuple[np.ndarray, np.ndarray]:
    if ens.states is None:
        raise ModelError("checkpoint diagnostics need recorded grid states")
    times = ens.times
    if checkpoints is None:
        return times, ens.states
    idx = [int(np.argmin(np.abs(times - c))) for c in checkpoints]
    return times[idx], ens.states[:, idx]


def convergence_diagnostic(
    ens: Ensemble,
    pair: EigenPair,
    spec: SpectralSummary,
    checkpoints=None,
    transient: float = 0.0,
    max_ratio: float = 0.7,
    threshold: float = 1.0,
) -> TestReport:
    """Cauchy increments of ``exp(-lam t) <v, X_t>`` across checkpoints.

    Convergence is only guaranteed in regime I; other eigenvalues are
    accepted (for instance deterministic projections) with a note.

    Passes when the mean absolute increment shrinks by at least ``max_ratio``
    per unit time after ``transient`` (or is identically zero). Also reports
    the rotation-ratio statistic against its value at the last checkpoint on
    surviving paths.
    """
    times, states = _checkpoint_states(ens, checkpoints)
    lam = complex(pair.lam)
    proj = states @ pair.v  # (n, K)
    Y = proj * np.exp(-lam * times)[None, :]
    inc = np.abs(np.diff(Y, axis=1))
    mean_inc = inc.mean(axis=0)
    rep = TestReport("convergence", None, ens.n_paths, tolerances={"max_ratio": max_ratio, "transient": transient})
    if regime(pair.lam, spec.s) is not Regime.I:
        rep.notes.append("eigenvalue outside regime I: a.s. convergence is not guaranteed")
    rep.statistics["times"] = times
    rep.statistics["mean_increment"] = mean_inc
    scale = max(1.0, float(np.abs(Y).mean()))
    if np.all(mean_inc <= 1e-12 * scale):
        rep.statistics["decay_per_unit"] = []
        rep.passed = True
    else:
        ratios = []
        for k in range(len(mean_inc) - 1):
            if times[k] < transient or mean_inc[k] == 0:
                continue
            dt = times[k + 1] - times[k]
            ratios.append(float((mean_inc[k + 1] / mean_inc[k]) ** (1.0 / dt)))
        rep.statistics["decay_per_unit"] = ratios
        rep.passed = bool(ratios) and max(ratios) <= max_ratio
        if not ratios:
            rep.notes.append("no increments after the transient")
    up = states @ spec.u
    alive = up[:, -1] > threshold
    if alive.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            R = proj[alive] * np.exp(-1j * lam.imag * times)[None, :] * up[alive] ** (-lam.real / spec.s)
        R = np.where(np.isfinite(R), R, 0)
        rep.statistics["rotation_ratio_gap"] = np.abs(R - R[:, -1:]).mean(axis=0)
    return rep


def _F(w: np.ndarray, vz: complex, s: float, lam: complex) -> np.ndarray:
    """Outer products of ``(Re, Im)(exp(-(s - 2 lam) w / 2) <v, z>)``; shape (..., 2, 2)."""
    a = np.exp(-(s - 2 * lam) * np.asarray(w) / 2) * vz
    r = np.stack([a.real, a.imag], axis=-1)
    return r[..., :, None] * r[..., None, :]


def scaled_quadratic_variation(ens: Ensemble, pair: EigenPair, spec: SpectralSummary, params) -> np.ndarray:
    """Per-path normalized quadratic variation of the projection martingale at ``T``.

    Diffusion part by left Riemann sums on the recorded grid, jump part as
    the sum over logged jumps. Returns an ``(n_paths, 2, 2)`` array.
    """
    if ens.states is None or ens.jump_logs is None:
        raise ModelError("quadratic variation needs full-grid states and jump logs")
    s = spec.s
    lam = complex(pair.lam)
    v = np.asarray(pair.v, dtype=complex)
    times = ens.times
    T = times[-1]
    dts = np.diff(times)
    tl = times[:-1]
    n = ens.n_paths
    out = np.zeros((n, 2, 2))
    for l in range(params.d):
        if params.c[l] == 0:
            continue
        F = _F(T - tl, v[l], s, lam)  # (K, 2, 2)
        wts = np.exp(-s * tl) * dts
        out += 2 * params.c[l] * np.einsum("pk,kij->pij", ens.states[:, :-1, l] * wts, F)
    for p, log in enumerate(ens.jump_logs):
        for u, _, z in log:
            out[p] += _F(T - u, complex(z @ v), s, lam) * np.exp(-s * u)
    return out


def qv_limit_check(
    ens: Ensemble,
    pair: EigenPair,
    spec: SpectralSummary,
    params,
    Sigma,
    rtol: float = 0.15,
    atol: float = 0.0,
) -> TestReport:
    """Compare the ensemble mean of the normalized quadratic variation with ``mean(w) * Sigma``."""
    if regime(pair.lam, spec.s) is not Regime.III:
        raise ModelError("the quadratic-variation check applies to regime III")
    qv = scaled_quadratic_variation(ens, pair, spec, params)
    mean_qv = qv.mean(axis=0)
    wbar = float(w_samples(ens, spec).mean())
    target = wbar * np.asarray(Sigma, dtype=float)
    err = float(np.max(np.abs(mean_qv - target)))
    bound = rtol * float(np.max(np.abs(target))) + atol
    rep = TestReport("qv_limit", bool(err <= bound), ens.n_paths, tolerances={"rtol": rtol, "atol": atol})
    rep.statistics = {"mean_scaled_qv": mean_qv, "target": target, "w_mean_empirical": wbar, "max_abs_error": err}
    return rep


def ks_two_sample(a, b, alpha: float = 0.01) -> TestReport:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    res = stats.ks_2samp(a, b)
    return TestReport(
        "ks_2samp",
        bool(res.pvalue > alpha),
        min(len(a), len(b)),
        statistics={"D": float(res.statistic)},
        p_values={"ks": float(res.pvalue)},
        tolerances={"alpha": alpha},
    )


def ks_one_sample(x, cdf, alpha: float = 0.01, args=()) -> TestReport:
    res = stats.kstest(np.asarray(x, dtype=float), cdf, args=args)
    return TestReport(
        "ks_1samp",
        bool(res.pvalue > alpha),
        len(x),
        statistics={"D": float(res.statistic)},
        p_values={"ks": float(res.pvalue)},
        tolerances={"alpha": alpha},
    )
