"""Path simulation of the CBI stochastic differential equation.

One step of length ``h`` from ``X``:

1. linear drift integrated exactly: ``X <- e^{hD} X + int_0^h e^{uD} beta du``
   with ``D = B - diag(int (z_l ^ 1) mu_l(dz))`` (the jump compensators of the
   branching integrals folded into the drift);
2. diffusion ``sqrt(2 c_l max(X_l, 0) h) * N(0, 1)`` per type;
3. branching jumps: for every atom ``(z, m)`` of ``mu_l`` a
   ``Poisson(max(X_l, 0) m h)`` number of copies of ``z``;
4. immigration jumps: ``Poisson(m h)`` copies of every atom of ``nu``;
5. clamp at zero.

All rates and the diffusion coefficient are frozen at the left endpoint.

Paths are simulated in fixed blocks of ``BLOCK`` paths. Block ``b`` draws from
its own Philox stream keyed by ``(seed, role, b)``, so every path is a pure
function of ``(seed, path_index)`` and the output does not depend on the
thread count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as la

from .measures import mean_vector
from .model import (
    CbiParams,
    EffectiveParams,
    InitialLaw,
    ModelError,
    NumericalError,
    effective,
    jump_drift_matrix,
)

logger = logging.getLogger(__name__)

BLOCK = 64

ROLE_MAIN = 0
ROLE_DECOMP_FULL = 1
ROLE_DECOMP_HEAD = 2
ROLE_DECOMP_CB = 3
ROLE_DECOMP_IMMIG = 4


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``record`` is ``"terminal"``, ``"full"`` or a positive integer stride
    (keep every ``record``-th grid point plus the terminal one).
    """

    T: float
    dt: float
    n_paths: int
    seed: int = 0
    record: str | int = "terminal"
    threads: int = 1

    def __post_init__(self) -> None:
        if not (self.T > 0 and self.dt > 0):
            raise ModelError("T and dt must be positive")
        if self.dt > self.T:
            raise ModelError("dt must not exceed T")
        if self.n_paths < 1:
            raise ModelError("n_paths must be at least 1")
        if not (0 <= self.seed < 2**64):
            raise ModelError("seed must be a 64-bit unsigned integer")
        if self.record not in ("terminal", "full") and not (isinstance(self.record, int) and self.record >= 1):
            raise ModelError(f"bad record mode {self.record!r}")

    @property
    def n_steps(self) -> int:
        return max(1, int(np.ceil(self.T / self.dt - 1e-9)))

    @property
    def step(self) -> float:
        return self.T / self.n_steps

    def with_(self, **kw) -> "SimConfig":
        d = asdict(self)
        d.update(kw)
        return SimConfig(**d)


def default_dt(s: float) -> float:
    return min(0.01, 0.01 / max(1.0, s))


@dataclass
class Path:
    """A simulated path on its recorded grid.

    ``jump_log`` entries are ``(time, source, jump)``, with ``source`` the
    0-based branching type or ``"immigration"``.
    """

    times: np.ndarray
    states: np.ndarray
    jump_log: list | None = None


@dataclass
class Ensemble:
    terminal: np.ndarray
    config: SimConfig
    params_hash: str
    times: np.ndarray | None = None
    states: np.ndarray | None = None  # (n_paths, n_times, d)
    jump_logs: list | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.terminal.shape[0]

    def path(self, i: int) -> Path:
        if self.states is None:
            return Path(np.array([self.config.T]), self.terminal[i : i + 1])
        log = None if self.jump_logs is None else self.jump_logs[i]
        return Path(self.times, self.states[i], log)


@dataclass(frozen=True)
class _Scheme:
    d: int
    E: np.ndarray
    g: np.ndarray
    sd: np.ndarray
    br_owner: np.ndarray
    br_rate: np.ndarray
    br_points: np.ndarray
    im_rate: np.ndarray
    im_points: np.ndarray


def check_compensator_identity(params: CbiParams, eff: EffectiveParams, atol: float = 1e-12) -> float:
    """Check ``Btilde - [mean of mu_l]_l == B - diag(int (z_l ^ 1) mu_l)``; return the gap."""
    M = np.column_stack([mean_vector(m) for m in params.mu]) if params.d else np.zeros((0, 0))
    gap = float(np.max(np.abs(eff.Btilde - M - jump_drift_matrix(params)), initial=0.0))
    scale = max(1.0, float(np.max(np.abs(eff.Btilde), initial=0.0)))
    if gap > atol * scale:
        raise NumericalError(f"compensator identity violated by {gap:.3e}")
    return gap


def _scheme(params: CbiParams, h: float) -> _Scheme:
    d = params.d
    D = jump_drift_matrix(params)
    A = np.zeros((d + 1, d + 1))
    A[:d, :d] = D
    A[:d, d] = params.beta
    with np.errstate(over="ignore", invalid="ignore"):
        EA = la.expm(h * A)
    if not np.all(np.isfinite(EA)):
        raise NumericalError("drift exponential overflows; reduce dt")
    owners, rates, pts = [], [], []
    for l, m in enumerate(params.mu):
        owners.append(np.full(m.n_atoms, l))
        rates.append(m.masses * h)
        pts.append(m.points.reshape(-1, d))
    nu = params.nu
    return _Scheme(
        d=d,
        E=EA[:d, :d].T.copy(),  # row-vector convention: X @ E
        g=EA[:d, d].copy(),
        sd=np.sqrt(2.0 * params.c * h),
        br_owner=np.concatenate(owners).astype(int) if owners else np.zeros(0, int),
        br_rate=np.concatenate(rates) if rates else np.zeros(0),
        br_points=np.vstack(pts) if pts else np.zeros((0, d)),
        im_rate=nu.masses * h,
        im_points=nu.points.reshape(-1, d),
    )


def _block_rng(seed: int, role: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(role, block))
    return np.random.Generator(np.random.Philox(ss))


def _record_indices(n_steps: int, record) -> np.ndarray | None:
    if record == "terminal":
        return None
    stride = 1 if record == "full" else int(record)
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def _run_block(
    sch: _Scheme,
    x_start: np.ndarray,
    n_steps: int,
    h: float,
    rng: np.random.Generator,
    rec_idx: np.ndarray | None,
    log_jumps: bool,
):
    X = x_start.copy()
    nb, d = X.shape
    rec = None
    if rec_idx is not None:
        rec = np.empty((nb, len(rec_idx), d))
        rec[:, 0] = X
        ri = 1
    logs = [] if log_jumps else None
    nbr, nim = sch.br_rate.shape[0], sch.im_rate.shape[0]
    for k in range(n_steps):
        Xp = np.maximum(X, 0.0)
        Z = rng.standard_normal((nb, d))
        Xn = X @ sch.E + sch.g + sch.sd * np.sqrt(Xp) * Z
        if nbr:
            kb = rng.poisson(Xp[:, sch.br_owner] * sch.br_rate)
            Xn += kb @ sch.br_points
        if nim:
            ki = rng.poisson(np.broadcast_to(sch.im_rate, (nb, nim)))
            Xn += ki @ sch.im_points
        if log_jumps:
            if nbr:
                p, a = np.nonzero(kb)
                logs.append((k, p, a, kb[p, a], False))
            if nim:
                p, a = np.nonzero(ki)
                logs.append((k, p, a, ki[p, a], True))
        np.maximum(Xn, 0.0, out=Xn)
        if not np.all(np.isfinite(Xn)):
            raise NumericalError(f"non-finite state at step {k}; reduce dt")
        X = Xn
        if rec is not None and ri < len(rec_idx) and rec_idx[ri] == k + 1:
            rec[:, ri] = X
            ri += 1
    return X, rec, logs


def _expand_logs(sch: _Scheme, params: CbiParams, logs, nb: int, h: float) -> list[list]:
    out: list[list] = [[] for _ in range(nb)]
    for k, p, a, cnt, immig in logs:
        t = k * h
        for pi, ai, ci in zip(p.tolist(), a.tolist(), cnt.tolist()):
            if immig:
                src, z = "immigration", sch.im_points[ai]
            else:
                src, z = int(sch.br_owner[ai]), sch.br_points[ai]
            out[pi].extend([(t, src, z)] * ci)
    return out


def _simulate(
    params: CbiParams,
    x0,
    cfg: SimConfig,
    role: int = ROLE_MAIN,
    x_init: np.ndarray | None = None,
    log_jumps: bool = False,
    blocks: list[int] | None = None,
):
    """Run the blocks covering ``cfg.n_paths`` (or the listed ``blocks``)."""
    d = params.d
    h = cfg.step
    n_steps = cfg.n_steps
    sch = _scheme(params, h)
    rec_idx = _record_indices(n_steps, cfg.record)
    n_blocks = -(-cfg.n_paths // BLOCK)
    block_ids = list(range(n_blocks)) if blocks is None else blocks
    law = None if x_init is not None else InitialLaw.coerce(x0)
    if law is not None and law.points.shape[1] != d:
        raise ModelError(f"initial state of dimension {law.points.shape[1]}, expected {d}")

    def one(b: int):
        rng = _block_rng(cfg.seed, role, b)
        if x_init is not None:
            xs = np.zeros((BLOCK, d))
            rows = x_init[b * BLOCK : (b + 1) * BLOCK]
            xs[: len(rows)] = rows
        else:
            pick = rng.random(BLOCK)
            cat = np.searchsorted(np.cumsum(law.probs), pick, side="right")
            xs = law.points[np.minimum(cat, len(law.probs) - 1)]
        X, rec, logs = _run_block(sch, xs, n_steps, h, rng, rec_idx, log_jumps)
        jl = _expand_logs(sch, params, logs, BLOCK, h) if log_jumps else None
        return X, rec, jl

    if cfg.threads > 1 and len(block_ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(one, block_ids))
    else:
        results = [one(b) for b in block_ids]
    times = None if rec_idx is None else rec_idx * h
    return results, times


def simulate_ensemble(
    params: CbiParams,
    eff: EffectiveParams,
    x0,
    cfg: SimConfig,
    log_jumps: bool = False,
    role: int = ROLE_MAIN,
    x_init: np.ndarray | None = None,
) -> Ensemble:
    """Simulate ``cfg.n_paths`` independent paths; see the module docstring."""
    check_compensator_identity(params, eff)
    results, times = _simulate(params, x0, cfg, role=role, x_init=x_init, log_jumps=log_jumps)
    n = cfg.n_paths
    terminal = np.vstack([r[0] for r in results])[:n]
    states = None
    if times is not None:
        states = np.concatenate([r[1] for r in results], axis=0)[:n]
    logs = None
    if log_jumps:
        logs = [lg for r in results for lg in r[2]][:n]
    return Ensemble(terminal, cfg, params.digest(), times, states, logs)


def simulate_path(params: CbiParams, eff: EffectiveParams, x0, cfg: SimConfig, path_index: int, log_jumps: bool = True) -> Path:
    """Path number ``path_index`` of the ensemble defined by ``cfg.seed``."""
    check_compensator_identity(params, eff)
    if path_index < 0:
        raise ModelError("path_index must be non-negative")
    b, r = divmod(path_index, BLOCK)
    if cfg.record == "terminal":
        cfg = cfg.with_(record=cfg.n_steps)
    results, times = _simulate(params, x0, cfg.with_(n_paths=BLOCK * (b + 1)), log_jumps=log_jumps, blocks=[b])
    _, rec, logs = results[0]
    return Path(times, rec[r], logs[r] if logs else None)


def simulate_decomposition_pair(
    params: CbiParams, eff: EffectiveParams, x0, t: float, T: float, cfg: SimConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Samples of ``X_{t+T}`` and of ``X_t^(1) + X_t^(2,T)``.

    ``X^(1)`` is the CBI process started at 0, ``X^(2,T)`` the process with
    immigration removed, started from an independent copy of ``X_T``.
    Returns two ``(n_paths, d)`` arrays.
    """
    n = cfg.n_paths
    law = InitialLaw.coerce(x0)

    def run(horizon, role, prm, start=None, init=None):
        if horizon <= 0:
            if init is not None:
                return init.copy()
            if not InitialLaw.coerce(start).deterministic:
                raise ModelError("a zero horizon needs a deterministic start")
            return np.repeat(InitialLaw.coerce(start).points[:1], n, axis=0)
        c = SimConfig(horizon, min(cfg.dt, horizon), n, cfg.seed, "terminal", cfg.threads)
        return simulate_ensemble(prm, effective(prm), start, c, role=role, x_init=init).terminal

    full = run(t + T, ROLE_DECOMP_FULL, params, start=law)
    head = run(T, ROLE_DECOMP_HEAD, params, start=law)
    cb = run(t, ROLE_DECOMP_CB, params.without_immigration(), init=head)
    imm = run(t, ROLE_DECOMP_IMMIG, params, start=np.zeros(params.d))
    return full, cb + imm


def perpetuity_sample(
    A,
    c_sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_terms: int | None,
    n_samples: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Samples of ``X = sum_k A^k C_k`` and one extra sweep ``A X + C``.

    ``c_sampler(rng, n)`` returns ``n`` i.i.d. summands (shape ``(n,)`` for
    scalar ``A``, ``(n, d)`` otherwise). When ``n_terms`` is ``None`` the
    smallest count with ``|A^n| E|C| < 1e-12`` is used; an explicit count
    that misses that bound is rejected.
    """
    scalar = np.ndim(A) == 0
    Am = np.atleast_2d(np.asarray(A, dtype=float))
    d = Am.shape[0]
    rho = float(np.max(np.abs(la.eigvals(Am))))
    if rho >= 1:
        raise ModelError(f"spectral radius {rho} >= 1")
    if abs(la.det(Am)) == 0:
        raise ModelError("A must be invertible")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    pilot = np.asarray(c_sampler(rng, 4096), dtype=float).reshape(4096, d)
    enorm = float(np.mean(np.linalg.norm(pilot, axis=1)))
    Ak = np.eye(d)
    need = 0
    while la.norm(Ak, 2) * enorm >= 1e-12:
        Ak = Ak @ Am
        need += 1
        if need > 100_000:
            raise ModelError("series converges too slowly")
    if n_terms is None:
        n_terms = need
    elif n_terms < need:
        raise ModelError(f"n_terms={n_terms} too small; the tail bound needs {need}")
    X = np.zeros((n_samples, d))
    AT = Am.T
    for _ in range(n_terms):
        C = np.asarray(c_sampler(rng, n_samples), dtype=float).reshape(n_samples, d)
        X = X @ AT + C
    C = np.asarray(c_sampler(rng, n_samples), dtype=float).reshape(n_samples, d)
    swept = X @ AT + C
    if scalar:
        return X[:, 0], swept[:, 0]
    return X, swept
