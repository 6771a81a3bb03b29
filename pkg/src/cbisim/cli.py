"""Command-line front end: ``cbisim <command> config.json [flags]``.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import jsonschema
import numpy as np
from scipy import stats

from . import analysis as an
from . import moments as mo
from .measures import DiscreteMeasure
from .model import (
    CbiParams,
    InitialLaw,
    ModelError,
    NumericalError,
    check_moments,
    effective,
    is_trivial,
    laplace,
    validate,
)
from .simulate import SimConfig, default_dt, perpetuity_sample, simulate_decomposition_pair, simulate_ensemble
from .spectral import EigenPair, Regime, eigenvalues, left_eigenpair, regime, spectral_summary

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("validate", "spectral", "moments", "laplace", "simulate", "verify", "perpetuity", "decompose")
THEOREMS = ("mean", "3.1i", "3.1ii", "3.1iii", "3.3", "3.5i", "3.5ii", "3.5iii", "3.6", "B.1", "E")

_num = {"type": "number"}
_vec = {"type": "array", "items": _num}
_atoms = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["point", "mass"],
        "properties": {"point": _vec, "mass": _num},
    },
}
_complex = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}]}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "required": ["d", "c", "beta", "B"],
            "properties": {
                "d": {"type": "integer", "minimum": 1},
                "c": _vec,
                "beta": _vec,
                "B": {"type": "array", "items": _vec},
                "nu": _atoms,
                "mu": {"type": "array", "items": _atoms},
                "x0": {
                    "oneOf": [
                        _vec,
                        {
                            "type": "object",
                            "required": ["points", "probs"],
                            "properties": {"points": {"type": "array", "items": _vec}, "probs": _vec},
                        },
                    ]
                },
            },
        },
        "eigenvalue": {
            "type": "object",
            "properties": {"value": _complex, "index": {"type": "integer"}, "vector": {"type": "array"}},
        },
        "moments": {"type": "object", "properties": {"t": _vec}},
        "laplace": {
            "type": "object",
            "required": ["lambda", "t"],
            "properties": {"lambda": _vec, "t": _num, "ode_step": _num},
        },
        "simulate": {
            "type": "object",
            "properties": {
                "T": _num,
                "dt": _num,
                "n_paths": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "record": {"oneOf": [{"enum": ["terminal", "full"]}, {"type": "integer", "minimum": 1}]},
            },
        },
        "verify": {
            "type": "object",
            "properties": {
                "theorems": {"type": "array", "items": {"enum": list(THEOREMS)}},
                "alpha": _num,
                "threshold": _num,
                "checkpoints": _vec,
            },
        },
        "perpetuity": {
            "type": "object",
            "required": ["A", "C"],
            "properties": {
                "A": {"oneOf": [_num, {"type": "array", "items": _vec}]},
                "C": {
                    "type": "object",
                    "required": ["points", "probs"],
                    "properties": {"points": {"type": "array"}, "probs": _vec},
                },
                "n_samples": {"type": "integer", "minimum": 1},
                "n_terms": {"type": "integer", "minimum": 1},
            },
        },
        "decompose": {"type": "object", "required": ["t", "T"], "properties": {"t": _num, "T": _num}},
    },
}


class ConfigError(Exception):
    pass


def load_config(path: str | os.PathLike) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = ["/".join(str(p) for p in e.absolute_path) + ": " + e.message for e in errors]
        raise ConfigError("; ".join(msgs))
    return cfg


def _params(cfg: dict) -> tuple[CbiParams, InitialLaw]:
    m = cfg["model"]
    try:
        params = CbiParams.from_json(m)
        x0 = InitialLaw.from_json(m.get("x0", [0.0] * int(m["d"])))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return params, x0


def _cplx(z) -> complex:
    return complex(z[0], z[1]) if isinstance(z, list) else complex(z)


def _pair(cfg: dict, Bt: np.ndarray) -> EigenPair:
    sel = cfg.get("eigenvalue")
    if sel is None:
        raise ConfigError("eigenvalue: selector required for this command")
    if "index" in sel:
        eigs = eigenvalues(Bt)
        if not -len(eigs) <= sel["index"] < len(eigs):
            raise ConfigError(f"eigenvalue/index: {sel['index']} out of range")
        pair = left_eigenpair(Bt, eigs[sel["index"]])
    elif "value" in sel:
        try:
            pair = left_eigenpair(Bt, _cplx(sel["value"]))
        except ModelError as exc:
            raise ConfigError(f"eigenvalue/value: {exc}") from exc
    else:
        raise ConfigError("eigenvalue: give 'value' or 'index'")
    if "vector" in sel:
        v = np.array([_cplx(z) for z in sel["vector"]])
        resid = np.linalg.norm(v @ Bt - pair.lam * v)
        if resid > 1e-9 * max(1.0, np.linalg.norm(v)) * max(1.0, np.linalg.norm(Bt)):
            raise ConfigError("eigenvalue/vector: not a left eigenvector")
        pair = EigenPair(pair.lam, v)
    return pair


def _sim_config(cfg: dict, args, s: float) -> SimConfig:
    sim = dict(cfg.get("simulate", {}))
    T = args.t if args.t is not None else sim.get("T", 1.0)
    dt = args.dt if args.dt is not None else sim.get("dt", default_dt(s))
    n = args.paths if args.paths is not None else sim.get("n_paths", 1000)
    seed = args.seed if args.seed is not None else sim.get("seed", 0)
    try:
        return SimConfig(float(T), float(min(dt, T)), int(n), int(seed), sim.get("record", "terminal"), args.threads)
    except ModelError as exc:
        raise ConfigError(f"simulate: {exc}") from exc


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(report: dict, args, csv_text: str | None = None) -> None:
    text = json.dumps(an._jsonable(report), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        _write_atomic(out, text)
        if csv_text is not None:
            _write_atomic(out.with_suffix(".csv"), csv_text)
    if args.format == "csv" and csv_text is not None:
        sys.stdout.write(csv_text)
    else:
        sys.stdout.write(text)


def _seed(cfg: dict, args) -> int:
    return int(args.seed if args.seed is not None else cfg.get("simulate", {}).get("seed", 0))


def _base_report(command: str, params: CbiParams, seed: int | None = None) -> dict:
    return {"command": command, "params_hash": params.digest(), "seed": seed}


def cmd_validate(cfg, args) -> int:
    params, x0 = _params(cfg)
    viol = validate(params)
    rep = _base_report("validate", params, _seed(cfg, args))
    rep["violations"] = viol
    rep["valid"] = not viol
    if not viol:
        flags = check_moments(params)
        rep["moment_conditions"] = {
            "nu_first": flags.mc_nu_first,
            "xlogx": flags.mc_xlogx_or_power,
            "fourth_branch_second_immigration": flags.mc_fourth_branch_second_immig,
            "second_both": flags.mc_second_both,
        }
        rep["trivial"] = is_trivial(params, x0.is_zero)
    _emit(rep, args)
    return EXIT_OK if not viol else EXIT_CONFIG


def _checked(cfg):
    params, x0 = _params(cfg)
    viol = validate(params)
    if viol:
        raise ConfigError("; ".join(viol))
    return params, x0, effective(params)


def cmd_spectral(cfg, args) -> int:
    params, _, eff = _checked(cfg)
    spec = spectral_summary(eff.Btilde)
    rep = _base_report("spectral", params, _seed(cfg, args))
    rep.update(spec.to_json())
    rep["Btilde"] = eff.Btilde
    rep["betatilde"] = eff.betatilde
    rep["provenance"] = "analytic: dense eigensolver on Btilde"
    if spec.s > 0:
        rep["regimes"] = [
            {"eigenvalue": e, "regime": regime(z, spec.s).value} for e, z in zip(rep["eigenvalues"], spec.eigenvalues)
        ]
    _emit(rep, args)
    return EXIT_OK


def cmd_moments(cfg, args) -> int:
    params, x0, eff = _checked(cfg)
    spec = spectral_summary(eff.Btilde)
    ts = cfg.get("moments", {}).get("t", [1.0]) if args.t is None else [args.t]
    rep = _base_report("moments", params, _seed(cfg, args))
    rep["mean"] = [{"t": t, "value": mo.mean_at(eff, x0.mean, t), "provenance": "analytic: augmented expm"} for t in ts]
    rows = []
    if "eigenvalue" in cfg:
        pair = _pair(cfg, eff.Btilde)
        sec = []
        for t in ts:
            r = mo.second_moment(params, eff, spec if spec.irreducible else None, pair, x0, t)
            sec.append(r.to_json() | {"provenance": "analytic: closed form + adaptive Simpson"})
            rows.append([t, r.value, r.h_of_t, r.M2])
        rep["second_moment"] = sec
        if spec.s > 0 and spec.irreducible:
            rep["w_mean"] = mo.w_mean(spec, eff, x0.mean)
            if regime(pair.lam, spec.s) is not Regime.I:
                srep = mo.sigma_v(params, spec, pair)
                rep["sigma"] = srep.to_json()
                rep["variance_limit"] = rep["w_mean"] * srep.Sigma
    _emit(rep, args, _csv(rows, ["t", "value", "h", "M2"]) if rows else None)
    return EXIT_OK


def cmd_laplace(cfg, args) -> int:
    params, x0, _ = _checked(cfg)
    lc = cfg.get("laplace")
    if lc is None:
        raise ConfigError("laplace: section required")
    t = args.t if args.t is not None else lc["t"]
    step = lc.get("ode_step", 1e-3)
    try:
        val = laplace(params, x0, lc["lambda"], t, step)
    except ModelError as exc:
        raise ConfigError(f"laplace: {exc}") from exc
    rep = _base_report("laplace", params, _seed(cfg, args))
    rep.update({"t": t, "lambda": lc["lambda"], "value": val, "provenance": f"analytic: RK4 Riccati, step {step}"})
    _emit(rep, args)
    return EXIT_OK


def cmd_simulate(cfg, args) -> int:
    params, x0, eff = _checked(cfg)
    spec = spectral_summary(eff.Btilde)
    sc = _sim_config(cfg, args, spec.s)
    ens = simulate_ensemble(params, eff, x0, sc)
    rep = _base_report("simulate", params, sc.seed)
    rep["config"] = {"T": sc.T, "dt": sc.step, "n_paths": sc.n_paths, "seed": sc.seed}
    X = ens.terminal
    mean = X.mean(axis=0)
    se = X.std(axis=0, ddof=1) / np.sqrt(X.shape[0]) if X.shape[0] > 1 else np.zeros(params.d)
    rep["terminal_mean"] = {"value": mean, "se": se, "provenance": f"MC N={sc.n_paths} dt={sc.step} seed={sc.seed}"}
    rep["analytic_mean"] = {"value": mo.mean_at(eff, x0.mean, sc.T), "provenance": "analytic: augmented expm"}
    w = an.w_samples(ens, spec) if (spec.s > 0 and spec.irreducible) else np.full(X.shape[0], np.nan)
    header = ["path_index"] + [f"x{i + 1}" for i in range(params.d)] + ["w"]
    rows = [[i, *X[i].tolist(), float(w[i])] for i in range(X.shape[0])]
    _emit(rep, args, _csv(rows, header))
    return EXIT_OK


def _verify_results(cfg, args, params, x0, eff, spec) -> list[an.TestReport]:
    vc = cfg.get("verify", {})
    theorems = args.theorems or vc.get("theorems", [])
    if not theorems:
        raise ConfigError("verify: no theorems requested")
    bad = [t for t in theorems if t not in THEOREMS]
    if bad:
        raise ConfigError(f"verify/theorems: unknown {bad}")
    alpha = vc.get("alpha", 0.01)
    thr = vc.get("threshold", 1.0)
    sc = _sim_config(cfg, args, spec.s)
    need_grid = any(t in ("3.1i", "B.1", "E") for t in theorems)
    if need_grid and sc.record == "terminal":
        sc = sc.with_(record="full")
    ens = simulate_ensemble(params, eff, x0, sc, log_jumps="E" in theorems)
    pair = _pair(cfg, eff.Btilde) if any(t not in ("mean", "3.6") for t in theorems) else None
    out = []
    for th in theorems:
        if th == "mean":
            X = ens.terminal
            m = mo.mean_at(eff, x0.mean, sc.T)
            se = X.std(axis=0, ddof=1) / np.sqrt(X.shape[0])
            err = np.abs(X.mean(axis=0) - m)
            out.append(an.TestReport("mean", bool(np.all(err <= 3 * se)), X.shape[0], {"mc_mean": X.mean(axis=0), "analytic": m, "se": se}, tolerances={"se_multiple": 3}))
        elif th == "3.6":
            rf = an.relative_frequencies(ens, spec.utilde, threshold=thr, spec=spec)
            dev = rf.get("max_deviation")
            out.append(an.TestReport("3.6", None if dev is None else bool(dev <= 0.02), rf["n_survivors"], {"mean": rf.get("mean"), "utilde": spec.utilde, "max_deviation": dev}, tolerances={"abs": 0.02}))
        elif th in ("3.5iii", "3.1iii"):
            srep = mo.sigma_v(params, spec, pair)
            ss = an.projection_statistic(ens, pair, spec, None, "Thm35iii", thr)
            rep = an.gaussian_test(ss, srep.Sigma, alpha)
            if th == "3.1iii":
                raw = an.projection_statistic(ens, pair, spec, None, "Thm31iii", thr).rows
                emp = raw.T @ raw / raw.shape[0]
                target = mo.w_mean(spec, eff, x0.mean) * srep.Sigma
                rep = an.TestReport("3.1iii", rep.passed, rep.n, {"second_moment": emp, "target": target, "whitened": rep.statistics}, rep.p_values, rep.tolerances, rep.notes)
            else:
                rep.name = "3.5iii"
            out.append(rep)
        elif th in ("3.5ii", "3.1ii"):
            srep = mo.sigma_v(params, spec, pair)
            tag = "Thm35ii" if th == "3.5ii" else "Thm31ii"
            ss = an.projection_statistic(ens, pair, spec, None, tag, thr)
            Sig = srep.Sigma / spec.s if th == "3.5ii" else srep.Sigma
            rep = an.gaussian_test(ss, Sig, alpha)
            rep.name, rep.passed = th, None
            rep.notes.append("regime II: reported-only diagnostic")
            out.append(rep)
        elif th in ("3.1i", "3.5i"):
            out.append(an.convergence_diagnostic(ens, pair, spec, vc.get("checkpoints"), threshold=thr))
            out[-1].name = th
        elif th == "3.3":
            w = pair.project(ens.terminal) * np.exp(-pair.lam * sc.T)
            rep = an.atom_scan(_reim(w) if np.iscomplexobj(w) and np.any(w.imag) else np.real(w))
            rep.name = "3.3"
            out.append(rep)
        elif th == "B.1":
            traj = mo.deterministic_projection(params, eff, pair, x0.deterministic, x0.mean)
            if traj is None:
                out.append(an.TestReport("B.1", None, ens.n_paths, notes=["projection is not deterministic for this model"]))
            else:
                expected = np.array([traj(t) for t in ens.times])
                err = float(np.max(np.abs(ens.states @ pair.v - expected[None, :])))
                out.append(an.TestReport("B.1", err <= 1e-12 * max(1.0, np.abs(expected).max()), ens.n_paths, {"max_abs_error": err}, tolerances={"abs": 1e-12}))
        elif th == "E":
            srep = mo.sigma_v(params, spec, pair)
            out.append(an.qv_limit_check(ens, pair, spec, params, srep.Sigma))
            out[-1].name = "E"
    return out


def _reim(z):
    return np.column_stack([z.real, z.imag])


def cmd_verify(cfg, args) -> int:
    params, x0, eff = _checked(cfg)
    spec = spectral_summary(eff.Btilde)
    if spec.s <= 0 or not spec.irreducible:
        raise ConfigError("verify: model must be supercritical and irreducible")
    results = _verify_results(cfg, args, params, x0, eff, spec)
    sc = _sim_config(cfg, args, spec.s)
    rep = _base_report("verify", params, sc.seed)
    rep["provenance"] = f"MC N={sc.n_paths} dt={sc.step} T={sc.T} seed={sc.seed}"
    rep["results"] = [r.to_json() for r in results]
    _emit(rep, args)
    return EXIT_FAIL if any(r.passed is False for r in results) else EXIT_OK


def _c_sampler(spec: dict):
    pts = np.array(spec["points"], dtype=float)
    probs = np.array(spec["probs"], dtype=float)
    if pts.shape[0] != probs.shape[0] or not np.isclose(probs.sum(), 1):
        raise ConfigError("perpetuity/C: points and probs mismatch")

    def sampler(rng, n):
        return pts[rng.choice(len(probs), size=n, p=probs)]

    return sampler


def cmd_perpetuity(cfg, args) -> int:
    pc = cfg.get("perpetuity")
    if pc is None:
        raise ConfigError("perpetuity: section required")
    seed = _seed(cfg, args)
    n = args.paths if args.paths is not None else pc.get("n_samples", 100_000)
    A = pc["A"]
    try:
        X, swept = perpetuity_sample(A, _c_sampler(pc["C"]), pc.get("n_terms"), n, seed)
    except ModelError as exc:
        raise ConfigError(f"perpetuity: {exc}") from exc
    Xm, Sm = np.atleast_2d(X.T).T, np.atleast_2d(swept.T).T
    results = [an.ks_two_sample(Xm[:, j], Sm[:, j]) for j in range(Xm.shape[1])]
    results.append(an.atom_scan(Xm))
    digest = hashlib.sha256(json.dumps(pc, sort_keys=True).encode()).hexdigest()[:16]
    rep = {"command": "perpetuity", "params_hash": digest, "seed": seed, "n_samples": n, "mean": Xm.mean(axis=0), "var": Xm.var(axis=0)}
    rep["results"] = [r.to_json() for r in results]
    _emit(rep, args)
    return EXIT_FAIL if any(r.passed is False for r in results) else EXIT_OK


def cmd_decompose(cfg, args) -> int:
    params, x0, eff = _checked(cfg)
    spec = spectral_summary(eff.Btilde)
    dc = cfg.get("decompose")
    if dc is None:
        raise ConfigError("decompose: section required")
    sc = _sim_config(cfg, args, spec.s)
    a, b = simulate_decomposition_pair(params, eff, x0, dc["t"], dc["T"], sc)
    weights = spec.u if spec.u is not None else np.ones(params.d)
    res = an.ks_two_sample(a @ weights, b @ weights)
    rep = _base_report("decompose", params, sc.seed)
    rep.update({"n_pairs": sc.n_paths, "t": dc["t"], "T": dc["T"], "result": res.to_json()})
    _emit(rep, args)
    return EXIT_OK if res.passed else EXIT_FAIL


HANDLERS = {
    "validate": cmd_validate,
    "spectral": cmd_spectral,
    "moments": cmd_moments,
    "laplace": cmd_laplace,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "perpetuity": cmd_perpetuity,
    "decompose": cmd_decompose,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbisim", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    p.add_argument("--theorems", type=lambda s: s.split(","), help="comma-separated list for verify")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    try:
        cfg = load_config(args.config)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ModelError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
