"""Command pipelines: each builds what it needs from a scenario and writes its reports.

Every pipeline returns (exit_code, payload). Exit codes: 0 pass, 1 certificate
or hypothesis failure. Configuration problems raise ConfigError.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import attractor as att
from .linearized import (CertificateRefused, EnergyParams, EvolutionSystem, choose_eta,
                         rho_for_eta, theta_rho, verify_interval_decay)
from .nonlinearity import (check_dissipativeness, nemitski, linf_embedding_constant, sample_fields_by_norm,
                           verify_growth)
from .operator_core import OperatorError, check_shift_inequalities, norm_H, random_fields
from .regularity import (RegularityError, lambda_derivative_check, theorem1_check,
                         theorem2_report, uniformity_verdict, voc_reconstruct)
from .scenario import ConfigError, Scenario
from .semiflow import StatePair, Trajectory, integrate, lyapunov

log = logging.getLogger(__name__)


# -- output helpers ------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "inf" if x > 0 else "-inf" if x < 0 else "nan"
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _out(sc: Scenario) -> Path:
    out = sc.out or Path("out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _envelope(sc: Scenario, chain: dict, **body) -> dict:
    return {"scenario_hash": sc.hash, "seed": sc.seed, "constants_chain": chain, **body}


# -- shared building blocks ----------------------------------------------------

def constant_trajectory(model, f, u, eps, T, h) -> Trajectory:
    n = int(round(T / h)) + 1
    U = np.tile(u, (n, 1))
    g = nemitski(f, model, u)
    return Trajectory(np.arange(n) * h, U, np.zeros_like(U), eps, h, np.tile(g, (n, 1)),
                      meta={"kind": "equilibrium"})


def base_trajectory(sc: Scenario, model, f, eps: float | None = None) -> Trajectory:
    """Trajectory from [run], windowed after transient_T0 and re-based to start at 0."""
    rp = sc.run_params()
    eps = rp["eps"] if eps is None else eps
    h, T, T0 = rp["h"], rp["T"], rp["T0"]
    text = rp["initial"].split()
    if text and text[0] == "equilibrium":
        eqs = att.find_equilibria(model, f)
        idx = int(text[1]) if len(text) > 1 else 0
        if idx >= len(eqs):
            raise ConfigError(f"[run] only {len(eqs)} equilibria found; index {idx} unavailable")
        return constant_trajectory(model, f, eqs[idx], eps, T, h)
    kind, init = sc.initial_state(model)
    if kind == "unstable":
        try:
            tr = att.connecting_orbit(model, f, eps, T=T0 + T, h=h, amplitude=init)
        except ValueError:
            raise ConfigError("[run] initial = unstable needs an unstable direction at 0") from None
    else:
        tr = integrate(model, StatePair(init, np.zeros(model.N), eps), f, T0 + T, h)
    if tr.blown_up:
        raise CertificateRefused("base trajectory blew up", {"t_end": float(tr.times[-1])})
    if T0 > 0:
        meta = dict(tr.meta)
        tr = tr.window(T0)
        tr = Trajectory(tr.times - tr.times[0], tr.u, tr.v, tr.eps, tr.h, tr.forcing, tr.blown_up, meta)
    return tr


def write_trajectory(out: Path, model, f, traj: Trajectory, suffix: str = "") -> None:
    L = lyapunov(model, f, traj.u, traj.v, traj.eps)
    Rs = np.maximum.accumulate(traj.R_series(model))
    cols = (traj.times, norm_H(model, traj.u, 1), norm_H(model, traj.v, 0),
            norm_H(model, model.lam * traj.u, 0), norm_H(model, traj.v, 1), L, Rs)
    write_csv(out / f"trajectory{suffix}.csv",
              ["t", "u_H1", "v_L2", "A0u_L2", "v_H1", "L", "R_running"], zip(*cols))
    eta, om = traj.omega_table(model)
    write_csv(out / f"omega{suffix}.csv", ["eta", "omega"], zip(eta, om))


def growth_for(sc: Scenario, model, f, R: float):
    rng = sc.rng(1)
    samples = sample_fields_by_norm(model, 200, rng, max_norm=max(1.0, math.sqrt(R)) * 1.5)
    return verify_growth(f, model, samples, rng)


def _resolve_R(sc: Scenario, model, traj: Trajectory) -> float:
    R = sc.decay_params()["R"]
    return float(traj.R(model)) if R == "auto" else float(R)


def certify_decay(sc: Scenario, model, f, traj: Trajectory, levels=None):
    """Selection chain eta -> rho -> theta followed by the decay certificates."""
    dp = sc.decay_params()
    rp = sc.run_params()
    delta = dp["delta"]
    lam1 = model.lambda1
    if delta > min(0.5, lam1 / 2) + 1e-12:
        raise ConfigError(f"[decay] delta must be <= min(1/2, lambda1/2) = {min(0.5, lam1 / 2):.6g}")
    if dp["basis_size"] not in ("full", 2 * model.N):
        raise ConfigError(f"[decay] basis_size must be 'full' or {2 * model.N} (the whole truncated basis)")
    R = _resolve_R(sc, model, traj)
    growth = growth_for(sc, model, f, R)
    C_tilde = 0.0 if f.is_zero else growth.C_tilde

    window = float(traj.times[-1] - traj.times[0])
    eta_max = window / 10 if dp["eta_max"] == "auto" else float(dp["eta_max"])
    eta_tab, om_tab = traj.omega_table(model)
    keep = eta_tab <= eta_max + 1e-12
    eta = choose_eta(delta, eta_tab[keep], om_tab[keep], C_tilde, R, f.alpha, f.beta_h)
    rho = dp["rho"]
    if dp["theta_mode"] == "chain":
        rho = min(rho, rho_for_eta(delta, eta))
    u_bars = traj.u[np.unique(np.linspace(0, len(traj.u) - 1, 21).astype(int))]
    sel = theta_rho(model, f, rho, R, u_bars, sc.rng(2))
    theta = max(sel.theta, rp["theta"])

    chain = {"lambda1": lam1, "R": R, "C_tilde": C_tilde, "rho": rho, "theta_rho": sel.theta,
             "theta": theta, "eta": eta, "delta": delta, "D_R": sel.D_R,
             "c_inf": linf_embedding_constant(model)}
    params = EnergyParams(traj.eps, theta, delta, eta, rho, sel.theta)
    system = EvolutionSystem(model, f, traj, theta)
    wanted = levels or {"Z0": [0], "Zm1": [-1], "both": [-1, 0]}[dp["level"]]
    certs = {lvl: verify_interval_decay(system, params, lvl) for lvl in wanted}
    return certs, chain, growth, sel


# -- commands -----------------------------------------------------------------------

def cmd_verify_hypotheses(sc: Scenario):
    sc.validate("verify-hypotheses")
    out = _out(sc)
    clauses = {}
    try:
        model = sc.model()
    except OperatorError as exc:
        clauses[exc.clause or "Hyp1"] = {"passed": False, "detail": str(exc),
                                         "location": exc.location}
        write_json(out / "hypotheses.json", _envelope(sc, {}, clauses=clauses, passed=False,
                                                      failing=[exc.clause]))
        return 1, {"clauses": clauses}
    f = sc.nonlinearity()
    clauses["Hyp1(1)"] = {"passed": True, "a0": model.a0}
    clauses["Hyp1(2b)"] = {"passed": bool(model.lambda1 > 0), "lambda1": model.lambda1}
    write_csv(out / "spectrum.csv", ["k", "lambda_k", "residual"],
              zip(range(1, model.N + 1), model.lam, model.residuals))

    fields = random_fields(model, 1000, sc.rng(0))
    ladder = {}
    for th in sorted({0.0, sc.run_params()["theta"], 3.0}):
        rep = check_shift_inequalities(model, th, fields)
        ladder[str(th)] = {"violations": rep.violations, "tightest": rep.tightest}
    clauses["norm_ladder"] = {"passed": all(not v["violations"] for v in ladder.values()), "thetas": ladder}

    R_est = 4.0
    eqs = att.find_equilibria(model, f)
    if eqs:
        R_est = max(R_est, max(float(norm_H(model, e, 1) ** 2) for e in eqs))
    growth = growth_for(sc, model, f, R_est)
    write_json(out / "growth.json", _envelope(sc, {"lambda1": model.lambda1, "C_tilde": growth.C_tilde},
                                              growth=growth.to_dict()))
    clauses["Hyp2"] = {"passed": bool(np.isclose(f.alpha + f.beta_h, 2.0) and f.within_growth_form),
                       "alpha": f.alpha, "beta_h": f.beta_h, "flags": growth.flags}
    clauses["Hyp3"] = {"passed": f.C_lip2 is not None, "C_lip2": f.C_lip2}
    if f.mu is not None and f.c is not None:
        sup_eq = max([float(np.max(np.abs(model.to_grid(e)))) for e in eqs] + [1.0])
        dis = check_dissipativeness(f, model, 4.0 * sup_eq)
        clauses["Hyp4"] = {"passed": dis.passed, "margin_flux": dis.margin_flux,
                           "margin_potential": dis.margin_potential, "violation": dis.violation,
                           "u_max": dis.u_max}
    else:
        clauses["Hyp4"] = {"passed": True, "skipped": "mu or c not declared"}
    failing = [k for k, v in clauses.items() if not v["passed"]]
    chain = {"lambda1": model.lambda1, "C_tilde": growth.C_tilde, "R": R_est}
    write_json(out / "hypotheses.json", _envelope(sc, chain, clauses=clauses, passed=not failing,
                                                  failing=failing,
                                                  equilibria=len(eqs)))
    return (0 if not failing else 1), {"clauses": clauses, "failing": failing}


def cmd_decay(sc: Scenario):
    sc.validate("decay")
    out = _out(sc)
    model, f = sc.model(), sc.nonlinearity()
    traj = base_trajectory(sc, model, f)
    write_trajectory(out, model, f, traj)
    try:
        certs, chain, growth, sel = certify_decay(sc, model, f, traj)
    except CertificateRefused as exc:
        write_json(out / "certificate.json", _envelope(sc, {}, passed=False, refused=str(exc),
                                                       detail=exc.detail))
        return 1, {"refused": str(exc)}
    rows = []
    for lvl, c in certs.items():
        s = c.series
        for t, j, r, n, w in zip(s["t"], s["interval"], s["interval_ratio"], s["opnorm"], s["prefactor_ratio"]):
            rows.append(["Z0" if lvl == 0 else "Zm1", t, int(j), r, n, w, c.rate])
    write_csv(out / "decay.csv", ["level", "t", "interval", "interval_energy_ratio", "opnorm",
                                  "prefactor_ratio", "fitted_rate"], rows)
    passed = all(c.passed for c in certs.values())
    first = certs[min(certs)]
    chain = chain | {"M": first.M, "rate": first.rate}
    write_json(out / "certificate.json", _envelope(
        sc, chain, passed=passed,
        certificates={("Z0" if k == 0 else "Zm1"): c.to_dict() for k, c in certs.items()},
        theta_selection={"formula": sel.formula_theta, "doublings": sel.doublings,
                         "worst_ratios": sel.worst_ratios, "log": sel.log},
        M=first.M, rate=first.rate, theta=chain["theta"], theta_rho=chain["theta_rho"],
        eta=chain["eta"], rho=chain["rho"], delta=chain["delta"]))
    return (0 if passed else 1), {"certificates": certs, "chain": chain, "trajectory": traj}


def cmd_regularity(sc: Scenario):
    sc.validate("regularity")
    out = _out(sc)
    model, f = sc.model(), sc.nonlinearity(need_dissipative=True)
    rp, reg = sc.run_params(), sc.regularity_params()
    traj = base_trajectory(sc, model, f)
    failures = []
    try:
        certs, chain, growth, sel = certify_decay(sc, model, f, traj, levels=[0])
    except CertificateRefused as exc:
        write_json(out / "regularity.json", _envelope(sc, {}, passed=False, refused=str(exc)))
        return 1, {"refused": str(exc)}
    cert = certs[0]
    theta = chain["theta"]
    chain |= {"M": cert.M, "rate": cert.rate}
    if not cert.passed:
        failures.append("decay certificate")

    voc = None
    try:
        voc = voc_reconstruct(model, f, traj, theta, cert, reg["tail_Tw"])
        write_csv(out / "voc_error.csv", ["t", "error", "tail_bound", "quadrature_bound", "evaluated"],
                  ([r["t"], r["error"], r["tail_bound"], r["quadrature_bound"], int(r["evaluated"])]
                   for r in voc.rows()))
    except RegularityError as exc:
        failures.append(f"voc: {exc}")
    t1 = theorem1_check(model, f, traj, theta, cert, chain["C_tilde"], chain["R"], chain["delta"], voc)
    if not t1.theorem1_ok:
        failures.append("theorem-1 bound")
    if voc is not None and not voc.within_budget:
        failures.append("voc budget")
    if t1.identity_residual > 1e-8 or not t1.triangle_ok:
        failures.append("identity cross-check")
    lam = lambda_derivative_check(model, f, traj, theta, chain["delta"])

    # eps sweep at the rho = 1/2 threshold
    R = chain["R"]
    trajs = {e: base_trajectory(sc, model, f, eps=e) for e in reg["epsilon_list"]}
    if reg["theta"] == "auto":
        u_bars = np.vstack([t.u[np.unique(np.linspace(0, len(t.u) - 1, 11).astype(int))] for t in trajs.values()])
        theta_star = theta_rho(model, f, 0.5, R, u_bars, sc.rng(3)).theta
    else:
        theta_star = float(reg["theta"])
    reports = [theorem2_report(model, f, trajs[e], theta_star, R, chain["delta"]) for e in reg["epsilon_list"]]
    verdict = uniformity_verdict(reports, reg["uniformity_factor"])
    if not verdict.passed:
        failures.append("uniformity")
    if not verdict.all_bounds_ok:
        failures.append("theorem-2 bound")
    chain |= {"theta_star": theta_star, "K": reports[0].K, "C_nu": reports[0].C_nu}
    write_json(out / "regularity.json", _envelope(
        sc, chain, passed=not failures, failures=failures,
        theorem1=t1.to_dict(), lambda_identity=lam,
        voc={"max_error": voc.max_error, "budget_min": float(voc.budget[voc.evaluated].min()),
             "scale": voc.scale, "T_w": voc.T_w, "within_budget": voc.within_budget} if voc else None,
        theorem2=verdict.to_dict()))
    return (0 if not failures else 1), {"theorem1": t1, "theorem2": verdict, "voc": voc, "chain": chain}


def cmd_attractor_sweep(sc: Scenario):
    sc.validate("attractor-sweep")
    out = _out(sc)
    model, f = sc.model(), sc.nonlinearity(need_dissipative=True)
    ap = sc.attractor_params()
    ens = att.default_ensemble(model, ap["ensemble"])
    curve = att.upper_semicontinuity_sweep(
        model, f, ap["epsilon_list"], trend_threshold=ap["trend_threshold"], tolerance=ap["tolerance"],
        robustness_check=ap["robustness"], ensemble=ens, T_transient=ap["T_transient"],
        T_sample=ap["T_sample"], h=ap["h"])
    for e, s in curve.samples.items():
        rows = []
        uh = norm_H(model, s.u, 1)
        vl = norm_H(model, s.v, 0)
        for i in range(len(s)):
            rows.append([s.provenance[i], uh[i], vl[i], *s.u[i, :4], *s.v[i, :4]])
        write_csv(out / f"attractor_eps{e:g}.csv",
                  ["provenance", "u_H1", "v_L2"] + [f"u{k}" for k in range(1, 5)] + [f"v{k}" for k in range(1, 5)],
                  rows)
    write_csv(out / "semidistance.csv", ["eps", "d_H1xL2", "d_H1xHm1"],
              ([r["eps"], r["d_H1xL2"], r["d_H1xHm1"]] for r in curve.to_rows()))
    eqs = att.find_equilibria(model, f)
    gamma = [{"equilibrium": i, "discrepancy": float(att.gamma_map(model, f, e)["discrepancy"]),
              "time_derivative_norm": float(norm_H(model, att.gamma_map(model, f, e)["v_time_derivative"], 0))}
             for i, e in enumerate(eqs)]
    chain = {"lambda1": model.lambda1, "R": max(curve.meta["R"].values())}
    write_json(out / "attractor.json", _envelope(
        sc, chain, passed=curve.passed, density=curve.density, rank_correlation=curve.rank_correlation,
        nonincreasing=curve.nonincreasing, terminal_ok=curve.terminal_ok, dominated=curve.dominated,
        curve=curve.to_rows(), robustness=curve.robustness, gamma=gamma, meta=curve.meta))
    return (0 if curve.passed else 1), {"curve": curve}


REPORT_FILES = ("hypotheses.json", "certificate.json", "regularity.json", "attractor.json")


def cmd_report(sc: Scenario):
    out = _out(sc)
    lines, status = [], []
    for name in REPORT_FILES:
        p = out / name
        if not p.exists():
            lines.append(f"{name:18s} missing")
            continue
        data = json.loads(p.read_text())
        ok = bool(data.get("passed"))
        status.append(ok)
        extra = ""
        if name == "certificate.json" and "rate" in data:
            extra = f" rate={data['rate']:.4g} M={data['M']:.4g} theta={data['theta']:.4g}"
        if name == "regularity.json" and data.get("failures"):
            extra = " failures: " + ", ".join(data["failures"])
        if name == "attractor.json":
            extra = f" terminal={data['meta']['terminal']:.4g} limit={data['meta']['terminal_limit']:.4g}"
        if name == "hypotheses.json" and data.get("failing"):
            extra = " failing: " + ", ".join(map(str, data["failing"]))
        lines.append(f"{name:18s} {'PASS' if ok else 'FAIL'}{extra}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    if not status:
        raise ConfigError(f"no reports found in {out}")
    return (0 if all(status) else 1), {"lines": lines}
