"""Command-line front end.

Usage::

    glmtp estimate     --config run.json [--out result.json] [--pretty]
    glmtp simulate     --config sim.json [--out report.json] [--threads N]
    glmtp truth        --config truth.json [--out truth.json]
    glmtp oracle-check [--config checks.json] [--out checks.json]

Every config is validated against ``config_schema.json`` (shipped with the
package) before any computation. Exit codes: 0 success, 2 invalid config or
input, 3 estimation failure (including failed oracle checks).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import EstimationError, GLMTPError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 2, 3


def load_schema() -> dict:
    return json.loads(resources.files("glmtp").joinpath("config_schema.json").read_text())


class ConfigError(ValidationError):
    pass


def validate_config(cfg, command: str) -> dict:
    """Validate ``cfg`` for ``command``; raises :class:`ConfigError` with the schema path."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg = dict(cfg)
    if cfg.setdefault("command", command) != command:
        raise ConfigError(f"config is for {cfg['command']!r}, not {command!r}")
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {e.message}")
    return cfg


def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _settings(cfg):
    from .learners import DegenerateRule, HistorySpec, LearnerSpec

    outcome = LearnerSpec.from_config(cfg.get("outcome_learner", {"family": "binomial"}))
    treatment = LearnerSpec.from_config(cfg.get("treatment_learner", {"family": "binomial"}))
    history = HistorySpec(cfg.get("history_window"))
    degenerate = tuple(DegenerateRule(d["kind"], float(d.get("value", 1)))
                       for d in cfg.get("degenerate", []))
    return outcome, treatment, history, degenerate


def cmd_estimate(cfg: dict, threads: int = 1) -> tuple:
    from .eif import contrast
    from .learners import fit_propensity_sequence
    from .panel import assign_folds, load_panel
    from .policy import policy_from_config
    from .sdr import sdr_estimate
    from .tmle import tmle_estimate

    supports = [tuple(float(v) for v in s) for s in cfg["supports"]]
    panel = load_panel(cfg["data"], cfg.get("columns"), supports, cfg["outcome_bounds"])
    policy = policy_from_config(cfg["policy"])
    outcome, treatment, history, degenerate = _settings(cfg)
    J, seed, alpha = int(cfg.get("J", 2)), int(cfg.get("seed", 0)), float(cfg.get("alpha", 0.05))
    folds = assign_folds(panel.n, J, seed) if J > 1 else None
    props = fit_propensity_sequence(panel, folds, treatment, degenerate, history)
    results = []
    for name in cfg.get("estimators", ["tmle"]):
        fn = {"tmle": tmle_estimate, "sdr": sdr_estimate}[name]
        results.append(fn(panel, policy, outcome, treatment, folds=folds, seed=seed,
                          alpha=alpha, history=history, propensity=props))
    if len(results) == 1:
        out = results[0].to_dict()
    else:
        out = {"results": [r.to_dict() for r in results],
               "contrast": contrast(results[0], results[1], alpha).to_dict()}
    lines = [f"{r.estimator:>6}  theta={r.theta:.6f}  se={r.se:.6f}  "
             f"ci=({r.ci[0]:.6f}, {r.ci[1]:.6f})" for r in results]
    return out, "\n".join(lines)


def _fig3_params(dgp_cfg):
    from .sim import HIGH_SURVIVAL, Fig3Params

    base = HIGH_SURVIVAL if dgp_cfg.get("kind") == "high_survival" else Fig3Params()
    p = dgp_cfg.get("params", {})
    return Fig3Params(base.tau, float(p.get("rho", base.rho)),
                      tuple(p.get("a_coef", base.a_coef)), tuple(p.get("y_coef", base.y_coef)))


def cmd_simulate(cfg: dict, threads: int = 1) -> tuple:
    from .sim import StudySettings, run_monte_carlo

    defaults = {"outcome_learner": {"family": "binomial", "features": "interactions"},
                "treatment_learner": {"family": "binomial", "features": "main"},
                "history_window": 0,
                "degenerate": [{"kind": "absorbing_exposure", "value": 1}]}
    o, tr, h, d = _settings({**defaults, **cfg})
    settings = StudySettings(o, tr, h, int(cfg.get("J", 2)), float(cfg.get("alpha", 0.05)), d)
    report = run_monte_carlo(cfg["sizes"], int(cfg["reps"]),
                             tuple(cfg.get("estimators", ["tmle", "sdr"])), cfg["policy"],
                             int(cfg["seed"]), cfg.get("theta_star"), None,
                             _fig3_params(cfg.get("dgp", {"kind": "fig3"})), settings,
                             threads=threads, truth_M=int(cfg.get("truth_M", 1_000_000)),
                             truth_seed=cfg.get("truth_seed"))
    if cfg.get("format", "json") == "csv":
        return report.to_csv(), report.pretty()
    return report.to_dict(), report.pretty()


def cmd_truth(cfg: dict, threads: int = 1) -> tuple:
    from .oracle import (dgp_from_dict, exact_theta_discrete, mc_truth_npsem,
                         npsem_from_dgp)
    from .policy import policy_from_config
    from .sim import fig3_npsem

    policy = policy_from_config(cfg["policy"])
    dgp_cfg = cfg.get("dgp", {"kind": "fig3"})
    M, seed = int(cfg["M"]), int(cfg["seed"])
    out = {"M": M, "seed": seed}
    if dgp_cfg["kind"] == "discrete":
        if "path" not in dgp_cfg:
            raise ConfigError("dgp: a discrete DGP needs 'path'")
        try:
            tables = json.loads(Path(dgp_cfg["path"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"dgp/path: {exc}") from None
        dgp = dgp_from_dict(tables)
        npsem = npsem_from_dgp(dgp)
        out["exact"] = exact_theta_discrete(dgp, policy)
    else:
        npsem = fig3_npsem(_fig3_params(dgp_cfg))
    theta, se = mc_truth_npsem(npsem, policy, M, seed)
    out.update(theta=theta, mc_se=se)
    return out, f"theta = {theta:.6f} (MC se {se:.2g}, M = {M})"


def run_oracle_checks(instances: int = 50, seed: int = 0, tau: int = 3) -> list:
    """The oracle invariants on randomized small instances."""
    from .gcomp import plugin_estimate
    from .oracle import (OracleStageLearner, exact_eta, exact_theta_discrete,
                         expansion_residual, mc_truth_npsem, npsem_from_dgp, oracle_propensity,
                         perturbed_eta, random_discrete_dgp, replicated_panel,
                         sequential_theta_discrete)
    from .policy import identity, make_delay_absorbing, random_table_policy
    from .sdr import sdr_estimate
    from .tmle import tmle_estimate

    rng = np.random.default_rng(seed)
    checks = []

    def record(name, value, tol, compare="le"):
        ok = bool(value <= tol) if compare == "le" else bool(value > tol)
        checks.append({"check": name, "value": value, "tolerance": tol, "passed": ok})

    worst_id = worst_bal = worst_mean = 0.0
    for _ in range(instances):
        T = int(rng.integers(1, tau + 1))
        dgp = random_discrete_dgp(T, rng)
        pol = random_table_policy(T, dgp.A_supports, rng, covariate_support=dgp.L_supports)
        worst_id = max(worst_id, abs(exact_theta_discrete(dgp, pol)
                                     - sequential_theta_discrete(dgp, pol)))
        worst_mean = max(worst_mean, abs(exact_theta_discrete(dgp, identity())
                                         - dgp.mean_outcome()))
        eta, etap = exact_eta(dgp, pol), perturbed_eta(dgp, pol, int(rng.integers(1 << 30)))
        t = int(rng.integers(0, T))
        s = tuple(float(rng.choice(dgp.A_supports[u])) for u in range(t))
        cell = None
        if t > 0:
            h = []
            for u in range(t):
                h.append(float(rng.choice(dgp.L_supports[u])))
                if u < t - 1:
                    h.append(float(rng.choice(dgp.A_supports[u])))
            cell = (float(rng.choice(dgp.A_supports[t - 1])), tuple(h))
        worst_bal = max(worst_bal, abs(expansion_residual(dgp, etap, eta, t, s, cell,
                                                          m_prime_0=float(rng.random()))))
    record("enumeration_vs_sequential_regression", worst_id, 1e-12)
    record("identity_policy_is_marginal_mean", worst_mean, 1e-12)
    record("first_order_expansion_balance", worst_bal, 1e-12)

    dgp = random_discrete_dgp(3, rng, dyadic=True)
    pol = make_delay_absorbing(1)
    panel = replicated_panel(dgp)
    exact = exact_theta_discrete(dgp, pol)
    props = oracle_propensity(dgp, panel)
    plug = plugin_estimate(panel, pol, OracleStageLearner(dgp, pol)).theta_plugin
    tm = tmle_estimate(panel, pol, OracleStageLearner.bounded(dgp, pol), propensity=props, J=1)
    sd = sdr_estimate(panel, pol, OracleStageLearner(dgp, pol), propensity=props, J=1)
    record("oracle_nuisance_plugin", abs(plug - exact), 1e-10)
    record("oracle_nuisance_tmle", abs(tm.theta - exact), 1e-10)
    record("oracle_nuisance_sdr", abs(sd.theta - exact), 1e-10)
    M = 400_000
    theta, se = mc_truth_npsem(npsem_from_dgp(dgp), pol, M, seed)
    record("npsem_monte_carlo_within_4_se", abs(theta - exact) / se, 4.0)
    return checks


def cmd_oracle_check(cfg: dict, threads: int = 1) -> tuple:
    checks = run_oracle_checks(int(cfg.get("instances", 50)), int(cfg.get("seed", 0)),
                               int(cfg.get("tau", 3)))
    out = {"checks": checks, "passed": all(c["passed"] for c in checks)}
    text = "\n".join(f"{'PASS' if c['passed'] else 'FAIL'}  {c['check']}  "
                     f"({c['value']:.3g} vs {c['tolerance']:g})" for c in checks)
    return out, text


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "truth": cmd_truth,
            "oracle-check": cmd_oracle_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glmtp", description="Policy-value estimation for "
                                "longitudinal modified treatment policies.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: available cores)")
    p.add_argument("--pretty", action="store_true", help="print a human-readable table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    try:
        if args.config is None:
            if args.command != "oracle-check":
                raise ConfigError("--config is required")
            raw = {}
        else:
            try:
                raw = json.loads(Path(args.config).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
        cfg = validate_config(raw, args.command)
        out, text = COMMANDS[args.command](cfg, max(1, threads))
        failed = args.command == "oracle-check" and not out["passed"]
    except ValidationError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 2}),
              file=sys.stderr)
        return EXIT_INVALID
    except (EstimationError, GLMTPError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 3}),
              file=sys.stderr)
        return EXIT_FAILURE
    payload = out if isinstance(out, str) else dumps(out)
    if args.out:
        Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)
    if args.pretty:
        print(text)
    return EXIT_FAILURE if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
