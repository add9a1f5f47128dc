"""Command-line entry point.

Subcommands: analyze, synthesize, simulate, verify, reproduce-example.
Every subcommand writes a machine-readable JSON report (schema_version 1)
under the output directory.  Exit codes: 0 all requested checks passed,
1 a check failed or a run diverged, 2 usage or scenario errors.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .expr import ExprError, compile_exprs, evaluate, parse_expr, to_string
from .lyapunov import (
    StabilityError, classify_stability, sampled_positive_definite,
)
from .scenario import (
    Scenario, ScenarioError, build_general_form, build_plant,
    build_uncertainty, input_catalog, load_scenario, resolve_synthesis_spec,
    sampling_box, scenario_from_dict, scenario_to_dict,
)
from .sim import (
    IntegrationError, check_dissipation, check_w_decrease,
    convergence_metrics, signal_from_spec, simulate_closed_loop,
    simulate_interconnection, simulate_uncertainty, write_trajectory_csv,
)
from .synthesis import (
    SynthesisError, reduce_general_form, storage_value, synthesize,
)
from .uncertainty import Interconnection, UncertaintyError, composite_storage

SCHEMA_VERSION = 1

_USAGE_ERRORS = (ScenarioError, ExprError, SynthesisError, UncertaintyError,
                 StabilityError, ValueError, OSError)


def bundled_scenario_path() -> Path:
    return Path(resources.files("nisyn") / "scenarios" / "example.json")


def _report(command: str, **fields) -> dict:
    out = {"schema_version": SCHEMA_VERSION, "command": command}
    out.update(fields)
    return out


def _write_report(report: dict, out_dir: Path, name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _apply_overrides(scn: Scenario, args) -> Scenario:
    if getattr(args, "dt", None) is not None:
        scn.simulation.dt = float(args.dt)
    if getattr(args, "t_end", None) is not None:
        scn.simulation.t_end = float(args.t_end)
    if getattr(args, "seed", None) is not None:
        scn.simulation.seed = int(args.seed)
    if getattr(args, "tol", None) is not None:
        scn.verification.dissipation_tol = float(args.tol)
    return scn


# --- analyze ------------------------------------------------------------------

def run_analyze(scn: Scenario) -> dict:
    plant = build_plant(scn)
    verdict = classify_stability(plant.a11)
    equivalent = bool(verdict.det_nonzero and verdict.lyapunov_stable)
    return _report(
        "analyze",
        classification=verdict.classification.value,
        equivalent=equivalent,
        det_nonzero=verdict.det_nonzero,
        tol=verdict.tol,
        eigenvalues=[{"re": v.real, "im": v.imag} for v in verdict.eigenvalues],
        critical_eigenvalues=[
            {"re": c.value.real, "im": c.value.imag,
             "algebraic_multiplicity": c.algebraic_multiplicity,
             "geometric_multiplicity": c.geometric_multiplicity}
            for c in verdict.critical],
        hypotheses={
            "det_A11_nonzero": verdict.det_nonzero,
            "A11_lyapunov_stable": verdict.lyapunov_stable,
        },
        passed=equivalent,
    )


# --- synthesize -----------------------------------------------------------------

def _check_law_regression(closed_loop, regression: dict, seed: int) -> dict:
    plant = closed_loop.plant
    names = plant.state_names
    rng = np.random.default_rng(seed)
    expected_u1 = [parse_expr(t, names) for t in regression.get("u1", [])]
    expected_u2 = [parse_expr(t, names) for t in regression.get("u2", [])]
    if len(expected_u1) != plant.p1 or len(expected_u2) != plant.p2:
        raise ScenarioError("regression block dimensions do not match the plant")
    max_rel = 0.0
    for _ in range(100):
        state = rng.uniform(-2.0, 2.0, size=plant.n_states)
        binding = dict(zip(names, state))
        for law, oracle in list(zip(closed_loop.u1_laws, expected_u1)) + \
                list(zip(closed_loop.u2_laws, expected_u2)):
            got = evaluate(law, binding)
            want = evaluate(oracle, binding)
            max_rel = max(max_rel, abs(got - want) / max(1.0, abs(want)))
    return {"max_relative_error": max_rel, "passed": bool(max_rel <= 1e-9)}


def run_synthesize(scn: Scenario) -> dict:
    analyze = run_analyze(scn)
    if not analyze["equivalent"]:
        return _report("synthesize", equivalent=False, analyze=analyze,
                       passed=False)
    plant = build_plant(scn)
    spec = resolve_synthesis_spec(scn, plant)
    closed_loop = synthesize(plant, spec)
    ver = scn.verification

    # V2 positivity on the output slice of the sampling box
    n_plant = plant.n_states
    y_box = sampling_box(scn, n_plant)[plant.m:plant.m + plant.n_outputs]
    v2_fn = compile_exprs([spec.v2], plant.y_names)
    v2_check = sampled_positive_definite(
        lambda y: float(v2_fn(y)[0]), y_box, ver.samples, ver.pd_seed)

    report = _report(
        "synthesize",
        equivalent=True,
        laws=closed_loop.law_strings(),
        storage=to_string(closed_loop.storage_expr),
        epsilon=closed_loop.epsilon,
        **{"lambda": closed_loop.spec.lam},
        p_matrix=[list(map(float, row)) for row in spec.p_matrix],
        v2_positive_definite={
            "passed": v2_check.passed,
            "points_checked": v2_check.points_checked,
            "witness": v2_check.witness,
        },
    )
    passed = v2_check.passed
    if scn.regression is not None:
        reg = _check_law_regression(closed_loop, scn.regression,
                                    scn.simulation.seed)
        report["law_regression"] = reg
        passed = passed and reg["passed"]
    report["passed"] = bool(passed)
    return report


# --- simulate -------------------------------------------------------------------

def run_simulate(scn: Scenario, out_dir: Path) -> dict:
    plant = build_plant(scn)
    spec = resolve_synthesis_spec(scn, plant)
    closed_loop = synthesize(plant, spec)
    unc = build_uncertainty(scn)
    sim = scn.simulation
    ver = scn.verification
    x0 = np.asarray(sim.x0, dtype=float)
    if x0.shape != (plant.n_states,):
        raise ScenarioError(
            f"x0 must have {plant.n_states} entries, got {x0.shape[0]}")
    try:
        if unc is not None:
            ic = Interconnection(closed_loop, unc)
            traj = simulate_interconnection(
                ic, x0, scn.uncertainty.x_sigma0, sim.t_end, sim.dt)
        else:
            signal = signal_from_spec(sim.input, plant.n_outputs, sim.seed)
            traj = simulate_closed_loop(closed_loop, x0, sim.t_end, sim.dt,
                                        signal=signal)
    except IntegrationError as err:
        return _report("simulate", passed=False, error=str(err),
                       diverged_at_step=err.step,
                       last_state=[float(v) for v in err.last_state])
    csv_path = _write_trajectory(traj, out_dir, "trajectory.csv")
    metrics = convergence_metrics(traj, ver.convergence_threshold,
                                  ver.settle_window)
    report = _report(
        "simulate",
        trajectory_csv=str(csv_path),
        samples=traj.n_samples,
        dt=sim.dt,
        t_end=sim.t_end,
        interconnected=unc is not None,
        convergence=metrics.as_dict(),
        passed=True,
    )
    if unc is not None:
        n_plant = plant.n_states
        nominal_norm = float(np.linalg.norm(traj.states[-1, :n_plant]))
        report["final_nominal_norm"] = nominal_norm
    gform = build_general_form(scn, plant)
    if gform is not None and unc is None:
        report["applied_inputs_csv"] = str(
            _write_applied_inputs(gform, plant, closed_loop, traj, out_dir))
    return report


def _write_applied_inputs(gform, plant, closed_loop, traj, out_dir: Path) -> Path:
    """Map the total normal-form input along the trajectory through the
    general-form transform and export the inputs to apply upstream."""
    import csv as _csv
    path = out_dir / "applied_inputs.csv"
    p = plant.n_outputs
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["t"] + [f"ut{i + 1}" for i in range(p)])
        for k in range(traj.n_samples):
            state = traj.states[k]
            total = np.concatenate([
                traj.inputs[k][:plant.p1] + closed_loop._u1_fn(state),
                traj.inputs[k][plant.p1:] + closed_loop._u2_fn(state),
            ])
            transform = reduce_general_form(gform, plant, state)
            applied = transform(total)
            writer.writerow([repr(float(traj.t[k]))]
                            + [repr(float(v)) for v in applied])
    return path


def _write_trajectory(traj, out_dir: Path, name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    write_trajectory_csv(traj, path)
    return path


# --- verify ---------------------------------------------------------------------

def _signal_label(spec: dict, index: int) -> str:
    return f"{index}-{spec.get('kind', 'unknown')}"


def _closed_loop_signal_check(scenario_dict: dict, signal_spec: dict) -> dict:
    """Worker: dissipation of the synthesized loop under one catalog signal.
    Takes plain dicts so it can cross a process boundary."""
    scn = scenario_from_dict(scenario_dict)
    plant = build_plant(scn)
    spec = resolve_synthesis_spec(scn, plant)
    closed_loop = synthesize(plant, spec)
    signal = signal_from_spec(signal_spec, plant.n_outputs, scn.simulation.seed)
    traj = simulate_closed_loop(closed_loop, scn.simulation.x0,
                                scn.simulation.t_end, scn.simulation.dt,
                                signal=signal)
    rep = check_dissipation(traj, lambda s: storage_value(s, closed_loop),
                            closed_loop.epsilon,
                            scn.verification.dissipation_tol)
    return rep.as_dict()


def _uncertainty_signal_check(scenario_dict: dict, signal_spec: dict) -> dict:
    scn = scenario_from_dict(scenario_dict)
    unc = build_uncertainty(scn)
    signal = signal_from_spec(signal_spec, unc.n_outputs, scn.simulation.seed)
    traj = simulate_uncertainty(unc, scn.uncertainty.x_sigma0,
                                scn.simulation.t_end, scn.simulation.dt,
                                signal=signal)
    rep = check_dissipation(traj, unc.storage, unc.epsilon_sigma,
                            scn.verification.dissipation_tol)
    return rep.as_dict()


def _run_signal_checks(worker, scenario_dict, signals, jobs: int) -> list:
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(worker, scenario_dict, s) for s in signals]
            return [f.result() for f in futures]
    return [worker(scenario_dict, s) for s in signals]


def run_verify(scn: Scenario, jobs: int = 1) -> dict:
    analyze = run_analyze(scn)
    if not analyze["equivalent"]:
        return _report("verify", equivalent=False, analyze=analyze, passed=False)
    plant = build_plant(scn)
    spec = resolve_synthesis_spec(scn, plant)
    closed_loop = synthesize(plant, spec)
    unc = build_uncertainty(scn)
    ver = scn.verification
    sim = scn.simulation
    if len(sim.x0) != plant.n_states:
        raise ScenarioError(
            f"x0 must have {plant.n_states} entries, got {len(sim.x0)}")
    if ver.dissipation_tol <= 0:
        raise ScenarioError("dissipation_tol must be positive")
    w_tol = ver.w_decrease_tol if ver.w_decrease_tol is not None else 10.0 * sim.dt
    if w_tol <= 0:
        raise ScenarioError("w_decrease_tol must be positive")
    scenario_dict = scenario_to_dict(scn)
    target = scn.spec.target
    checks: dict = {}
    all_passed = True

    # storage positivity on the plant box
    n_plant = plant.n_states
    v_box = sampling_box(scn, n_plant)
    v_check = sampled_positive_definite(
        lambda x: storage_value(x, closed_loop), v_box, ver.samples, ver.pd_seed)
    checks["storage_positive_definite"] = {
        "passed": v_check.passed,
        "points_checked": v_check.points_checked,
        "witness": v_check.witness,
    }
    all_passed &= v_check.passed

    # closed-loop dissipation over the input catalog
    signals = input_catalog(scn, plant.n_outputs)
    results = _run_signal_checks(_closed_loop_signal_check, scenario_dict,
                                 signals, jobs)
    loop_checks = []
    for i, (sig, rep) in enumerate(zip(signals, results)):
        entry = {"signal": sig, "label": _signal_label(sig, i), **rep}
        entry["passed"] = rep["osni_pass"] if target == "OSNI" else rep["ni_pass"]
        loop_checks.append(entry)
        all_passed &= entry["passed"]
    checks["closed_loop_dissipation"] = loop_checks

    if unc is not None:
        results = _run_signal_checks(_uncertainty_signal_check, scenario_dict,
                                     signals, jobs)
        unc_checks = []
        for i, (sig, rep) in enumerate(zip(signals, results)):
            entry = {"signal": sig, "label": _signal_label(sig, i), **rep}
            entry["passed"] = rep["osni_pass"]
            unc_checks.append(entry)
            all_passed &= entry["passed"]
        checks["uncertainty_dissipation"] = unc_checks

        ic = Interconnection(closed_loop, unc)
        joint_box = sampling_box(scn, ic.n_states)
        vs_check = sampled_positive_definite(
            unc.storage, joint_box[n_plant:], ver.samples, ver.pd_seed)
        checks["uncertainty_storage_positive_definite"] = {
            "passed": vs_check.passed,
            "points_checked": vs_check.points_checked,
            "witness": vs_check.witness,
        }
        all_passed &= vs_check.passed
        w_check = sampled_positive_definite(
            lambda s: composite_storage(s, ic), joint_box, ver.samples,
            ver.pd_seed)
        checks["composite_storage_positive_definite"] = {
            "passed": w_check.passed,
            "points_checked": w_check.points_checked,
            "witness": w_check.witness,
        }
        all_passed &= w_check.passed

        traj = simulate_interconnection(ic, sim.x0, scn.uncertainty.x_sigma0,
                                        sim.t_end, sim.dt)
        w_rep = check_w_decrease(traj, ic, w_tol)
        checks["w_decrease"] = w_rep.as_dict()
        all_passed &= w_rep.passed

        metrics = convergence_metrics(traj, ver.convergence_threshold,
                                      ver.settle_window)
        conv = metrics.as_dict()
        conv["passed"] = bool(metrics.final_norm <= ver.convergence_threshold)
        if ver.nominal_convergence_threshold is not None:
            nominal = float(np.linalg.norm(traj.states[-1, :n_plant]))
            conv["final_nominal_norm"] = nominal
            conv["nominal_threshold"] = ver.nominal_convergence_threshold
            conv["passed"] = bool(conv["passed"] and
                                  nominal <= ver.nominal_convergence_threshold)
        checks["convergence"] = conv
        all_passed &= conv["passed"]

    return _report("verify", equivalent=True, target=target,
                   dissipation_tol=ver.dissipation_tol, w_decrease_tol=w_tol,
                   checks=checks, passed=bool(all_passed))


# --- reproduce-example ------------------------------------------------------------

def run_reproduce(scn: Scenario, out_dir: Path, jobs: int = 1) -> dict:
    stages = {}
    stages["analyze"] = run_analyze(scn)
    ok = stages["analyze"]["passed"]
    if ok:
        stages["synthesize"] = run_synthesize(scn)
        ok &= stages["synthesize"]["passed"]
        stages["verify"] = run_verify(scn, jobs=jobs)
        ok &= stages["verify"]["passed"]
        stages["simulate"] = run_simulate(scn, out_dir)
        ok &= stages["simulate"]["passed"]
    return _report("reproduce-example", stages=stages, passed=bool(ok))


# --- argument parsing ---------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nisyn",
        description="Synthesis and certification of negative imaginary "
                    "state feedback loops from scenario files.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        if scenario_required:
            p.add_argument("--scenario", required=True, help="scenario JSON file")
        else:
            p.add_argument("--scenario", help="scenario JSON file "
                                              "(default: bundled example)")
        p.add_argument("--out", default="nisyn-out", help="output directory")
        p.add_argument("--dt", type=float, help="override simulation step")
        p.add_argument("--t-end", type=float, dest="t_end",
                       help="override simulation horizon")
        p.add_argument("--seed", type=int, help="override scenario seed")
        p.add_argument("--tol", type=float, help="override dissipation tolerance")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for verification signals")

    common(sub.add_parser("analyze", help="equivalence verdict for the plant"))
    common(sub.add_parser("synthesize", help="construct storage and feedback laws"))
    common(sub.add_parser("simulate", help="run the loop or interconnection"))
    common(sub.add_parser("verify", help="certify dissipation and decrease"))
    common(sub.add_parser("reproduce-example",
                          help="full pipeline on the bundled example"),
           scenario_required=False)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        if args.command == "reproduce-example" and args.scenario is None:
            scn = load_scenario(bundled_scenario_path())
        else:
            scn = load_scenario(args.scenario)
        scn = _apply_overrides(scn, args)

        if args.command == "analyze":
            report = run_analyze(scn)
            name = "analyze.json"
        elif args.command == "synthesize":
            report = run_synthesize(scn)
            name = "synthesize.json"
        elif args.command == "simulate":
            report = run_simulate(scn, out_dir)
            name = "simulate.json"
        elif args.command == "verify":
            report = run_verify(scn, jobs=args.jobs)
            name = "verify.json"
        else:
            report = run_reproduce(scn, out_dir, jobs=args.jobs)
            name = "reproduce.json"
    except _USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    path = _write_report(report, out_dir, name)
    _print_summary(report)
    print(f"report written to {path}")
    return 0 if report.get("passed") else 1


def _print_summary(report: dict) -> None:
    command = report.get("command", "?")
    status = "PASS" if report.get("passed") else "FAIL"
    if command == "analyze":
        verdict = "EQUIVALENT" if report["equivalent"] else "NOT EQUIVALENT"
        print(f"analyze: {verdict} (A11 is {report['classification']}, "
              f"det nonzero: {report['det_nonzero']})")
    elif command == "synthesize":
        if report.get("equivalent"):
            for i, law in enumerate(report["laws"]["u1"]):
                print(f"u1[{i + 1}] = v{i + 1} + ({law})")
            p1 = len(report["laws"]["u1"])
            for i, law in enumerate(report["laws"]["u2"]):
                print(f"u2[{i + 1}] = v{p1 + i + 1} + ({law})")
            print(f"epsilon = {report['epsilon']}")
        else:
            print("synthesize: plant is not state feedback equivalent; "
                  "see the analyze section of the report")
    elif command == "verify" and "checks" in report:
        for key, value in report["checks"].items():
            if isinstance(value, list):
                for entry in value:
                    print(f"verify[{key}/{entry['label']}]: "
                          f"{'PASS' if entry['passed'] else 'FAIL'}")
            else:
                print(f"verify[{key}]: {'PASS' if value['passed'] else 'FAIL'}")
    print(f"{command}: {status}")


if __name__ == "__main__":
    sys.exit(main())
