#!/usr/bin/env python3
"""Convergence calibration for the bundled interconnection example.

Simulates the uncertain closed loop from the documented initial state and
tabulates the joint and nominal-block state norms over time.  The slowest
component is the cubic-lag uncertainty state, which decays like t^(-1/2)
once the fast modes are gone; this study is what pins the verification
thresholds (0.05 nominal, 0.08 joint at t = 10 s) in the bundled scenario.
"""

import argparse

import numpy as np

from nisyn.cli import bundled_scenario_path
from nisyn.scenario import build_plant, build_uncertainty, load_scenario, \
    resolve_synthesis_spec
from nisyn.sim import simulate_interconnection
from nisyn.synthesis import synthesize
from nisyn.uncertainty import Interconnection


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--t-end", type=float, default=10.0, dest="t_end")
    parser.add_argument("--dt", type=float, default=1e-3)
    args = parser.parse_args()

    scn = load_scenario(bundled_scenario_path())
    plant = build_plant(scn)
    cl = synthesize(plant, resolve_synthesis_spec(scn, plant))
    ic = Interconnection(cl, build_uncertainty(scn))
    traj = simulate_interconnection(ic, scn.simulation.x0,
                                    scn.uncertainty.x_sigma0,
                                    args.t_end, args.dt)
    n = plant.n_states
    joint = np.linalg.norm(traj.states, axis=1)
    nominal = np.linalg.norm(traj.states[:, :n], axis=1)
    print(f"{'t':>6}  {'|joint|':>10}  {'|nominal|':>10}  {'W':>12}")
    marks = np.linspace(0.0, args.t_end, 11)
    for t in marks:
        k = int(round(t / args.dt))
        print(f"{t:6.1f}  {joint[k]:10.4f}  {nominal[k]:10.4f}  {traj.W[k]:12.6f}")
    print(f"\nfinal joint norm   = {joint[-1]:.6f}")
    print(f"final nominal norm = {nominal[-1]:.6f}")
    print(f"slow tail state xs1 = {traj.states[-1, n]:.6f}")


if __name__ == "__main__":
    main()
