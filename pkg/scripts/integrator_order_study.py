#!/usr/bin/env python3
"""Convergence-order study for the fixed-step integrator.

Integrates x' = -x over [0, 1] at a ladder of step sizes and reports the
error against the exact exponential together with the dt-halving ratio
(classical RK4 should sit near 16).
"""

import numpy as np

from nisyn.sim import integrate


def main() -> None:
    dts = [0.2 / 2 ** k for k in range(6)]
    errors = []
    print(f"{'dt':>10}  {'error':>12}  {'ratio':>7}")
    for dt in dts:
        traj = integrate(lambda x, u: -x, [1.0], 1.0, dt)
        err = abs(traj.states[-1, 0] - np.exp(-1.0))
        ratio = errors[-1] / err if errors else float("nan")
        errors.append(err)
        print(f"{dt:10.5f}  {err:12.4e}  {ratio:7.2f}")


if __name__ == "__main__":
    main()
