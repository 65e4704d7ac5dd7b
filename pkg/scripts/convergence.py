"""Grid refinement of the symmetric N=2 solution against the ODE profile.

    python3 scripts/convergence.py --resolutions 64 128 256
"""

import argparse
import time

import numpy as np

from ebsphere import diagnostics as dg
from ebsphere import ode_solver as od
from ebsphere import pde_solver as pde
from ebsphere.model import Divisor, ModelParams
from ebsphere.sphere_grid import build_grid, higgs_data


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolutions", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--b", type=float, default=1.0)
    args = ap.parse_args()

    p = ModelParams.compact(1.0, 2)
    prof = od.shoot_compact(args.b, p)
    prev = None
    print(f"{'n':>5} {'sup|v - v_ode|':>15} {'ratio':>6} {'GB defect':>10} {'flux rel':>9} {'sec':>6}")
    for n in args.resolutions:
        g = build_grid(n, 1.2)
        hd = higgs_data(Divisor.polystable_pair(1), g)
        guess = pde.ode_transfer_guess(prof, hd, p)
        t0 = time.perf_counter()
        sol = pde.newton_solve(guess, 2 * prof.lam, hd, p)
        dt = time.perf_counter() - t0
        err = float(np.max(np.abs(sol.v.values - guess.values)[:, g.active]))
        gb = dg.gauss_bonnet(sol)["gauss_bonnet_defect"]
        fl = dg.flux_identities(sol)["flux_defect_rel"]
        ratio = f"{prev / err:6.2f}" if prev else "     -"
        print(f"{n:5d} {err:15.3e} {ratio} {gb:10.2e} {fl:9.2e} {dt:6.1f}")
        prev = err


if __name__ == "__main__":
    main()
