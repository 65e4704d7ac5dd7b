"""Trace the roots-of-unity maximal branch upward in lambda until Newton fails.

Starting deep in the large-volume regime, lambda is raised geometrically and
the previous solution seeds the next one; the last converged value brackets
the turning point of the branch.  The bracket is then bisected.

    python3 scripts/fold_scan.py --N 4 --resolution 128
"""

import argparse

from ebsphere import pde_solver as pde
from ebsphere.errors import SolverError
from ebsphere.model import Divisor, ModelParams, lambda_critical
from ebsphere.sphere_grid import build_grid, higgs_data


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=4)
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--start", type=float, default=1 / 8, help="first lambda as a fraction of lambda_c")
    ap.add_argument("--growth", type=float, default=1.15)
    ap.add_argument("--bisect", type=int, default=8)
    args = ap.parse_args()

    p = ModelParams.compact(1.0, args.N)
    lc = lambda_critical(p)
    g = build_grid(args.resolution, 1.2)
    hd = higgs_data(Divisor.roots_of_unity(args.N), g)
    lam = args.start * lc
    sol = pde.newton_solve(pde.singular_limit_guess(hd, lam, p), lam, hd, p)
    print(f"lambda_c = {lc:.6f}")
    while True:
        print(f"lambda = {sol.lam:.6f} ({sol.lam / lc:.4f} lambda_c)  volume {sol.volume:9.4f}  "
              f"sup Phi {sol.Phi.sup():.5f}  iterations {sol.iterations}")
        nxt = sol.lam * args.growth
        try:
            sol = pde.newton_solve(sol.v, nxt, hd, p)
        except SolverError:
            break
    lo, hi, base = sol.lam, nxt, sol
    for _ in range(args.bisect):
        mid = 0.5 * (lo + hi)
        try:
            base = pde.newton_solve(base.v, mid, hd, p)
            lo = mid
        except SolverError:
            hi = mid
    print(f"fold bracket [{lo:.6f}, {hi:.6f}] = [{lo / lc:.4f}, {hi / lc:.4f}] lambda_c, "
          f"volume at lower end {base.volume:.4f}")


if __name__ == "__main__":
    main()
