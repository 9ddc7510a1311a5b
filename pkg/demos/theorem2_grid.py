"""Solve for the gauge function that removes H0 when A = 0, and watch it converge.

The scalar phi solves 2 d_- phi = H0 - H1 phi + Lambda phi^2 - |grad phi|^2
with phi = 0 on the base slice.  On successively refined grids the
remaining sup |H~0| falls by roughly a factor of four, as expected from a
second-order scheme.

Run:  python3 demos/theorem2_grid.py
"""

from walkerlab import transform as tr
from walkerlab.walker import WalkerMetric


def main():
    w = WalkerMetric(["u", "v"], [["1+0.1*u^2", "0"], [None, "1"]], ["0", "0"],
                     "xp*0.2*u + 0.2*sin(u+xm)*cos(v)", lam=0.0, name="demo")
    previous = None
    for nodes, steps in ((17, 16), (33, 32), (65, 64)):
        res = tr.theorem2_phi(w, 0.0, tr.Grid([(-1, 1), (-1, 1)], nodes), steps, build_map=False,
                              richardson=False)
        ratio = "" if previous is None else f"  (ratio {previous / res.residual_sup:.2f})"
        print(f"{nodes:3d} nodes, {steps:3d} steps: sup|H~0| = {res.residual_sup:.3e}{ratio}")
        previous = res.residual_sup


if __name__ == "__main__":
    main()
