"""Regenerate the frozen accountant oracle values in data/sgm_rdp_oracle.json.

Slow (minutes): high-precision quadrature for every order of the default grid.
Run with ``python tests/gen_oracle_values.py``.
"""

import json
from pathlib import Path

from oracles import mp_eps_dp, mp_sgm_rdp

ALPHAS = [1.25, 1.5, 1.75, *map(float, range(2, 65)), 128.0, 256.0]
Q, SIGMA, STEPS, DELTA = 64 / 600, 2.0, 200, 1e-3


def main():
    curve = {a: mp_sgm_rdp(Q, SIGMA, a) for a in ALPHAS}
    out = {
        "q": Q,
        "sigma": SIGMA,
        "alphas": ALPHAS,
        "eps_per_step": [curve[a] for a in ALPHAS],
        "steps": STEPS,
        "delta": DELTA,
        "epsilon_composed": mp_eps_dp({a: STEPS * r for a, r in curve.items()}, DELTA),
    }
    path = Path(__file__).parent / "data" / "sgm_rdp_oracle.json"
    path.write_text(json.dumps(out, indent=1) + "\n")
    print(path, out["epsilon_composed"])


if __name__ == "__main__":
    main()
