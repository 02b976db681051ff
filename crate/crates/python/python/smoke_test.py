"""Smoke test for the hystereact extension module: build with `maturin develop`."""

import json
import math
import tempfile
from pathlib import Path

import hystereact as hr


def main():
    pair = hr.BranchPair.cubic()
    assert abs(pair.beta - hr.CUBIC_FOLD_U) < 1e-15 and pair.alpha == -pair.beta

    relay = hr.Relay(pair, g0=0.0, zeta0=1)
    assert [relay.update(g) for g in (0.2, 0.5, 0.0, -0.5, 0.1)] == [1, 2, 2, 1, 1]

    folds = hr.cubic_folds()
    assert folds["order"] == 2 and abs(folds["alpha"] + 0.3849002) < 1e-7

    n = 100
    x = [i / n for i in range(n + 1)]
    phi = [pair.alpha + 0.6 * (xi - 0.4) for xi in x]
    xi0 = [1 if i <= 40 else 2 for i in range(n + 1)]
    traj = hr.solve(phi, xi0, pair, dt=1e-4, t_end=0.01, save_stride=10, abar=0.4)
    assert traj.status == "completed", traj
    assert len(traj.u) == len(traj.times) == 11
    assert traj.track is not None and all(math.isfinite(b) for _, _, b in traj.track)

    rep = hr.verify_branch_condition(pair, 2, sigma=0.5)
    assert not rep["violated"] and math.isfinite(rep["m_estimate"])
    assert hr.verify_branch_condition(pair, 2, sigma=0.0)["violated"]

    cfg = {
        "problem": {"phi": {"affine": {"slope": 0.6, "intercept": "alpha", "at": 0.4}}, "abar": 0.4},
        "solver": {"n_cells": 50, "dt": 1e-4, "t_end": 0.005},
    }
    with tempfile.TemporaryDirectory() as d:
        code = hr.run_experiment("simulate", json.dumps(cfg), d)
        assert code == 0
        assert (Path(d) / "manifest.txt").read_text().splitlines()[1] == f"library_version {hr.__version__}"
    print("smoke test passed")


if __name__ == "__main__":
    main()
