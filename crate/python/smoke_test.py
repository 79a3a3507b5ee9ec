"""Smoke test for the idp_py extension module.

Uses an installed ``idp_py`` if importable; otherwise builds the extension
with cargo and loads it from the target directory.

    python3 python/smoke_test.py
"""

import importlib
import math
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        return importlib.import_module("idp_py")
    except ImportError:
        pass
    subprocess.run(["cargo", "build", "-p", "idp-py"], cwd=ROOT, check=True)
    built = ROOT / "target" / "debug" / "libidp_py.so"
    dest = Path(tempfile.mkdtemp(prefix="idp_py_"))
    shutil.copy(built, dest / ("idp_py" + sysconfig.get_config_var("EXT_SUFFIX")))
    sys.path.insert(0, str(dest))
    return importlib.import_module("idp_py")


def main():
    idp = load()

    # Full batch reduces to the plain Gaussian mechanism: alpha / (2 sigma^2).
    assert math.isclose(idp.rdp_sgm_step(1.0, 2.0, 8.0), 1.0, rel_tol=1e-12)

    q, steps, delta = 512 / 60000, 9375, 1e-5
    sigma = idp.get_noise(1.0, delta, q, steps, precision=1e-4)
    assert abs(sigma / 3.42529 - 1) < 0.02, sigma
    eps = idp.epsilon(q, sigma, steps, delta)
    assert 1.0 - 1e-4 <= eps <= 1.0, eps

    rate, saturated = idp.get_sample_rate(2.0, delta, sigma, steps)
    assert q < rate < 1 and not saturated

    groups = [("g1", 340, 1.0), ("g2", 430, 2.0), ("g3", 230, 3.0)]
    for method in ("sample", "scale", "combined"):
        params = idp.calibrate(groups, delta, method, 0.05, 200, 1.0, weight=0.5)
        rows = params.groups
        assert [r[0] for r in rows] == ["g1", "g2", "g3"]
        again = idp.Params.from_json(params.to_json())
        assert again.groups == rows

        ledger = idp.SpendLedger([r[0] for r in rows], delta, checkpoint_stride=20)
        for _ in range(params.steps):
            ledger.record_step([(r[0], r[3], r[4]) for r in rows])
        spent = ledger.current()
        for gid, _, budget, *_ in rows:
            assert abs(spent[gid] - budget) <= max(0.01, 0.01 * budget), (method, gid, spent[gid])
        assert ledger.to_csv().startswith("step,group_id,epsilon_spent,best_alpha")

    params = idp.calibrate(groups, delta, "scale", 0.05, 200, 1.0)
    result = idp.train_blobs(params, 500, 3.0, [("g1", 0.34), ("g2", 0.43), ("g3", 0.23)], 0.5, 1)
    assert result["accuracy"] > 0.8, result

    try:
        idp.calibrate([("a", 10, 0.5), ("b", 10, 500.0)], delta, "sample", 0.1, 50, 1.0)
    except idp.CalibrationError:
        pass
    else:
        raise AssertionError("expected CalibrationError")

    print(f"idp_py smoke test passed (sigma={sigma:.4f}, blobs accuracy={result['accuracy']:.3f})")


if __name__ == "__main__":
    main()
