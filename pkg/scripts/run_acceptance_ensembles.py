"""Precompute (or refresh) the cached desk-scale ensembles used by the acceptance tests.

    python scripts/run_acceptance_ensembles.py [weakly-informative diffuse pooled bf]
"""
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import acceptance_support as acc  # noqa: E402


def main(argv):
    which = argv or ["weakly-informative", "diffuse", "pooled", "bf"]
    for name in which:
        t0 = time.perf_counter()
        if name == "bf":
            acc.bf_null_study(progress=lambda i, prior, rep: print(
                f"bf {i} {prior}: BF01 {rep.bf10.inverse.bf:.4g}", flush=True))
        else:
            acc.ensemble(name, progress=lambda f: print(
                f"{name} {f.index}: {f.seconds:.1f}s rank {f.ranks} R-hat {f.max_rhat:.3f} retries {f.retries}",
                flush=True))
        print(f"{name} done in {time.perf_counter() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
