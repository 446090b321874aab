"""Regenerate the committed golden files for the CLI determinism tests.

Run from the repository root:  python3 tests/make_goldens.py
Outputs land in tests/golden/; review diffs before committing.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

GOLDEN = Path(__file__).parent / "golden"


def cli(*args: str, cwd=None) -> None:
    result = subprocess.run(
        [sys.executable, "-m", "owssl", *args], cwd=cwd, capture_output=True, text=True
    )
    if result.returncode != 0:
        raise RuntimeError(f"owssl {' '.join(args)} failed: {result.stderr}")


def main() -> None:
    from owssl.cli import write_labels, write_matrix, write_prior
    from owssl.core import ClassPrior

    GOLDEN.mkdir(exist_ok=True)

    # solve: the K=2, N=3 conditional fixture (one labeled class-0 column)
    solve = GOLDEN / "solve"
    solve.mkdir(exist_ok=True)
    write_matrix(solve / "p.csv", np.array([[0.7, 0.9, 0.2], [0.3, 0.1, 0.8]]))
    write_prior(solve / "prior.csv", ClassPrior.uniform(2))
    write_labels(solve / "labels.csv", np.array([0]))
    cli(
        "solve",
        "--input", str(solve / "p.csv"),
        "--prior", str(solve / "prior.csv"),
        "--labels", str(solve / "labels.csv"),
        "--out", str(solve / "q.csv"),
        "--report", str(solve / "report.json"),
        "--epsilon", "0.1",
    )

    # theory: the K=2 worked population
    theory = GOLDEN / "theory"
    theory.mkdir(exist_ok=True)
    cli(
        "theory",
        "--prior-labeled", "0.5,0.5",
        "--prior-unlabeled", "0.3,0.7",
        "--n-labeled", "20",
        "--n-unlabeled", "100",
        "--trials", "20000",
        "--seed", "7",
        "--out", str(theory / "report.json"),
    )

    # gen-data + train share a small config
    config = {
        "schema_version": 1,
        "dataset": {
            "k_total": 4,
            "feature_dim": 6,
            "samples_per_class": 20,
            "cluster_separation": 8.0,
            "seed": 11,
        },
        "train": {"epochs": 3, "batch_size": 32, "local_views": 1, "seed": 11},
    }
    for sub in ("gen_data", "train"):
        (GOLDEN / sub).mkdir(exist_ok=True)
    (GOLDEN / "run_config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    cli("gen-data", "--config", str(GOLDEN / "run_config.json"), "--outdir", str(GOLDEN / "gen_data"))
    cli(
        "train",
        "--config", str(GOLDEN / "run_config.json"),
        "--outdir", str(GOLDEN / "train"),
        "--emit-plot-data",
    )

    # eval: fixture with a permuted novel pair
    ev = GOLDEN / "eval"
    ev.mkdir(exist_ok=True)
    write_labels(ev / "truth.csv", np.array([0, 0, 1, 1, 2, 2, 3, 3]))
    write_labels(ev / "pred.csv", np.array([0, 0, 1, 1, 3, 3, 2, 2]))
    cli(
        "eval",
        "--pred", str(ev / "pred.csv"),
        "--truth", str(ev / "truth.csv"),
        "--k-total", "4",
        "--seen", "0,1",
        "--out", str(ev / "metrics.json"),
    )

    print(f"golden files written under {GOLDEN}")


if __name__ == "__main__":
    main()
