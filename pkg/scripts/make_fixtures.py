#!/usr/bin/env python3
"""Regenerate the committed reference runs under tests/fixtures/.

The acceptance suite compares live runs against these frozen values, so only
regenerate them deliberately (e.g. after an intentional change to the
generator or the training defaults) and review the diff.
"""

import json
import os
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))
sys.path.insert(0, str(REPO / "scripts"))

from run_benchmark import run_ablation, run_smoke  # noqa: E402

FIXTURES = REPO / "tests" / "fixtures"


def mining_reference(workdir):
    from latentproto.synthdata import score_mining

    env = dict(os.environ, LATENTPROTO_DETERMINISTIC="1")

    def cli(*args):
        subprocess.run([sys.executable, "-m", "latentproto.cli", *map(str, args)],
                       check=True, env=env, stdout=subprocess.DEVNULL)

    data, pseudo = Path(workdir) / "data", Path(workdir) / "pseudo"
    cli("synth", "--out", data, "--images", 60, "--size", 96, "--seed", 0)
    cli("mine", "--data", data, "--fold", -1, "--clusters", 2, "--seed", 0,
        "--out", pseudo)
    report = score_mining(pseudo, data)
    return {
        "config": {
            "dataset": "synth --images 60 --size 96 --seed 0 (2 base, 2 latent)",
            "mine": "--fold -1 --clusters 2 --seed 0",
            "deterministic": True,
        },
        "per_class": {str(k): v for k, v in report["per_class"].items()},
        "min_purity": report["min_purity"],
        "min_coverage": report["min_coverage"],
        "thresholds": {"purity": 0.8, "coverage": 0.7},
    }


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        mining = mining_reference(Path(tmp) / "mining")
        (FIXTURES / "mining_reference.json").write_text(
            json.dumps(mining, indent=2, sort_keys=True) + "\n")
        print(f"mining_reference.json: min purity {mining['min_purity']:.3f}, "
              f"min coverage {mining['min_coverage']:.3f}")

        ablation = run_ablation(Path(tmp) / "ablation")
        smoke = run_smoke(Path(tmp) / "smoke")
        smoke["thresholds"] = {"trained_vs_untrained": 0.10}
        bench = {"ablation": ablation, "smoke": smoke}
        (FIXTURES / "benchmark_reference.json").write_text(
            json.dumps(bench, indent=2, sort_keys=True) + "\n")
        print("benchmark_reference.json written")
    return 0


if __name__ == "__main__":
    sys.exit(main())
