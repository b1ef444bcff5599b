"""End-to-end walkthrough: synth, validate, run all four tasks, score, render.

Runs the exact CLI commands a user would type, against a small synthetic
fixture set, and leaves every artifact under --out for inspection. With the
mock verifier and stored directions this finishes in a few seconds and the
pointing tasks should ground essentially everything.

Example:
    python3 scripts/run_demo.py --out /tmp/deixis_demo
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from deixis.cli import main as deixis


def step(*argv: object) -> None:
    rendered = " ".join(str(a) for a in argv)
    print(f"\n$ deixis {rendered}")
    code = deixis([str(a) for a in argv])
    if code != 0:
        sys.exit(f"command failed with exit code {code}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("demo_out"))
    parser.add_argument("--count", type=int, default=80, help="number of scenes")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--tau", type=float, default=0.4)
    parser.add_argument(
        "--noise-sigma", type=float, default=0.0, help="direction noise in radians"
    )
    args = parser.parse_args(argv)

    out = args.out
    data = out / "scenes.json"
    step("synth", "--count", args.count, "--seed", args.seed,
         "--noise-sigma", args.noise_sigma, "--out", data)
    step("validate", "--data", data)
    for task in ("edg", "drec", "pog", "dvqa"):
        step("run", "--task", task, "--data", data, "--out", out / f"run_{task}",
             "--tau", args.tau)
        step("score", "--run", out / f"run_{task}")
    step("render", "--run", out / "run_pog", "--data", data)

    print(f"\nartifacts under {out}/: scenes.json, run_<task>/, run_pog/visualize/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
