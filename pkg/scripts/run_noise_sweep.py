"""Sweep direction-noise sigma and report how grounding precision degrades.

Scenes are regenerated per sigma from the same seed, so the geometry (boxes,
targets, distractors) is identical across the sweep and only the stored
pointing direction moves. Whatever precision loss shows up is attributable to
angular noise alone.

Example:
    python3 scripts/run_noise_sweep.py --count 500 --sigmas 0,0.05,0.1,0.2
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from deixis.evaluation import MetricsReport, RunSettings, run_task
from deixis.schema import TASK_CLI_NAMES, load_dataset
from deixis.synth import SceneConfig, generate_fixture_set


@dataclass(frozen=True)
class SweepConfig:
    sigmas: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    count: int = 500
    seed: int = 42
    tau: float = 0.4
    task: str = "pog"


def run_sweep(config: SweepConfig, workdir: Path) -> list[tuple[float, MetricsReport]]:
    task = TASK_CLI_NAMES[config.task]
    settings = RunSettings(engine="svcot", verifier="mock", direction="fixture_gt", tau=config.tau)
    results = []
    for sigma in config.sigmas:
        stage = workdir / f"sigma_{sigma:g}"
        scene_config = SceneConfig(seed=config.seed, direction_noise_sigma=sigma)
        data_path, _ = generate_fixture_set(scene_config, config.count, stage / "scenes.json")
        loaded = load_dataset(data_path)
        assert not loaded.issues
        _, _, report = run_task(
            loaded.samples, task, settings, stage / "run", data_path=str(data_path)
        )
        results.append((sigma, report))
    return results


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sigmas", default="0,0.05,0.1,0.2", help="comma-separated radians")
    parser.add_argument("--count", type=int, default=500, help="scenes per sigma")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--tau", type=float, default=0.4)
    parser.add_argument("--task", choices=("edg", "pog"), default="pog")
    parser.add_argument("--out", type=Path, help="keep artifacts here instead of a temp dir")
    parser.add_argument("--json", type=Path, help="also write the table as JSON")
    args = parser.parse_args(argv)

    config = SweepConfig(
        sigmas=tuple(float(s) for s in args.sigmas.split(",")),
        count=args.count,
        seed=args.seed,
        tau=args.tau,
        task=args.task,
    )
    if args.out is not None:
        workdir = args.out
        workdir.mkdir(parents=True, exist_ok=True)
        results = run_sweep(config, workdir)
    else:
        with tempfile.TemporaryDirectory(prefix="noise_sweep_") as tmp:
            results = run_sweep(config, Path(tmp))

    print(f"task={config.task} tau={config.tau} count={config.count} seed={config.seed}")
    print(f"{'sigma':>8}  {'P@0.3':>7}  {'P@0.5':>7}  {'P@0.7':>7}  {'mean IoU':>8}  {'reject':>7}")
    rows = []
    for sigma, report in results:
        p = report.precision_at or {}
        rej = report.rejection_accuracy
        print(
            f"{sigma:>8g}  {p.get('0.3', float('nan')):>7.4f}  {p.get('0.5', float('nan')):>7.4f}"
            f"  {p.get('0.7', float('nan')):>7.4f}  {report.iou_avg or float('nan'):>8.4f}"
            f"  {'-' if rej is None else f'{rej:.4f}':>7}"
        )
        rows.append({"sigma": sigma, **report.to_dict()})
    if args.json is not None:
        args.json.write_text(json.dumps(rows, indent=2) + "\n")
        print(f"wrote {args.json}")

    at_half = [r.precision_at["0.5"] for _, r in results if r.precision_at]
    if at_half != sorted(at_half, reverse=True):
        print("warning: P@0.5 is not monotone over this sweep", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
