"""Command-line front end: synth, validate, run, score, render."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .evaluation import (
    METADATA_NAME,
    REPORT_NAME,
    RunSettings,
    load_records,
    render_overlays,
    run_task,
    score_run,
)
from .geometry import CoordinateMode
from .schema import TASK_CLI_NAMES, DatasetError, load_dataset, expand_cases
from .scorers import ChatClient, EndpointConfig, PromptError
from .synth import SceneConfig, SceneGenerationError, generate_fixture_set, load_sidecar


class CliError(Exception):
    """A configuration problem the user must fix; maps to exit code 2."""


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except ValueError as exc:
        raise CliError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"config file {p} must hold a JSON object")
    return doc


def _pick(flag, cfg: dict, key: str, default):
    """Precedence: command-line flag, then config file, then the default."""
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config_file(args.config)
    if args.count < 1:
        raise CliError(f"--count must be >= 1, got {args.count}")
    try:
        scene_config = SceneConfig(
            seed=_pick(args.seed, cfg, "seed", 0),
            width=_pick(args.width, cfg, "width", 640),
            height=_pick(args.height, cfg, "height", 480),
            n_candidates_mean=_pick(args.candidates_mean, cfg, "n_candidates_mean", 2.8),
            same_category_rate=_pick(args.same_category_rate, cfg, "same_category_rate", 0.637),
            negative_rate=_pick(args.negative_rate, cfg, "negative_rate", 0.1415),
            direction_noise_sigma=_pick(args.noise_sigma, cfg, "direction_noise_sigma", 0.0),
            occlusion_rate=_pick(args.occlusion_rate, cfg, "occlusion_rate", 0.425),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    try:
        data_path, sidecar_path = generate_fixture_set(scene_config, args.count, args.out)
    except SceneGenerationError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return 1
    sidecar = load_sidecar(data_path)
    n = len(sidecar)
    negatives = sum(1 for v in sidecar.values() if v["construction"]["negative"])
    positives = n - negatives
    mean_objects = sum(v["construction"]["n_objects"] for v in sidecar.values()) / n
    same_cat = sum(1 for v in sidecar.values() if v["construction"]["same_category"])
    print(f"wrote {n} scenes to {data_path} (+ {sidecar_path.name})")
    print(f"  candidate mean     {mean_objects:.3f}  (configured {scene_config.n_candidates_mean})")
    print(f"  negative rate      {negatives / n:.4f}  (configured {scene_config.negative_rate})")
    if positives:
        print(
            f"  same-category rate {same_cat / positives:.4f}  "
            f"(configured {scene_config.same_category_rate}, over positives)"
        )
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    loaded = load_dataset(args.data)
    print(f"{len(loaded.samples)} samples, {len(loaded.issues)} issues")
    for sid, problem in loaded.issues[:50]:
        print(f"  [{sid}] {problem}")
    if len(loaded.issues) > 50:
        print(f"  ... and {len(loaded.issues) - 50} more")
    for cli_name, task in TASK_CLI_NAMES.items():
        cases, skips = expand_cases(loaded.samples, task)
        skipnote = ", ".join(f"{k}={v}" for k, v in skips.items() if v)
        print(f"  {cli_name}: {len(cases)} cases" + (f" ({skipnote})" if skipnote else ""))
    return 0


def _build_client(args: argparse.Namespace, cfg: dict) -> ChatClient | None:
    needs_remote = (
        args.engine == "direct" or args.verifier == "remote" or args.direction == "remote"
    )
    if not needs_remote:
        return None
    try:
        endpoint = EndpointConfig.from_env(
            base_url=_pick(args.api_base, cfg, "api_base", None),
            api_key=_pick(args.api_key, cfg, "api_key", None),
            model=_pick(args.model, cfg, "model", "default"),
            timeout=_pick(args.timeout, cfg, "timeout", 60.0),
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return ChatClient(endpoint)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config_file(args.config)
    args.engine = _pick(args.engine, cfg, "engine", "svcot")
    args.verifier = _pick(args.verifier, cfg, "verifier", "mock")
    args.direction = _pick(args.direction, cfg, "direction", "fixture_gt")
    task = TASK_CLI_NAMES[args.task]
    client = _build_client(args, cfg)
    mode_name = _pick(args.mode, cfg, "mode", None)
    settings = RunSettings(
        engine=args.engine,
        verifier=args.verifier,
        direction=args.direction,
        tau=_pick(args.tau, cfg, "tau", 0.5),
        cone_half_angle=_pick(args.cone, cfg, "cone_half_angle", 0.0),
        model_family=_pick(args.model_family, cfg, "model_family", "qwen3_vl"),
        coordinate_mode=None if mode_name is None else CoordinateMode(mode_name),
        workers=_pick(args.workers, cfg, "workers", 4 if args.engine == "direct" else 1),
        seed=_pick(args.seed, cfg, "seed", 0),
        client=client,
    )
    loaded = load_dataset(args.data)
    samples = loaded.samples
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if not samples:
        raise CliError(f"no samples in split {args.split!r} of {args.data}")
    try:
        metadata, records_path, report = run_task(
            samples,
            task,
            settings,
            args.out,
            data_path=str(args.data),
            start=args.start,
            end=args.end,
        )
    except (ValueError, PromptError) as exc:
        raise CliError(str(exc)) from exc
    print(f"{metadata.scorer_id} on {args.task}: {metadata.sample_count} considered")
    print(f"  parsed_ok={metadata.parsed_ok} skips={metadata.skips} errors={metadata.errors}")
    for key, value in report.to_dict().items():
        if key != "task" and value is not None:
            print(f"  {key}: {value}")
    print(f"  records: {records_path}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    try:
        report, serialized = score_run(run_dir)
    except (FileNotFoundError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return 1
    report_path = run_dir / REPORT_NAME
    previous = report_path.read_text() if report_path.exists() else None
    report_path.write_text(serialized)
    state = "unchanged" if previous == serialized else "rewritten"
    print(f"report {state}: {report_path}")
    for key, value in report.to_dict().items():
        if key != "task" and value is not None:
            print(f"  {key}: {value}")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    try:
        records = load_records(run_dir)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    loaded = load_dataset(args.data)
    samples = {s.sample_id: s for s in loaded.samples}
    meta_path = run_dir / METADATA_NAME
    scorer = "run"
    if meta_path.exists():
        scorer = json.loads(meta_path.read_text()).get("scorer_id", "run")
    image_root = Path(args.data).parent
    out = render_overlays(records, samples, run_dir, scorer, image_root=image_root)
    print(f"rendered {len(records)} overlays under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deixis",
        description="Grounding engine and benchmark harness for pointing-based referring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fixture set")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--candidates-mean", dest="candidates_mean", type=float)
    p.add_argument("--same-category-rate", dest="same_category_rate", type=float)
    p.add_argument("--negative-rate", dest="negative_rate", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--occlusion-rate", dest="occlusion_rate", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="load a dataset and report invariant issues")
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute a task over a dataset")
    p.add_argument("--task", choices=sorted(TASK_CLI_NAMES), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--engine", choices=("svcot", "direct"))
    p.add_argument("--verifier", choices=("mock", "remote"))
    p.add_argument(
        "--direction", choices=("fixture_gt", "keypoint_heuristic", "remote")
    )
    p.add_argument("--tau", type=float)
    p.add_argument("--cone", type=float)
    p.add_argument("--mode", choices=[m.value for m in CoordinateMode])
    p.add_argument("--model-family", dest="model_family")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--end", type=int, default=-1)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--api-base", dest="api_base")
    p.add_argument("--api-key", dest="api_key")
    p.add_argument("--model")
    p.add_argument("--timeout", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", help="recompute a run's report from its records")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("render", help="draw overlay images for a finished run")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
