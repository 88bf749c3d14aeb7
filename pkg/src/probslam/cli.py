"""Command-line entry point: ``probslam <command> ...``.

Every command stages its outputs in memory and commits them at the end
with write-to-temp-then-rename, so a failing run leaves no partial files.
Each run also writes a JSON manifest; wall-clock timings live in its
``timings_ms`` section, everything else is deterministic.
"""

import argparse
import json
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from probslam import __version__
from probslam.ba import format_problem, read_problem
from probslam.dataset import (
    DEFAULT_MAX_DT,
    associate,
    format_detections,
    format_tum_trajectory,
    read_detections,
    read_tum_trajectory,
)
from probslam.errors import ProbSlamError
from probslam.evaluation import ate, format_series_csv, format_summary_csv, rpe
from probslam.pipeline import StageTimer, compare, estimated_trajectory, frame_maps_for, solve_frames
from probslam.probmap import build_map, render_pgm
from probslam.simulator import (
    build_problem,
    contaminate_as_static,
    format_config,
    generate,
    parse_config,
)


class _Outputs:
    """Files staged in memory, committed atomically one by one."""

    def __init__(self):
        self.files = {}

    def add(self, path, data):
        self.files[Path(path)] = data.encode("utf-8") if isinstance(data, str) else data

    def commit(self):
        for path, data in self.files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


def _versions():
    return {"probslam": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _manifest(command, config, inputs, outputs, seed, timer):
    doc = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(p) for p in outputs),
        "seed": seed,
        "versions": _versions(),
        "timings_ms": {k: round(max(v, 0.0), 3) for k, v in timer.totals.items()},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _read_text(path):
    return Path(path).read_text(encoding="utf-8")


def _timed(timer, stage, fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    timer.add(stage, time.perf_counter() - t0)
    return out


def cmd_simulate(args):
    timer = StageTimer()
    config = parse_config(_read_text(args.config))
    # the emitted problems treat moving landmarks as static, like the pipeline
    scene = _timed(timer, "simulate", lambda: contaminate_as_static(generate(config)))
    problem = build_problem(scene)
    out = Path(args.out)
    files = _Outputs()
    t0 = time.perf_counter()
    files.add(out / "config.txt", format_config(config))
    files.add(out / "gt.txt", format_tum_trajectory(scene.ground_truth))
    files.add(out / "detections.jsonl", format_detections(scene.detections))
    files.add(out / "problem.txt", format_problem(problem))
    for fid, sub in problem.split_frames().items():
        files.add(out / "problems" / f"frame_{fid:06d}.txt", format_problem(sub))
    timer.add("write", time.perf_counter() - t0)
    files.add(
        out / "manifest.json",
        _manifest("simulate", {"config": format_config(config)}, {"config": args.config},
                  files.files, config.seed, timer),
    )
    files.commit()
    return 0


def cmd_probmap(args):
    timer = StageTimer()
    frames = read_detections(_read_text(args.detections))
    pairs = associate([args.frame], [fr.timestamp for fr in frames], args.max_dt)
    if not pairs:
        raise KeyError(f"no detection frame within {args.max_dt} s of t = {args.frame}")
    frame = frames[pairs[0][1]]
    pmap = _timed(timer, "probmap", build_map, frame.detections, frame.width, frame.height)
    files = _Outputs()
    files.add(args.out, render_pgm(pmap))
    config = {"frame": args.frame, "matched_timestamp": frame.timestamp, "max_dt": args.max_dt}
    files.add(
        f"{args.out}.manifest.json",
        _manifest("probmap", config, {"detections": args.detections}, files.files, None, timer),
    )
    files.commit()
    return 0


def cmd_solve(args):
    timer = StageTimer()
    problem = _timed(timer, "load", read_problem, _read_text(args.problem))
    detections = None
    if args.uniform_weights:
        problem = problem.with_weights(np.ones(len(problem.observations)))
    elif args.detections:
        frames = read_detections(_read_text(args.detections))
        detections = frame_maps_for(problem, frames, max_dt=args.max_dt)
    solved, reports = solve_frames(problem, detections, workers=args.workers, timer=timer)
    files = _Outputs()
    files.add(args.out, format_tum_trajectory(estimated_trajectory(solved)))
    config = {
        "uniform_weights": args.uniform_weights,
        "workers": args.workers,
        "max_dt": args.max_dt,
        "terminations": {str(f): r.termination.value for f, r in sorted(reports.items())},
    }
    inputs = {"problem": args.problem}
    if args.detections:
        inputs["detections"] = args.detections
    files.add(f"{args.out}.manifest.json", _manifest("solve", config, inputs, files.files, None, timer))
    files.commit()
    return 0


def _eval_files(files, out, prefix, reference, estimate, delta, with_scale):
    a_series, a_sum = ate(reference, estimate, with_scale=with_scale)
    (t_series, t_sum), (r_series, r_sum) = rpe(reference, estimate, delta)
    files.add(out / f"{prefix}ate.csv", format_series_csv(a_series))
    files.add(out / f"{prefix}rpe_trans.csv", format_series_csv(t_series))
    files.add(out / f"{prefix}rpe_rot.csv", format_series_csv(r_series))
    return [(f"{prefix}ate", a_sum), (f"{prefix}rpe_trans", t_sum), (f"{prefix}rpe_rot", r_sum)]


def cmd_eval(args):
    timer = StageTimer()
    reference = read_tum_trajectory(_read_text(args.ref))
    estimate = read_tum_trajectory(_read_text(args.est))
    out = Path(args.out)
    files = _Outputs()
    t0 = time.perf_counter()
    rows = _eval_files(files, out, "", reference, estimate, args.rpe_delta, args.scale)
    timer.add("eval", time.perf_counter() - t0)
    files.add(out / "summary.csv", format_summary_csv(rows))
    config = {"scale": args.scale, "rpe_delta": args.rpe_delta}
    files.add(
        out / "manifest.json",
        _manifest("eval", config, {"ref": args.ref, "est": args.est}, files.files, None, timer),
    )
    files.commit()
    return 0


def cmd_pipeline(args):
    config = parse_config(_read_text(args.config))
    result = compare(config, workers=args.workers, rpe_delta=args.rpe_delta)
    timer = result.timer
    out = Path(args.out)
    files = _Outputs()
    t0 = time.perf_counter()
    truth = result.scene.ground_truth
    files.add(out / "gt.txt", format_tum_trajectory(truth))
    rows = []
    for variant in (result.weighted, result.uniform):
        files.add(out / f"{variant.name}.txt", format_tum_trajectory(variant.trajectory))
        rows += [
            (f"{variant.name}_ate", variant.ate[1]),
            (f"{variant.name}_rpe_trans", variant.rpe_translation[1]),
            (f"{variant.name}_rpe_rot", variant.rpe_rotation[1]),
        ]
    files.add(out / "comparison.csv", format_summary_csv(rows))
    timer.add("write", time.perf_counter() - t0)
    echo = {"config": format_config(config), "rpe_delta": args.rpe_delta, "workers": args.workers,
            "improvement": round(result.improvement, 9)}
    files.add(
        out / "manifest.json",
        _manifest("pipeline", echo, {"config": args.config}, files.files, config.seed, timer),
    )
    files.commit()
    return 0


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="probslam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("probmap", help="render the probability map of one frame as PGM")
    p.add_argument("--detections", required=True)
    p.add_argument("--frame", required=True, type=float, help="frame timestamp in seconds")
    p.add_argument("--max-dt", type=float, default=DEFAULT_MAX_DT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probmap)

    p = sub.add_parser("solve", help="solve a pose-only BA problem frame by frame")
    p.add_argument("--problem", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--detections")
    group.add_argument("--uniform-weights", action="store_true")
    p.add_argument("--max-dt", type=float, default=DEFAULT_MAX_DT)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out", required=True, help="estimated TUM trajectory")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="ATE and RPE of an estimate against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--scale", action="store_true", help="similarity instead of rigid alignment")
    p.add_argument("--rpe-delta", type=_positive_int, default=1, help="frame offset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="simulate, solve weighted and uniform, compare")
    p.add_argument("--config", required=True)
    p.add_argument("--rpe-delta", type=_positive_int, default=1)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ProbSlamError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        text = " ".join(str(msg).split())
        print(f"probslam {args.command}: error: {type(exc).__name__}: {text}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
