"""optsig: embed, simulate, verify, sweep and lsh-analyze.

Exit codes: 0 success / authentic, 1 falsified, 2 inconclusive, 3 pipeline failure
(localization, sync, out of view), 4 usage or input error.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from termcolor import colored

from optical_signature import artifacts, config, pipeline
from optical_signature.channel_sim import load_frames, load_scene, save_frames, save_scene
from optical_signature.descriptor import date_code, load_key
from optical_signature.errors import InvalidArgumentError, OpticalSignatureError
from optical_signature.modulation import load_schedules
from optical_signature.tracks import ingest_track
from optical_signature.verifier import AUTHENTIC, FALSIFIED, verify

logger = logging.getLogger("optical_signature")

EXIT_OK = 0
EXIT_FALSIFIED = 1
EXIT_INCONCLUSIVE = 2
EXIT_PIPELINE_FAILURE = 3
EXIT_USAGE = 4

_VERDICT_COLORS = {AUTHENTIC: "green", FALSIFIED: "red"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path: Optional[str], flag: str):
    if path is not None and not os.path.exists(path):
        raise InvalidArgumentError(f"{flag} {path} does not exist")


def cmd_embed(args) -> int:
    _require(args.track, "--track")
    _require(args.scene, "--scene")
    key = load_key(args.key)
    track = ingest_track(args.track)
    scene = load_scene(args.scene)
    date = date_code(args.date) if args.date else date_code()
    cfg = pipeline.EmbedConfig(unit_id=args.unit_id, date=date, scene=scene, seed=args.seed,
                               adaptive=not args.no_adapt)
    result = pipeline.embed(track, key, cfg, progress=True)
    os.makedirs(args.out, exist_ok=True)
    pipeline.write_embed(result, args.out, write_bitmaps=not args.no_bitmaps)
    artifacts.write_json_append_only(args.out, "run_config", pipeline.run_config(
        "embed", track=args.track, key=args.key or os.environ.get(config.KEY_ENV_VAR),
        scene=args.scene, seed=args.seed, unit_id=args.unit_id, date=date,
        adaptive=not args.no_adapt))
    print(f"Embedded {len(result.records)} windows into {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    _require(args.schedules, "--schedules")
    _require(args.scene, "--scene")
    schedules = load_schedules(args.schedules)
    scene = load_scene(args.scene)
    frames = pipeline.simulate(schedules, scene, args.seed, args.degrade or (), progress=True)
    save_frames(frames, args.out, progress=True)
    save_scene(scene, os.path.join(args.out, "scene.yaml"))
    artifacts.write_json_append_only(args.out, "run_config", pipeline.run_config(
        "simulate", schedules=args.schedules, scene=args.scene, seed=args.seed,
        degrade=list(args.degrade or ())))
    print(f"Wrote {len(frames)} frames at {frames.fps:g} fps to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    _require(args.frames, "--frames")
    _require(args.track, "--track")
    key = load_key(args.key)
    track = ingest_track(args.track)
    frames = load_frames(args.frames, progress=True)
    report = verify(frames, track, key, out_dir=args.out, frame_budget=args.frame_budget,
                    progress=True)
    artifacts.write_json_append_only(args.out, "run_config", pipeline.run_config(
        "verify", frames=args.frames, track=args.track,
        key=args.key or os.environ.get(config.KEY_ENV_VAR), frame_budget=args.frame_budget))
    for w in report.windows:
        print(f"  window {w.index:3d}  no={w.window_no}  mac={'ok' if w.mac_valid else 'bad'}  "
              f"dyn={w.dyn_distance}  id={w.id_distance}  {w.status}")
    if report.unverified_lead_s > 0 or report.unverified_tail_s > 0:
        print(f"  unverifiable: first {report.unverified_lead_s:.1f} s, "
              f"last {report.unverified_tail_s:.1f} s")
    line = f"Decision: {report.decision.upper()}"
    if report.failure_reason:
        line += f" ({report.failure_reason} failure)"
    print(colored(line, _VERDICT_COLORS.get(report.decision, "yellow"), attrs=["bold"]))
    if report.failure_reason:
        return EXIT_PIPELINE_FAILURE
    if report.decision == AUTHENTIC:
        return EXIT_OK
    if report.decision == FALSIFIED:
        return EXIT_FALSIFIED
    return EXIT_INCONCLUSIVE


def cmd_sweep(args) -> int:
    _require(args.scene, "--scene")
    values = pipeline.parse_range(args.range, args.axis)
    scene = load_scene(args.scene)
    rows = pipeline.sweep(args.axis, values, args.reps, args.seed, scene=scene,
                          n_windows=args.windows, workers=args.workers, progress=True)
    os.makedirs(args.out, exist_ok=True)
    artifacts.write_json_append_only(args.out, "sweep", {"axis": args.axis, "rows": rows})
    table = pipeline.format_table(rows)
    artifacts.write_text(artifacts.next_free_path(args.out, "sweep", ".txt"), table)
    if args.plot and args.axis != "degrade":
        ys = ["auc"] if args.axis == "tamper_fraction" else ["raw_ber", "post_viterbi_ber",
                                                            "final_ber"]
        pipeline.plot_rows(rows, "value", ys, artifacts.next_free_path(args.out, "sweep", ".png"))
    artifacts.write_json_append_only(args.out, "run_config", pipeline.run_config(
        "sweep", axis=args.axis, range=args.range, reps=args.reps, seed=args.seed,
        scene=args.scene, windows=args.windows, workers=args.workers))
    print(table, end="")
    return EXIT_OK


def cmd_lsh_analyze(args) -> int:
    rows = pipeline.lsh_analysis(pipeline.parse_k_range(args.k_range), args.theta)
    os.makedirs(args.out, exist_ok=True)
    artifacts.write_json_append_only(args.out, "lsh_analysis", {"rows": rows})
    table = pipeline.format_table(rows)
    artifacts.write_text(artifacts.next_free_path(args.out, "lsh_analysis", ".txt"), table)
    if args.plot:
        pipeline.plot_rows(rows, "k", ["agreement_probability"],
                           artifacts.next_free_path(args.out, "lsh_curves", ".png"),
                           group="theta_th")
    artifacts.write_json_append_only(args.out, "run_config", pipeline.run_config(
        "lsh-analyze", k_range=args.k_range, theta=list(args.theta)))
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="optsig", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for INFO, -vv for DEBUG logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("embed", help="build signatures and bitmap schedules for a track")
    p.add_argument("--track", required=True, help="FeatureTrack JSON file")
    p.add_argument("--key", help=f"key file (default ${config.KEY_ENV_VAR})")
    p.add_argument("--out", required=True, help="schedule output directory")
    p.add_argument("--scene", help="scene YAML used for the core unit's self-recording")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unit-id", type=int, default=0)
    p.add_argument("--date", help="ISO date stamped into each descriptor (default today)")
    p.add_argument("--no-adapt", action="store_true", help="keep the initial intensities")
    p.add_argument("--no-bitmaps", action="store_true", help="write the manifest only")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("simulate", help="render schedules into camera frames")
    p.add_argument("--schedules", required=True, help="directory written by embed")
    p.add_argument("--scene", help="scene YAML (default scene if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="frame output directory")
    p.add_argument("--degrade", action="append",
                   help="post-processing op, repeatable (e.g. quantize=32, blur=1, speed=0.5)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("verify", help="verify a recording against a feature track")
    p.add_argument("--frames", required=True, help="frame directory or video file")
    p.add_argument("--track", required=True, help="FeatureTrack JSON computed from the video")
    p.add_argument("--key", help=f"key file (default ${config.KEY_ENV_VAR})")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--frame-budget", type=int, default=config.FRAME_BUDGET)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("sweep", help="BER / detection sweep over one axis")
    p.add_argument("--axis", required=True, choices=pipeline.SWEEP_AXES)
    p.add_argument("--range", required=True, help="a:b:n or v1,v2,... (op strings for degrade)")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scene", help="base scene YAML")
    p.add_argument("--windows", type=int, default=2, help="windows per simulated run")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("lsh-analyze", help="expected distances and agreement probabilities")
    p.add_argument("--k-range", default="10:300:10", help="a:b:step")
    p.add_argument("--theta", type=float, nargs="+", default=[config.ID_THETA, config.DYN_THETA])
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_lsh_analyze)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        return args.fn(args)
    except (InvalidArgumentError, FileNotFoundError) as e:
        print(colored(f"error: {e}", "red"), file=sys.stderr)
        return EXIT_USAGE
    except OpticalSignatureError as e:
        print(colored(f"pipeline failure: {e}", "red"), file=sys.stderr)
        return EXIT_PIPELINE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
