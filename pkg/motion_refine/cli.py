"""
Command-line surface: ``motion-refine {refine,metrics,synth,calibrate}``.

Exit codes: 0 success, 2 usage or input error, 3 numerical divergence.
Errors are reported as a single JSON line on stderr.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import List, Optional

import torch

from motion_refine.body import FrameTag, Skeleton, resolve_skeleton
from motion_refine.contact import ContactConfig, postprocess
from motion_refine.dynamics import DynamicsPredictions, load_predictions
from motion_refine.errors import DivergedError, InvalidArgumentError, MotionRefineError
from motion_refine.geom import Camera, load_camera
from motion_refine.metrics import evaluate_sequences, write_reports_csv
from motion_refine.motion import MotionSequence, camera_to_world, load_motion, save_motion
from motion_refine.optim import OptimConfig, calibrate_scale, refine, write_trace_csv
from motion_refine import scenarios
from motion_refine.utils import read_json, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3

THREADS_ENV = "MOTION_REFINE_THREADS"

REFINED_FILE = "refined_motion.json"
TRACE_FILE = "trace.csv"
REPORT_FILE = "report.json"
REPORT_CSV_FILE = "report.csv"
CONTACT_FILE = "contacts.csv"
SCALE_FILE = "scale.json"

_PATH_KEYS = ("camera", "init_motion", "predictions", "ground_truth", "output_dir")


@dataclass(frozen=True)
class PipelineConfig:
    skeleton: str
    camera: str
    init_motion: str
    predictions: str
    output_dir: str
    ground_truth: Optional[str] = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    contact: ContactConfig = field(default_factory=ContactConfig)
    enable_postproc: bool = False
    emit_trace: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str = ".") -> "PipelineConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        for key in ("skeleton", "camera", "init_motion", "predictions"):
            if key not in doc:
                raise InvalidArgumentError(f"config is missing '{key}'")
        doc.setdefault("output_dir", "refined")

        for key in _PATH_KEYS:
            if doc.get(key) is not None:
                doc[key] = os.path.join(base_dir, doc[key])
        skeleton = doc["skeleton"]
        if not isinstance(skeleton, str):
            raise InvalidArgumentError("skeleton must be a shipped name or a path")
        candidate = os.path.join(base_dir, skeleton)
        if os.path.exists(candidate):
            doc["skeleton"] = candidate

        doc["optim"] = OptimConfig.from_dict(doc.get("optim", {}))
        doc["contact"] = ContactConfig.from_dict(doc.get("contact", {}))
        config = cls(**doc)
        config.check_inputs()
        return config

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_dict(read_json(path), os.path.dirname(os.path.abspath(path)))

    def check_inputs(self):
        for key in ("camera", "init_motion", "predictions", "ground_truth"):
            path = getattr(self, key)
            if path is not None and not os.path.isfile(path):
                raise FileNotFoundError(2, f"{key} file not found", path)

    def output(self, name: str) -> str:
        return os.path.join(self.output_dir, name)


@dataclass(frozen=True)
class PipelineInputs:
    skeleton: Skeleton
    camera: Camera
    init: MotionSequence
    predictions: DynamicsPredictions
    ground_truth: Optional[MotionSequence]


def _to_world(seq: MotionSequence, cam: Camera, skel: Skeleton) -> MotionSequence:
    if seq.frame_tag == FrameTag.CAMERA:
        return camera_to_world(seq, cam, skel)
    return seq


def load_inputs(config: PipelineConfig) -> PipelineInputs:
    skel = resolve_skeleton(config.skeleton)
    cam = load_camera(config.camera)
    init = _to_world(load_motion(config.init_motion), cam, skel)
    gt = None
    if config.ground_truth is not None:
        gt = _to_world(load_motion(config.ground_truth), cam, skel)
    return PipelineInputs(skel, cam, init, load_predictions(config.predictions), gt)


@contextmanager
def _tracked_outputs():
    """ Collects written paths and removes them if the block raises """
    written: List[str] = []
    try:
        yield written
    except BaseException:
        for path in written:
            if os.path.isfile(path):
                os.remove(path)
                logger.info("removed partial output %s", path)
        raise


def run_refinement(config: PipelineConfig, progress: bool = False) -> dict:
    """ Refines one sequence as configured; returns the paths written """
    torch.manual_seed(config.seed)
    inputs = load_inputs(config)
    optim_cfg = replace(config.optim, record_trace=config.emit_trace, progress=progress)

    with _tracked_outputs() as written:
        result = refine(inputs.init, inputs.skeleton, inputs.camera, inputs.predictions, optim_cfg)
        refined = result.refined
        outputs = {}

        if config.enable_postproc:
            refined, contacts = postprocess(refined, inputs.skeleton, inputs.predictions, config.contact)
            outputs["contacts"] = config.output(CONTACT_FILE)
            written.append(outputs["contacts"])
            contacts.to_csv(outputs["contacts"])

        outputs["refined"] = config.output(REFINED_FILE)
        written.append(outputs["refined"])
        save_motion(refined, outputs["refined"])

        if result.trace is not None:
            outputs["trace"] = config.output(TRACE_FILE)
            written.append(outputs["trace"])
            write_trace_csv(result.trace, outputs["trace"])

        report = {
            "scale": result.scale,
            "final_gradient_norm": result.final_gradient_norm,
            "energy": {
                "initial": result.initial_energy.to_dict(),
                "final": result.final_energy.to_dict(),
            },
        }
        if inputs.ground_truth is not None:
            skel, cam, gt = inputs.skeleton, inputs.camera, inputs.ground_truth
            metrics = {
                "init": evaluate_sequences(inputs.init, gt, skel, cam),
                "refined": evaluate_sequences(refined, gt, skel, cam),
            }
            report["metrics"] = {label: m.to_dict() for label, m in metrics.items()}
            outputs["report_csv"] = config.output(REPORT_CSV_FILE)
            written.append(outputs["report_csv"])
            write_reports_csv(metrics, outputs["report_csv"])
        outputs["report"] = config.output(REPORT_FILE)
        written.append(outputs["report"])
        write_json(outputs["report"], report)

    logger.info("refinement finished in %.2fs, outputs in %s", result.wall_time, config.output_dir)
    return outputs


def _report_error(e: BaseException):
    doc = {"error": type(e).__name__, "message": str(e)}
    if isinstance(e, MotionRefineError):
        doc.update(e.context())
    elif isinstance(e, OSError) and e.filename is not None:
        doc["path"] = str(e.filename)
        doc["message"] = f"{e.strerror or e}: {e.filename}"
    print(json.dumps(doc, default=str), file=sys.stderr)


def _guarded(fn, *args, **kwargs) -> int:
    try:
        fn(*args, **kwargs)
    except DivergedError as e:
        _report_error(e)
        return EXIT_DIVERGED
    except (InvalidArgumentError, FileNotFoundError, IsADirectoryError) as e:
        _report_error(e)
        return EXIT_INPUT
    return EXIT_OK


def thread_cap() -> Optional[int]:
    value = os.environ.get(THREADS_ENV)
    if value is None or value == "":
        return None
    try:
        cap = int(value)
    except ValueError:
        cap = 0
    if cap < 1:
        raise InvalidArgumentError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return cap


def worker_threads(cap: Optional[int], workers: int) -> Optional[int]:
    """ Torch threads per worker so that all workers together stay within ``cap`` """
    if cap is None:
        return None
    return max(1, cap // workers)


def _apply_thread_cap(threads: Optional[int] = None):
    cap = thread_cap() if threads is None else threads
    if cap is not None:
        torch.set_num_threads(cap)


def cmd_refine(config_path, progress: bool = False) -> int:
    return _guarded(lambda: run_refinement(PipelineConfig.from_file(config_path), progress))


def _refine_job(config_path, threads: Optional[int]) -> int:
    _apply_thread_cap(threads)
    return cmd_refine(config_path)


def cmd_refine_many(manifest_path, jobs: int = 1) -> int:
    """Refines every config listed in a manifest (a JSON list of config paths).

    Sequences are independent; the worst exit code is returned.
    """
    try:
        manifest = read_json(manifest_path)
        if not isinstance(manifest, list) or not all(isinstance(p, str) for p in manifest):
            raise InvalidArgumentError("manifest must be a JSON list of config paths")
        if jobs < 1:
            raise InvalidArgumentError(f"--jobs must be positive, got {jobs}")
        cap = thread_cap()
    except (InvalidArgumentError, FileNotFoundError) as e:
        _report_error(e)
        return EXIT_INPUT

    base = os.path.dirname(os.path.abspath(manifest_path))
    paths = [os.path.join(base, p) for p in manifest]
    workers = min(jobs, cap) if cap is not None else jobs
    logger.info("refining %d sequences with %d workers", len(paths), workers)
    if workers == 1:
        codes = [cmd_refine(p) for p in paths]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            threads = worker_threads(cap, workers)
            logger.debug("%s threads per worker", threads or "default")
            codes = list(pool.map(_refine_job, paths, [threads] * len(paths)))
    for path, code in zip(paths, codes):
        if code != EXIT_OK:
            logger.warning("%s finished with exit code %d", path, code)
    return max(codes, default=EXIT_OK)


def csv_path(json_path) -> str:
    """ The CSV twin written next to a JSON report """
    return os.path.splitext(json_path)[0] + ".csv"


def run_metrics(pred_path, gt_path, camera_path, skeleton, output=None):
    skel = resolve_skeleton(skeleton)
    cam = load_camera(camera_path)
    pred = _to_world(load_motion(pred_path), cam, skel)
    gt = _to_world(load_motion(gt_path), cam, skel)
    report = evaluate_sequences(pred, gt, skel, cam)
    print(report.format_table())
    if output is not None:
        with _tracked_outputs() as written:
            written.append(output)
            write_json(output, report.to_dict())
            written.append(csv_path(output))
            write_reports_csv({"pred": report}, csv_path(output))
    return report


def cmd_metrics(pred_path, gt_path, camera_path, skeleton, output="metrics.json") -> int:
    return _guarded(run_metrics, pred_path, gt_path, camera_path, skeleton, output)


def run_synth(scenario: str, output_dir: str, seed: int = 0, noise=None, n_frames=None):
    overrides = dict(noise or {})
    overrides["seed"] = seed
    if n_frames is not None:
        overrides["n_frames"] = n_frames
    try:
        built = scenarios.make(scenario, **overrides)
    except TypeError as e:
        raise InvalidArgumentError(f"invalid options for scenario '{scenario}': {e}")
    with _tracked_outputs() as written:
        written.extend(
            os.path.join(output_dir, name)
            for name in (
                scenarios.GT_FILE,
                scenarios.INIT_FILE,
                scenarios.CAMERA_FILE,
                scenarios.PREDICTIONS_FILE,
                scenarios.SKELETON_FILE,
                scenarios.CONFIG_FILE,
            )
        )
        return built.save(output_dir)


def cmd_synth(scenario: str, output_dir: str, seed: int = 0, noise_path=None, n_frames=None) -> int:
    def run():
        noise = read_json(noise_path) if noise_path is not None else None
        if noise is not None and not isinstance(noise, dict):
            raise InvalidArgumentError("noise config must be a JSON object")
        run_synth(scenario, output_dir, seed, noise, n_frames)

    return _guarded(run)


def run_calibrate(config: PipelineConfig) -> float:
    inputs = load_inputs(config)
    scale = calibrate_scale(inputs.init, inputs.skeleton, inputs.camera, inputs.predictions)
    print(json.dumps({"scale": scale}))
    with _tracked_outputs() as written:
        written.append(config.output(SCALE_FILE))
        write_json(config.output(SCALE_FILE), {"scale": scale})
    return scale


def cmd_calibrate(config_path) -> int:
    return _guarded(lambda: run_calibrate(PipelineConfig.from_file(config_path)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motion-refine",
        description="Refine global human motion with predicted joint dynamics.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser.add_argument("--debug", action="store_true", help="log per-epoch details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="refine a sequence described by a JSON config")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("config", nargs="?", help="refinement config file")
    group.add_argument("--manifest", help="JSON list of config files to refine")
    p.add_argument("--jobs", type=int, default=1, help="parallel sequences with --manifest")
    p.add_argument("--progress", action="store_true", help="show an epoch progress bar")

    p = sub.add_parser("metrics", help="evaluate a motion against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("camera")
    p.add_argument("skeleton", help="skeleton file or shipped name (smpl24, toy6)")
    p.add_argument("--output", default="metrics.json", help="JSON report path; a CSV copy is written beside it")

    p = sub.add_parser("synth", help="write a synthetic scenario")
    p.add_argument("scenario", choices=scenarios.registered())
    p.add_argument("output_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", help="JSON file with scenario noise options")
    p.add_argument("--frames", type=int, help="override the number of frames")

    p = sub.add_parser("calibrate", help="print the scale factor of a config")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.debug else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")

    code = _guarded(_apply_thread_cap)
    if code != EXIT_OK:
        return code

    if args.command == "refine":
        if args.manifest is not None:
            return cmd_refine_many(args.manifest, args.jobs)
        return cmd_refine(args.config, args.progress)
    if args.command == "metrics":
        return cmd_metrics(args.pred, args.gt, args.camera, args.skeleton, args.output)
    if args.command == "synth":
        return cmd_synth(args.scenario, args.output_dir, args.seed, args.noise, args.frames)
    return cmd_calibrate(args.config)


if __name__ == "__main__":
    sys.exit(main())
