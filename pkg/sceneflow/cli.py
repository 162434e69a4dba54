"""Command-line surface: synth, uplift, convert, eval, fit and losscheck.

Batch commands walk sample directories in lexicographic order; with
``--jobs N`` the per-directory work runs in a process pool and results are
collected in that same order.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import settings
from sceneflow.camera import RelativePose
from sceneflow.evaluation import (
    EvalConfig,
    EvaluationError,
    PredictorFactory,
    SampleReport,
    evaluate_one,
    summarize,
)
from sceneflow.grids import SceneFlowError
from sceneflow.optim import FieldSet, LossTargets, fit_free_parameters, gradient_audit
from sceneflow.param import SFRepresentation, convert
from sceneflow.recipe import FRAMES, augment_sample, gt_pointmaps, uplift, write_recipe_provenance
from sceneflow.synthworld import random_scene, render
from sceneflow.synthworld.scene import write_scene
from sceneflow.tensors import SampleRecord, list_sample_dirs, read_sample, write_sample

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2
EXIT_USAGE = 64

STRATEGIES = ("align", "always", "never", "xor")
AUDIT_TOLERANCE = 1e-4


class UsageError(Exception):
    """Raised for unknown commands or malformed flags."""
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _map(fn: Callable, items: Sequence, jobs: int) -> List:
    """Apply ``fn`` to every item, in input order, optionally in a process pool."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _batch_status(results: List[Tuple[str, Optional[str]]]) -> int:
    failures = [(name, error) for name, error in results if error is not None]
    for name, error in failures:
        logger.error(f"{name}: {error}")
    if not results or len(failures) == len(results):
        return EXIT_ERROR
    return EXIT_PARTIAL if failures else EXIT_OK


def _emit(payload, output: Optional[Path]) -> None:
    text = json.dumps(payload, indent=2)
    if output is None:
        print(text)
    else:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(text + "\n", encoding="utf-8")


# Workers take and return plain values so they can cross process boundaries.

def _synth_one(seed: int, out: str, height: int, width: int, lattice: bool, with_gt: bool) -> Tuple[str, Optional[str]]:
    directory = Path(out) / f"scene_{seed:05d}"
    try:
        spec = random_scene(seed, height=height, width=width, lattice=lattice)
        sample, gt = render(spec)
        if with_gt:
            sample = augment_sample(sample, gt)
        write_sample(sample, directory)
        write_scene(spec, directory)
    except SceneFlowError as e:
        return directory.name, str(e)
    return directory.name, None


def _uplift_one(path: str, alpha1: float, alpha2: float, interp: str) -> Tuple[str, Optional[str]]:
    try:
        sample = read_sample(path)
        result = uplift(sample, alpha1=alpha1, alpha2=alpha2, interp=interp)
        write_sample(augment_sample(sample, result), path)
        write_recipe_provenance(result, path)
        logger.info(f"Uplifted {path}: {result.mask_sf.count()} valid pixels")
    except SceneFlowError as e:
        return Path(path).name, str(e)
    return Path(path).name, None


def _convert_one(path: str, target: str, interp: str) -> Tuple[str, Optional[str]]:
    try:
        sample = read_sample(path)
        if sample.sf is None:
            raise EvaluationError("sample has no scene flow to convert")
        x1 = sample.x1 if sample.x1 is not None else gt_pointmaps(sample)[0]
        rep = SFRepresentation(kind=sample.sf_kind, payload=sample.sf)
        converted, valid = convert(rep, target, x1, sample.intrinsics, mask=sample.mask("sf"), interp=interp)
        write_sample(sample.replace(sf=converted.payload, m_sf=valid, sf_kind=converted.kind.value), path)
    except SceneFlowError as e:
        return Path(path).name, str(e)
    return Path(path).name, None


def _eval_one(path: str, predictor: str, predictor_kwargs: dict, config: EvalConfig) -> SampleReport:
    name = Path(path).name
    try:
        sample = read_sample(path)
    except SceneFlowError as e:
        logger.warning(f"Sample {name} excluded: {e}")
        return SampleReport(name=name, error=str(e))
    return evaluate_one(name, sample, PredictorFactory.create_predictor(predictor, **predictor_kwargs), config)


def _world_pose(value: Optional[str]) -> Optional[RelativePose]:
    if value is None:
        return None
    try:
        numbers = [float(v) for v in value.split(",")]
    except ValueError as e:
        raise UsageError(f"--world-pose expects 16 comma-separated numbers: {e}") from e
    if len(numbers) != 16:
        raise UsageError(f"--world-pose expects 16 numbers, got {len(numbers)}")
    return RelativePose.from_matrix(numbers)


def _noisy(sample: SampleRecord, noise: float, seed: int) -> FieldSet:
    """Ground-truth fields plus uniform noise in [-noise, noise] on every valid value."""
    targets = LossTargets.from_sample(sample)
    rng = np.random.default_rng(seed)
    fields = []
    for values, mask in ((targets.x1, targets.m1), (targets.x2, targets.m2), (targets.sf, targets.ms)):
        fields.append(values + rng.uniform(-noise, noise, values.shape) * mask[..., None])
    return FieldSet(*fields)


def cmd_synth(args) -> int:
    out = Path(args.output)
    seeds = list(range(args.seed, args.seed + args.count))
    worker = partial(
        _synth_one, out=str(out), height=args.height, width=args.width, lattice=not args.general, with_gt=args.with_gt
    )
    results = _map(worker, seeds, args.jobs)
    logger.info(f"Synthesized {sum(1 for _, e in results if e is None)} of {len(results)} scenes into {out}")
    return _batch_status(results)


def cmd_uplift(args) -> int:
    dirs = [str(p) for p in list_sample_dirs(args.input)]
    worker = partial(_uplift_one, alpha1=args.alpha1, alpha2=args.alpha2, interp=args.interp)
    return _batch_status(_map(worker, dirs, args.jobs))


def cmd_convert(args) -> int:
    dirs = [str(p) for p in list_sample_dirs(args.input)]
    worker = partial(_convert_one, target=args.to, interp=args.interp)
    return _batch_status(_map(worker, dirs, args.jobs))


def cmd_eval(args) -> int:
    world_pose = _world_pose(args.world_pose)
    if args.frame == "world" and world_pose is None:
        # Scenes without a world registration use camera 1 as the world frame.
        world_pose = RelativePose.identity()
    config = EvalConfig(
        frame=args.frame,
        align_sceneflow=args.align_sceneflow,
        pixel_pooled=args.pixel_pooled,
        world_pose=world_pose,
    )
    predictor_kwargs = {"frame": args.frame, "world_pose": world_pose}
    if args.predictor == "dof":
        predictor_kwargs.update(
            depth_scale=args.depth_scale, interp=args.interp, from_pointmaps=args.from_pointmaps
        )
    dirs = [str(p) for p in list_sample_dirs(args.input)]
    worker = partial(_eval_one, predictor=args.predictor, predictor_kwargs=predictor_kwargs, config=config)
    report = summarize(_map(worker, dirs, args.jobs), config)
    payload = report.model_dump(mode="json")
    payload["status"] = report.status
    _emit(payload, Path(args.report) if args.report else None)
    return report.status


def cmd_fit(args) -> int:
    sample = read_sample(args.input)
    init = _noisy(sample, args.noise, args.seed)
    fields, trajectory = fit_free_parameters(
        sample,
        init,
        strategy=args.strategy,
        steps=args.steps,
        step_size=args.step_size,
        mu_weight=args.mu_weight,
    )
    targets = LossTargets.from_sample(sample)
    epe = np.sqrt(np.sum((fields.sf - targets.sf) ** 2, axis=-1))[targets.ms]
    payload = {
        "trajectory": [report.model_dump(mode="json") for report in trajectory],
        "initial_total": trajectory[0].total,
        "final_total": trajectory[-1].total,
        "final_epe": float(epe.mean()) if epe.size else 0.0,
    }
    _emit(payload, Path(args.report) if args.report else None)
    return EXIT_OK


def cmd_losscheck(args) -> int:
    if args.input:
        sample = read_sample(args.input)
    else:
        spec = random_scene(args.seed, height=args.size, width=args.size, lattice=True)
        sample, gt = render(spec)
        sample = augment_sample(sample, gt)
    prediction = _noisy(sample, args.noise, args.seed)
    audit = gradient_audit(sample, prediction, strategy=args.strategy, mu_weight=args.mu_weight, h=args.h)
    payload = audit.model_dump(mode="json")
    payload["passed"] = audit.max_rel_error < args.tolerance
    _emit(payload, Path(args.report) if args.report else None)
    return EXIT_OK if payload["passed"] else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    # Flags are scoped to the commands that read them.
    common = _Parser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", help="Log at DEBUG level.")
    batch = _Parser(add_help=False)
    batch.add_argument("--jobs", type=int, default=settings.JOBS, help="Worker processes for batch commands.")
    sampling = _Parser(add_help=False)
    sampling.add_argument("--interp", choices=("bilinear", "nearest"), default=settings.INTERP)
    cycle = _Parser(add_help=False)
    cycle.add_argument("--alpha1", type=float, default=settings.ALPHA1, help="Relative cycle-check tolerance.")
    cycle.add_argument("--alpha2", type=float, default=settings.ALPHA2, help="Absolute cycle-check tolerance (px^2).")
    loss = _Parser(add_help=False)
    loss.add_argument("--strategy", choices=STRATEGIES, default=settings.STRATEGY, help="Scale strategy for losses.")
    loss.add_argument("--mu-weight", type=float, default=settings.MU_WEIGHT, help="Weight of the projected-flow loss.")

    parser = _Parser(prog="sceneflow", description="Monocular scene-flow toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common, batch], help="Render synthetic sample directories.")
    p.add_argument("output", help="Directory receiving one sample directory per scene.")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--general", action="store_true", help="Spheres, rotated boxes and camera rotation.")
    p.add_argument("--with-gt", action="store_true", help="Store the exact scene flow and pointmaps.")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser(
        "uplift", parents=[common, batch, sampling, cycle], help="Add pseudo ground-truth scene flow to samples."
    )
    p.add_argument("input", help="A sample directory or a directory of samples.")
    p.set_defaults(handler=cmd_uplift)

    p = sub.add_parser(
        "convert", parents=[common, batch, sampling], help="Rewrite stored scene flow in another parameterization."
    )
    p.add_argument("input")
    p.add_argument("--to", choices=("cso", "ddof", "ep"), required=True)
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser("eval", parents=[common, batch, sampling], help="Score a predictor against stored ground truth.")
    p.add_argument("input")
    p.add_argument("--predictor", choices=PredictorFactory.get_supported_predictors(), default="oracle")
    p.add_argument("--depth-scale", type=float, default=1.0, help="Depth scaling for the dof predictor.")
    p.add_argument("--from-pointmaps", action="store_true", help="Feed the dof predictor depths read off pointmaps.")
    p.add_argument("--frame", choices=FRAMES, default=settings.FRAME, help="Reference frame of scene flow.")
    p.add_argument("--pixel-pooled", action="store_true", help="Pool metrics over pixels instead of samples.")
    p.add_argument("--align-sceneflow", action="store_true", help="Apply the pointmap alignment scale to scene flow.")
    p.add_argument("--world-pose", help="World-from-camera-1 pose as 16 comma-separated numbers.")
    p.add_argument("--report", help="Write the JSON report here instead of stdout.")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("fit", parents=[common, loss], help="Fit free fields to one sample from a noisy start.")
    p.add_argument("input")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=settings.FIT_STEPS)
    p.add_argument("--step-size", type=float, default=settings.FIT_STEP_SIZE)
    p.add_argument("--report", help="Write the loss trajectory here instead of stdout.")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("losscheck", parents=[common, loss], help="Audit loss gradients against finite differences.")
    p.add_argument("input", nargs="?", help="Sample directory; a synthetic sample is rendered when omitted.")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--h", type=float, default=settings.FD_STEP, help="Finite-difference step.")
    p.add_argument("--tolerance", type=float, default=AUDIT_TOLERANCE)
    p.add_argument("--report")
    p.set_defaults(handler=cmd_losscheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
    except UsageError as e:
        print(f"sceneflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except UsageError as e:
        print(f"sceneflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SceneFlowError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=args.verbose)
        return EXIT_ERROR
