"""Evaluation harness: scene-flow and depth metrics, alignment, baselines."""
import logging
import math
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Type

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import settings
from sceneflow.camera import CameraIntrinsics, RelativePose, unproject
from sceneflow.grids import FieldGrid, SceneFlowError, ValidityMask, as_bool, as_f64
from sceneflow.recipe import FRAMES, gt_pointmaps, reframe_arrays, uplift_arrays
from sceneflow.tensors import SampleRecord

logger = logging.getLogger(__name__)

# Thresholds of the scene-flow accuracy metrics (EPE in scene units, relative as a fraction).
ACC_STRICT = (0.05, 0.05)
ACC_RELAX = (0.1, 0.1)
OUTLIER = (0.3, 0.1)
DELTA1_RATIO = 1.25


class EvaluationError(SceneFlowError):
    """Raised when a sample or a whole evaluation cannot be scored."""
    pass


class PredictorOutput(BaseModel):
    """Predicted pointmaps (camera-1 frame) and scene flow for one sample."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x1_hat: FieldGrid
    x2_hat: FieldGrid
    sf_hat: FieldGrid
    valid: Optional[ValidityMask] = None

    @model_validator(mode="after")
    def _same_shape(self) -> "PredictorOutput":
        if not (self.x1_hat.shape == self.x2_hat.shape == self.sf_hat.shape):
            raise EvaluationError("predicted fields must share one shape")
        for name in ("x1_hat", "x2_hat", "sf_hat"):
            if not getattr(self, name).is_finite():
                raise EvaluationError(f"predicted {name} has non-finite values")
        return self


class MetricsReport(BaseModel):
    epe: float = Field(ge=0)
    acc_s: float = Field(ge=0, le=1)
    acc_r: float = Field(ge=0, le=1)
    out: float = Field(ge=0, le=1)
    absrel_r: float = Field(ge=0)
    delta1_r: float = Field(ge=0, le=1)
    absrel_m: float = Field(ge=0)
    delta1_m: float = Field(ge=0, le=1)
    valid_count: int = Field(ge=0)
    depth_count: int = Field(ge=0)
    alignment_scale: float

    @model_validator(mode="after")
    def _strict_within_relaxed(self) -> "MetricsReport":
        if self.acc_s > self.acc_r:
            raise EvaluationError(f"acc_s {self.acc_s} exceeds acc_r {self.acc_r}")
        return self


class SceneFlowMetrics(NamedTuple):
    epe: float
    acc_s: float
    acc_r: float
    out: float
    count: int


class DepthMetrics(NamedTuple):
    absrel: float
    delta1: float
    count: int
    scale: float


def sceneflow_metrics(pred_sf, gt_sf, m_sf) -> SceneFlowMetrics:
    """EPE, AccS, AccR and Out averaged over valid pixels.

    The relative error is |pred - gt| / |gt|; where |gt| = 0 only the
    absolute EPE decides.

    Raises:
        EvaluationError: If no pixel is valid
    """
    pred, gt = as_f64(pred_sf), as_f64(gt_sf)
    valid = as_bool(m_sf, gt.shape[:2])
    if not valid.any():
        raise EvaluationError("scene-flow metrics need at least one valid pixel")
    err = np.sqrt(np.sum((pred - gt) ** 2, axis=-1))[valid]
    gt_norm = np.sqrt(np.sum(gt ** 2, axis=-1))[valid]
    has_rel = gt_norm > 0
    rel = np.where(has_rel, err / np.where(has_rel, gt_norm, 1.0), 0.0)

    acc_s = (err < ACC_STRICT[0]) | (has_rel & (rel < ACC_STRICT[1]))
    acc_r = (err < ACC_RELAX[0]) | (has_rel & (rel < ACC_RELAX[1]))
    out = (err > OUTLIER[0]) | (has_rel & (rel > OUTLIER[1]))
    n = int(valid.sum())
    return SceneFlowMetrics(float(err.mean()), float(acc_s.mean()), float(acc_r.mean()), float(out.mean()), n)


def align_scale(pred_points, gt_points, mask) -> float:
    """Median over valid pixels of |gt| / |pred| (vector norms per pixel).

    Raises:
        EvaluationError: If no valid pixel has a non-zero prediction
    """
    pred, gt = as_f64(pred_points), as_f64(gt_points)
    valid = as_bool(mask, gt.shape[:2])
    pred_norm = np.sqrt(np.sum(pred ** 2, axis=-1))
    usable = valid & (pred_norm > 0)
    if not usable.any():
        raise EvaluationError("alignment scale undefined: predictions are zero on every valid pixel")
    gt_norm = np.sqrt(np.sum(gt ** 2, axis=-1))
    return float(np.median(gt_norm[usable] / pred_norm[usable]))


def depth_metrics(pred_z, gt_z, mask, aligned: bool, scale: Optional[float] = None) -> DepthMetrics:
    """AbsRel and delta1 of predicted depth against positive ground truth.

    With ``aligned`` the prediction is first multiplied by ``scale`` (the
    median |gt| / |pred| ratio when not given). A non-positive predicted depth
    always fails delta1.
    """
    pred, gt = as_f64(pred_z)[..., 0], as_f64(gt_z)[..., 0]
    valid = as_bool(mask, gt.shape) & (gt > 0)
    if not valid.any():
        raise EvaluationError("depth metrics need at least one pixel with positive ground truth")
    if aligned:
        scale = align_scale(pred[..., None], gt[..., None], valid) if scale is None else scale
    else:
        scale = 1.0
    d_pred = pred[valid] * scale
    d_gt = gt[valid]
    absrel = np.abs(d_pred - d_gt) / d_gt
    positive = d_pred > 0
    ratio = np.where(positive, np.maximum(d_pred / d_gt, d_gt / np.where(positive, d_pred, 1.0)), np.inf)
    delta1 = positive & (ratio < DELTA1_RATIO)
    return DepthMetrics(float(absrel.mean()), float(delta1.mean()), int(valid.sum()), float(scale))


def align_prediction(prediction: PredictorOutput, scale: float) -> PredictorOutput:
    """Scale pointmaps and scene flow of a prediction together."""
    return PredictorOutput(
        x1_hat=FieldGrid(data=prediction.x1_hat.as_f64() * scale),
        x2_hat=FieldGrid(data=prediction.x2_hat.as_f64() * scale),
        sf_hat=FieldGrid(data=prediction.sf_hat.as_f64() * scale),
        valid=prediction.valid,
    )


def baseline_dof(
    d1: FieldGrid,
    d2: FieldGrid,
    flow: Optional[FieldGrid],
    k: CameraIntrinsics,
    pose: Optional[RelativePose] = None,
    m_d1: Optional[ValidityMask] = None,
    m_d2: Optional[ValidityMask] = None,
    m_flow: Optional[ValidityMask] = None,
    interp: Optional[str] = None,
) -> PredictorOutput:
    """Depth + optical flow baseline: compose scene flow from two depth maps.

    The composition is the recipe's uplift with the depths taken as
    predictions. With a pose, x2_hat is carried into the camera-1 frame;
    without one it stays camera-2 native. The scene flow is camera-2-frame
    end point minus camera-1 start point either way.
    """
    if flow is None:
        raise EvaluationError("the D+OF baseline needs an optical flow field")
    interp = settings.INTERP if interp is None else interp
    valid_d2 = as_bool(m_d2, d2.shape)
    sf, x1, valid_at_p2 = uplift_arrays(d1.as_f64(), d2.as_f64(), flow.as_f64(), k, valid_d2, interp=interp)
    valid = valid_at_p2 & as_bool(m_d1, d1.shape) & as_bool(m_flow, flow.shape)
    sf[~valid] = 0.0
    x2, _ = unproject(d2, k)
    x2 = x2.as_f64()
    if pose is not None:
        x2 = pose.apply(x2, inverse=True)
    return PredictorOutput(
        x1_hat=FieldGrid(data=x1),
        x2_hat=FieldGrid(data=x2),
        sf_hat=FieldGrid(data=sf),
        valid=ValidityMask.from_bool(valid),
    )


def pointmaps_to_depths(x1: FieldGrid, x2: FieldGrid, pose: RelativePose) -> Tuple[FieldGrid, FieldGrid]:
    """Depth maps of both frames from camera-1-frame pointmaps and a pose.

    Pointmap predictors place X2 in camera 1; a D+OF composition needs the
    frame-2 depth, so X2 is moved into camera 2 first.
    """
    d2 = pose.apply(x2.as_f64())[..., 2:3]
    return FieldGrid(data=x1.as_f64()[..., 2:3]), FieldGrid(data=d2)


Predictor = Callable[[SampleRecord], PredictorOutput]


def _gt_pointmaps(sample: SampleRecord) -> Tuple[FieldGrid, FieldGrid]:
    if sample.x1 is not None and sample.x2 is not None:
        return sample.x1, sample.x2
    return gt_pointmaps(sample)


def _gt_sceneflow(sample: SampleRecord) -> FieldGrid:
    if sample.sf is None:
        raise EvaluationError("sample has no ground-truth scene flow; run uplift first")
    if sample.sf_kind != "cso":
        raise EvaluationError(f"ground-truth scene flow must be CSO, got {sample.sf_kind}")
    return sample.sf


class OraclePredictor:
    """Feeds the sample's own ground truth back as the prediction."""

    def __init__(self, frame: str = "camera2", world_pose: Optional[RelativePose] = None):
        self.frame = frame
        self.world_pose = world_pose

    def __call__(self, sample: SampleRecord) -> PredictorOutput:
        x1, x2 = _gt_pointmaps(sample)
        sf = reframe_arrays(x1.as_f64(), _gt_sceneflow(sample).as_f64(), sample.pose_1_to_2, self.frame, self.world_pose)
        sf[~sample.mask("sf").as_bool()] = 0.0
        return PredictorOutput(x1_hat=x1, x2_hat=x2, sf_hat=FieldGrid(data=sf))


class DOFPredictor:
    """D+OF baseline on the sample's own depths and forward flow.

    ``depth_scale`` multiplies both depth maps, emulating a depth estimator
    with a global scale error. With ``from_pointmaps`` the depths are read off
    the sample's camera-1-frame pointmaps instead, the way a pointmap
    predictor's output is turned into a D+OF composition. The scene flow is
    reported in ``frame`` like the oracle's.
    """

    def __init__(
        self,
        depth_scale: float = 1.0,
        use_pose: bool = True,
        interp: Optional[str] = None,
        frame: str = "camera2",
        world_pose: Optional[RelativePose] = None,
        from_pointmaps: bool = False,
    ):
        if frame not in FRAMES:
            raise EvaluationError(f"unknown reference frame: {frame}")
        if frame != "camera2" and not use_pose:
            raise EvaluationError(f"frame {frame} needs the relative pose")
        self.depth_scale = depth_scale
        self.use_pose = use_pose
        self.interp = interp
        self.frame = frame
        self.world_pose = world_pose
        self.from_pointmaps = from_pointmaps

    def _depths(self, sample: SampleRecord) -> Tuple[FieldGrid, FieldGrid]:
        if self.from_pointmaps:
            x1, x2 = _gt_pointmaps(sample)
            return pointmaps_to_depths(x1, x2, sample.pose_1_to_2)
        return sample.d1, sample.d2

    def __call__(self, sample: SampleRecord) -> PredictorOutput:
        d1, d2 = self._depths(sample)
        output = baseline_dof(
            FieldGrid(data=d1.as_f64() * self.depth_scale),
            FieldGrid(data=d2.as_f64() * self.depth_scale),
            sample.flow_fwd,
            sample.intrinsics,
            pose=sample.pose_1_to_2 if self.use_pose else None,
            m_d1=sample.mask("d1"),
            m_d2=sample.mask("d2"),
            m_flow=sample.mask("flow_fwd"),
            interp=self.interp,
        )
        if self.frame == "camera2":
            return output
        sf = reframe_arrays(
            output.x1_hat.as_f64(), output.sf_hat.as_f64(), sample.pose_1_to_2, self.frame, self.world_pose
        )
        sf[~output.valid.as_bool()] = 0.0
        return output.model_copy(update={"sf_hat": FieldGrid(data=sf)})


class PredictorFactory:
    """Factory class for creating predictors by name."""

    _predictors: Dict[str, Type] = {
        "oracle": OraclePredictor,
        "dof": DOFPredictor,
    }

    @classmethod
    def create_predictor(cls, name: str, **kwargs) -> Predictor:
        """Create a predictor instance.

        Args:
            name: Predictor name ('oracle', 'dof')
            **kwargs: Predictor-specific parameters

        Raises:
            ValueError: If the predictor is not supported
        """
        predictor_class = cls._predictors.get(name.lower())
        if not predictor_class:
            raise ValueError(f"Unsupported predictor: {name}")
        return predictor_class(**kwargs)

    @classmethod
    def get_supported_predictors(cls) -> list:
        return list(cls._predictors.keys())


class EvalConfig(BaseModel):
    """How predictions are compared with ground truth."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frame: str = Field(default_factory=lambda: settings.FRAME)
    align_sceneflow: bool = False
    pixel_pooled: bool = False
    world_pose: Optional[RelativePose] = None

    @model_validator(mode="after")
    def _known_frame(self) -> "EvalConfig":
        if self.frame not in FRAMES:
            raise EvaluationError(f"unknown reference frame: {self.frame}")
        return self


def evaluate_prediction(sample: SampleRecord, prediction: PredictorOutput, config: EvalConfig) -> MetricsReport:
    """Score one prediction against the sample's ground truth."""
    gt_sf = _gt_sceneflow(sample)
    gt_x1, _ = _gt_pointmaps(sample)
    if prediction.sf_hat.shape != gt_sf.shape:
        raise EvaluationError(f"prediction shape {prediction.sf_hat.shape} does not match sample {gt_sf.shape}")
    m_sf = sample.mask("sf")
    m_d1 = sample.mask("d1")

    gt = reframe_arrays(gt_x1.as_f64(), gt_sf.as_f64(), sample.pose_1_to_2, config.frame, config.world_pose)
    depth_valid = m_d1.as_bool() & (gt_x1.as_f64()[..., 2] > 0)
    scale = align_scale(prediction.x1_hat, gt_x1, depth_valid)
    pred_sf = prediction.sf_hat.as_f64()
    if config.align_sceneflow:
        pred_sf = pred_sf * scale

    sfm = sceneflow_metrics(pred_sf, gt, m_sf)
    pred_z = prediction.x1_hat.as_f64()[..., 2:3]
    gt_z = gt_x1.as_f64()[..., 2:3]
    rel = depth_metrics(pred_z, gt_z, depth_valid, aligned=True, scale=scale)
    met = depth_metrics(pred_z, gt_z, depth_valid, aligned=False)
    return MetricsReport(
        epe=sfm.epe,
        acc_s=sfm.acc_s,
        acc_r=sfm.acc_r,
        out=sfm.out,
        absrel_r=rel.absrel,
        delta1_r=rel.delta1,
        absrel_m=met.absrel,
        delta1_m=met.delta1,
        valid_count=sfm.count,
        depth_count=rel.count,
        alignment_scale=scale,
    )


class SampleReport(BaseModel):
    name: str
    metrics: Optional[MetricsReport] = None
    error: Optional[str] = None


class EvaluationReport(BaseModel):
    samples: List[SampleReport]
    aggregate: MetricsReport
    failures: int
    pixel_pooled: bool

    @property
    def status(self) -> int:
        return 2 if self.failures else 0


def evaluate_one(name: str, sample: SampleRecord, predictor: Predictor, config: EvalConfig) -> SampleReport:
    """Score one sample, recording (not raising) per-sample failures."""
    try:
        metrics = evaluate_prediction(sample, predictor(sample), config)
    except SceneFlowError as e:
        logger.warning(f"Sample {name} excluded: {e}")
        return SampleReport(name=name, error=str(e))
    logger.debug(f"Sample {name}: EPE {metrics.epe:.6g}, AccS {metrics.acc_s:.3f}")
    return SampleReport(name=name, metrics=metrics)


def _mean(values: Sequence[float], weights: Optional[Sequence[float]] = None) -> float:
    if weights is None:
        return math.fsum(values) / len(values)
    return math.fsum(v * w for v, w in zip(values, weights)) / math.fsum(weights)


def aggregate_reports(reports: Sequence[MetricsReport], pixel_pooled: bool = False) -> MetricsReport:
    """Mean of per-sample means, or a pixel-pooled mean weighted by valid counts."""
    if not reports:
        raise EvaluationError("no successful samples to aggregate")
    sf_w = [r.valid_count for r in reports] if pixel_pooled else None
    depth_w = [r.depth_count for r in reports] if pixel_pooled else None

    def pick(name: str, weights) -> float:
        return _mean([getattr(r, name) for r in reports], weights)

    return MetricsReport(
        epe=pick("epe", sf_w),
        acc_s=pick("acc_s", sf_w),
        acc_r=pick("acc_r", sf_w),
        out=pick("out", sf_w),
        absrel_r=pick("absrel_r", depth_w),
        delta1_r=pick("delta1_r", depth_w),
        absrel_m=pick("absrel_m", depth_w),
        delta1_m=pick("delta1_m", depth_w),
        valid_count=sum(r.valid_count for r in reports),
        depth_count=sum(r.depth_count for r in reports),
        alignment_scale=pick("alignment_scale", None),
    )


def summarize(reports: Iterable[SampleReport], config: EvalConfig) -> EvaluationReport:
    """Reduce per-sample reports deterministically (sorted by sample name).

    Raises:
        EvaluationError: If every sample failed
    """
    ordered = sorted(reports, key=lambda r: r.name)
    good = [r.metrics for r in ordered if r.metrics is not None]
    failures = len(ordered) - len(good)
    if not good:
        raise EvaluationError(f"all {len(ordered)} samples failed")
    if failures:
        logger.warning(f"{failures} of {len(ordered)} samples failed and were excluded")
    return EvaluationReport(
        samples=ordered,
        aggregate=aggregate_reports(good, config.pixel_pooled),
        failures=failures,
        pixel_pooled=config.pixel_pooled,
    )


def evaluate(
    samples: Iterable[Tuple[str, SampleRecord]],
    predictor: Predictor,
    config: Optional[EvalConfig] = None,
) -> EvaluationReport:
    """Evaluate ``predictor`` over named samples and aggregate the metrics."""
    config = config or EvalConfig()
    return summarize((evaluate_one(name, sample, predictor, config) for name, sample in samples), config)
