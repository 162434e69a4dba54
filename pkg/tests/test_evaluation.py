"""Tests for metrics, alignment, baselines and the evaluation harness."""
import numpy as np
import pytest

from sceneflow.camera import RelativePose
from sceneflow.evaluation import (
    DOFPredictor,
    EvalConfig,
    EvaluationError,
    MetricsReport,
    OraclePredictor,
    PredictorFactory,
    PredictorOutput,
    aggregate_reports,
    align_prediction,
    align_scale,
    baseline_dof,
    depth_metrics,
    evaluate,
    evaluate_prediction,
    pointmaps_to_depths,
    sceneflow_metrics,
)
from sceneflow.grids import FieldGrid
from sceneflow.recipe import augment_sample, gt_pointmaps, uplift
from sceneflow.tensors import SampleRecord
from tests.builders import rendered


def _report(epe: float, count: int = 10) -> MetricsReport:
    return MetricsReport(
        epe=epe, acc_s=0.5, acc_r=0.5, out=0.1, absrel_r=0.0, delta1_r=1.0, absrel_m=0.0, delta1_m=1.0,
        valid_count=count, depth_count=count, alignment_scale=1.0,
    )


def _brute_force(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    errors, acc_s, acc_r, out = [], [], [], []
    for row in range(gt.shape[0]):
        for col in range(gt.shape[1]):
            if not mask[row, col]:
                continue
            e = float(np.linalg.norm(pred[row, col] - gt[row, col]))
            norm = float(np.linalg.norm(gt[row, col]))
            r = e / norm if norm > 0 else None
            errors.append(e)
            acc_s.append(e < 0.05 or (r is not None and r < 0.05))
            acc_r.append(e < 0.1 or (r is not None and r < 0.1))
            out.append(e > 0.3 or (r is not None and r > 0.1))
    return np.mean(errors), np.mean(acc_s), np.mean(acc_r), np.mean(out)


def test_sceneflow_metrics_identity(rng: np.random.Generator) -> None:
    """Test the perfect report for pred == gt."""
    gt = rng.normal(size=(6, 6, 3))
    epe, acc_s, acc_r, out, count = sceneflow_metrics(gt, gt, None)
    assert (epe, acc_s, acc_r, out, count) == (0.0, 1.0, 1.0, 0.0, 36)


def test_sceneflow_threshold_arithmetic() -> None:
    """Test a uniform 0.04 error against flows of norm 10."""
    gt = np.zeros((2, 2, 3))
    gt[..., 0] = 10.0
    pred = gt.copy()
    pred[..., 1] = 0.04
    metrics = sceneflow_metrics(pred, gt, None)
    assert metrics.acc_s == 1.0 and metrics.out == 0.0
    assert metrics.epe == pytest.approx(0.04)


def test_static_pixels_use_absolute_error() -> None:
    """Test that zero ground-truth flow is judged by EPE alone."""
    gt = np.zeros((1, 2, 3))
    pred = np.zeros((1, 2, 3))
    pred[0, 0, 0] = 0.04
    pred[0, 1, 0] = 0.35
    metrics = sceneflow_metrics(pred, gt, None)
    assert metrics.acc_s == 0.5
    assert metrics.out == 0.5


def test_sceneflow_metrics_match_brute_force(rng: np.random.Generator) -> None:
    """Test vectorized metrics against a per-pixel reference."""
    for _ in range(20):
        gt = rng.normal(scale=0.5, size=(5, 7, 3))
        gt[0, 0] = 0.0
        pred = gt + rng.normal(scale=0.08, size=gt.shape)
        mask = rng.random((5, 7)) < 0.7
        mask[0, 0] = True
        metrics = sceneflow_metrics(pred, gt, mask)
        expected = _brute_force(pred, gt, mask)
        assert metrics[:4] == pytest.approx(expected)
        assert metrics.acc_s <= metrics.acc_r


def test_metrics_need_valid_pixels() -> None:
    """Test that an empty mask is an error."""
    with pytest.raises(EvaluationError):
        sceneflow_metrics(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=bool))


def test_error_shrinking_is_monotone(rng: np.random.Generator) -> None:
    """Test that shrinking every error never worsens the metrics."""
    gt = rng.normal(size=(8, 8, 3))
    pred = gt + rng.normal(scale=0.2, size=gt.shape)
    wide = sceneflow_metrics(pred, gt, None)
    narrow = sceneflow_metrics(gt + 0.5 * (pred - gt), gt, None)
    assert narrow.acc_s >= wide.acc_s and narrow.acc_r >= wide.acc_r
    assert narrow.out <= wide.out and narrow.epe <= wide.epe


def test_depth_metrics_variants(rng: np.random.Generator) -> None:
    """Test aligned and raw depth metrics under a pure scale error."""
    gt = rng.uniform(1.0, 10.0, size=(6, 6, 1))
    assert depth_metrics(gt, gt, None, aligned=True)[:2] == (0.0, 1.0)
    assert depth_metrics(gt, gt, None, aligned=False)[:2] == (0.0, 1.0)

    aligned = depth_metrics(2.0 * gt, gt, None, aligned=True)
    assert aligned.absrel == pytest.approx(0.0, abs=1e-12)
    assert aligned.delta1 == 1.0
    assert aligned.scale == pytest.approx(0.5)
    raw = depth_metrics(2.0 * gt, gt, None, aligned=False)
    assert raw.absrel == pytest.approx(1.0)
    assert raw.delta1 == 0.0


def test_non_positive_depth_fails_delta1() -> None:
    """Test that negative predicted depth is a delta1 failure."""
    gt = np.full((1, 2, 1), 2.0)
    pred = np.array([[[2.0], [-2.0]]])
    metrics = depth_metrics(pred, gt, None, aligned=False)
    assert metrics.delta1 == 0.5
    assert metrics.absrel == pytest.approx(1.0)


def test_align_scale(rng: np.random.Generator) -> None:
    """Test the median ratio, including even pixel counts."""
    gt = rng.normal(size=(4, 4, 3))
    assert align_scale(gt, gt, None) == pytest.approx(1.0)
    assert align_scale(gt / 3.0, gt, None) == pytest.approx(3.0)

    pred = rng.normal(size=(4, 4, 3))
    ratios = sorted((np.linalg.norm(gt, axis=-1) / np.linalg.norm(pred, axis=-1)).ravel())
    assert align_scale(pred, gt, None) == pytest.approx((ratios[7] + ratios[8]) / 2)

    with pytest.raises(EvaluationError):
        align_scale(np.zeros((2, 2, 3)), gt[:2, :2], None)


def test_alignment_is_idempotent(lattice_sample: SampleRecord) -> None:
    """Test that aligning an aligned prediction gives scale 1."""
    x1, x2 = gt_pointmaps(lattice_sample)
    prediction = PredictorOutput(
        x1_hat=FieldGrid(data=x1.as_f64() * 0.37), x2_hat=x2, sf_hat=lattice_sample.sf
    )
    scale = align_scale(prediction.x1_hat, x1, None)
    aligned = align_prediction(prediction, scale)
    assert align_scale(aligned.x1_hat, x1, None) == pytest.approx(1.0, abs=1e-6)


def test_oracle_predictor_is_perfect() -> None:
    """Test the all-perfect report for ground truth fed back."""
    samples = [(f"s{seed}", rendered(seed)[0]) for seed in range(5)]
    report = evaluate(samples, OraclePredictor())
    agg = report.aggregate
    assert (agg.epe, agg.acc_s, agg.acc_r, agg.out) == (0.0, 1.0, 1.0, 0.0)
    assert (agg.absrel_r, agg.delta1_r) == (0.0, 1.0)
    assert report.status == 0
    assert [s.name for s in report.samples] == ["s0", "s1", "s2", "s3", "s4"]


@pytest.mark.parametrize("frame", ["camera1", "camera2", "world"])
def test_oracle_in_every_frame(frame: str) -> None:
    """Test that GT is re-expressed in the predictor's reference frame."""
    sample, _ = rendered(6, lattice=False)
    world = RelativePose.from_rotvec([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])
    config = EvalConfig(frame=frame, world_pose=world)
    metrics = evaluate_prediction(sample, OraclePredictor(frame=frame, world_pose=world)(sample), config)
    assert metrics.epe == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("frame", ["camera1", "camera2", "world"])
def test_dof_in_every_frame(frame: str) -> None:
    """Test that the D+OF prediction is reported in the evaluation frame."""
    sample, _ = rendered(6, lattice=False)
    sample = augment_sample(sample, uplift(sample))
    world = RelativePose.from_rotvec([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])
    config = EvalConfig(frame=frame, world_pose=world)
    metrics = evaluate_prediction(sample, DOFPredictor(frame=frame, world_pose=world)(sample), config)
    assert metrics.valid_count > 0
    assert metrics.epe == pytest.approx(0.0, abs=1e-5)


def test_dof_frame_validation() -> None:
    """Test that reframing a pose-free D+OF prediction is refused."""
    with pytest.raises(EvaluationError):
        DOFPredictor(frame="camera1", use_pose=False)
    with pytest.raises(EvaluationError):
        DOFPredictor(frame="camera3")


def test_dof_baseline_with_exact_inputs(lattice_sample: SampleRecord) -> None:
    """Test that the D+OF baseline on GT depth and flow reproduces the recipe."""
    sample = augment_sample(lattice_sample, uplift(lattice_sample))
    metrics = evaluate_prediction(sample, DOFPredictor()(sample), EvalConfig())
    assert metrics.epe == 0.0
    assert metrics.absrel_m == 0.0


def test_dof_baseline_under_depth_scaling(lattice_sample: SampleRecord) -> None:
    """Test that doubling both depths doubles the composed scene flow."""
    sample = augment_sample(lattice_sample, uplift(lattice_sample))
    metrics = evaluate_prediction(sample, DOFPredictor(depth_scale=2.0)(sample), EvalConfig())
    valid = sample.mask("sf").as_bool()
    expected = np.linalg.norm(sample.sf.as_f64(), axis=-1)[valid].mean()
    assert metrics.epe == pytest.approx(expected, rel=1e-5)
    assert metrics.absrel_m == pytest.approx(1.0, rel=1e-6)
    assert metrics.absrel_r == pytest.approx(0.0, abs=1e-6)

    aligned = evaluate_prediction(sample, DOFPredictor(depth_scale=2.0)(sample), EvalConfig(align_sceneflow=True))
    assert aligned.epe == pytest.approx(0.0, abs=1e-5)


def test_dof_baseline_needs_flow(lattice_sample: SampleRecord) -> None:
    """Test that a missing flow field is an error."""
    with pytest.raises(EvaluationError):
        baseline_dof(lattice_sample.d1, lattice_sample.d2, None, lattice_sample.intrinsics)


def test_dof_baseline_without_pose(lattice_sample: SampleRecord) -> None:
    """Test that without a pose x2_hat stays in camera 2."""
    output = baseline_dof(lattice_sample.d1, lattice_sample.d2, lattice_sample.flow_fwd, lattice_sample.intrinsics)
    assert np.allclose(output.x2_hat.data[..., 2], lattice_sample.d2.data[..., 0])


def test_pointmaps_to_depths(lattice_sample: SampleRecord) -> None:
    """Test recovering both depth maps from camera-1 pointmaps."""
    x1, x2 = gt_pointmaps(lattice_sample)
    d1, d2 = pointmaps_to_depths(x1, x2, lattice_sample.pose_1_to_2)
    assert np.allclose(d1.data, lattice_sample.d1.data)
    assert np.allclose(d2.data, lattice_sample.d2.data, atol=1e-5)


def test_dof_from_pointmaps(lattice_sample: SampleRecord) -> None:
    """Test the D+OF composition fed with depths read off pointmaps."""
    sample = augment_sample(lattice_sample, uplift(lattice_sample))
    direct = DOFPredictor()(sample)
    via_pointmaps = DOFPredictor(from_pointmaps=True)(sample)
    assert np.allclose(via_pointmaps.sf_hat.data, direct.sf_hat.data, atol=1e-4)
    metrics = evaluate_prediction(sample, via_pointmaps, EvalConfig())
    assert metrics.epe == pytest.approx(0.0, abs=1e-4)


def test_mean_of_means_and_pixel_pooling() -> None:
    """Test the two aggregation rules."""
    assert aggregate_reports([_report(0.1), _report(0.3)]).epe == pytest.approx(0.2)
    pooled = aggregate_reports([_report(0.1, count=30), _report(0.3, count=10)], pixel_pooled=True)
    assert pooled.epe == pytest.approx(0.15)
    assert pooled.valid_count == 40
    with pytest.raises(EvaluationError):
        aggregate_reports([])


def test_evaluation_is_order_independent() -> None:
    """Test permutation invariance over sample order."""
    samples = [(f"s{seed}", rendered(seed)[0]) for seed in range(4)]
    predictor = DOFPredictor(depth_scale=1.5)
    forward = evaluate(samples, predictor)
    backward = evaluate(list(reversed(samples)), predictor)
    assert forward.aggregate == backward.aggregate
    assert forward.samples == backward.samples


def test_partial_and_total_failure(lattice_sample: SampleRecord) -> None:
    """Test that failing samples are recorded and all-failing raises."""
    broken = lattice_sample.replace(sf=None, m_sf=None)
    report = evaluate([("good", lattice_sample), ("bad", broken)], OraclePredictor())
    assert report.failures == 1
    assert report.status == 2
    assert report.samples[0].name == "bad" and report.samples[0].error
    with pytest.raises(EvaluationError):
        evaluate([("bad", broken)], OraclePredictor())



def test_non_finite_prediction_is_a_sample_failure(lattice_sample: SampleRecord) -> None:
    """Test that a NaN prediction excludes its sample instead of aborting the run."""
    oracle = OraclePredictor()

    def predictor(sample: SampleRecord) -> PredictorOutput:
        if sample.metric:
            return oracle(sample)
        x1, x2 = gt_pointmaps(sample)
        return PredictorOutput(x1_hat=x1, x2_hat=x2, sf_hat=FieldGrid(data=np.full((16, 16, 3), np.nan)))

    samples = [("good", lattice_sample.replace(metric=True)), ("nan", lattice_sample.replace(metric=False))]
    report = evaluate(samples, predictor)
    assert report.failures == 1
    assert report.status == 2
    assert "non-finite" in report.samples[1].error
    assert report.aggregate.epe == 0.0


def test_report_invariants() -> None:
    """Test that acc_s above acc_r is rejected."""
    with pytest.raises(EvaluationError):
        MetricsReport(
            epe=0.0, acc_s=0.9, acc_r=0.5, out=0.0, absrel_r=0.0, delta1_r=1.0, absrel_m=0.0, delta1_m=1.0,
            valid_count=1, depth_count=1, alignment_scale=1.0,
        )


def test_predictor_factory() -> None:
    """Test predictor creation by name."""
    assert set(PredictorFactory.get_supported_predictors()) == {"oracle", "dof"}
    assert isinstance(PredictorFactory.create_predictor("DOF", depth_scale=2.0), DOFPredictor)
    assert PredictorFactory.create_predictor("dof", frame="world", from_pointmaps=True).from_pointmaps
    with pytest.raises(ValueError):
        PredictorFactory.create_predictor("raft")
