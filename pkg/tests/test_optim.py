"""Tests for the scale-adaptive losses, their gradients and the fitter."""
import numpy as np
import pytest

from sceneflow.camera import CameraIntrinsics
from sceneflow.grids import FieldGrid, ValidityMask
from sceneflow.optim import (
    DivergenceError,
    FieldSet,
    LossError,
    LossTargets,
    NormMode,
    ScaleError,
    ScaleStrategy,
    effective_mode,
    fit_free_parameters,
    gradient_audit,
    loss_flow,
    loss_gradient,
    loss_pointmaps,
    loss_sceneflow,
    scale_factor,
    total_loss,
)
from sceneflow.tensors import SampleRecord
from tests.builders import random_sample, rendered


def _noisy(sample: SampleRecord, noise: float, seed: int) -> FieldSet:
    targets = LossTargets.from_sample(sample)
    rng = np.random.default_rng(seed)
    return FieldSet(
        targets.x1 + rng.uniform(-noise, noise, targets.x1.shape),
        targets.x2 + rng.uniform(-noise, noise, targets.x2.shape),
        targets.sf + rng.uniform(-noise, noise, targets.sf.shape),
    )


def _exact(sample: SampleRecord) -> FieldSet:
    targets = LossTargets.from_sample(sample)
    return FieldSet(targets.x1, targets.x2, targets.sf)


@pytest.mark.parametrize(
    "strategy, metric, expected",
    [
        ("align", True, NormMode.ALIGNED),
        ("align", False, NormMode.ALIGNED),
        ("always", True, NormMode.NORMALIZED),
        ("never", False, NormMode.RAW),
        ("xor", True, NormMode.RAW),
        ("xor", False, NormMode.NORMALIZED),
    ],
)
def test_effective_mode(strategy: str, metric: bool, expected: NormMode) -> None:
    """Test how strategy and metric flag select the normalization."""
    assert effective_mode(strategy, metric) == expected


def test_xor_is_scale_invariant_on_relative_samples(lattice_sample: SampleRecord) -> None:
    """Test that jointly scaling a prediction leaves the Xor loss unchanged."""
    sample = lattice_sample.replace(metric=False)
    prediction = _noisy(sample, 0.1, 0)
    base = total_loss(sample, prediction, strategy="xor").total
    for s in (0.1, 1.0, 10.0):
        scaled = total_loss(sample, prediction.scaled(s), strategy="xor").total
        assert abs(scaled - base) <= 1e-6 * base


def test_xor_penalizes_scale_on_metric_samples(lattice_sample: SampleRecord) -> None:
    """Test that scaling an exact prediction raises l_x on metric samples."""
    sample = lattice_sample.replace(metric=True)
    exact = _exact(sample)
    assert total_loss(sample, exact, strategy="xor").l_x == 0.0
    for s in (0.1, 10.0):
        assert total_loss(sample, exact.scaled(s), strategy="xor").l_x > 0.0


def test_total_is_weighted_sum() -> None:
    """Test total == l_x + l_s + 0.1 * l_mu on 100 random samples."""
    rng = np.random.default_rng(5)
    strategies = list(ScaleStrategy)
    for index in range(100):
        base = random_sample(rng, height=4, width=4, optional=False)
        sample = base.replace(
            sf=FieldGrid(data=rng.uniform(-0.5, 0.5, size=(4, 4, 3))),
            x1=FieldGrid(data=rng.uniform(1.0, 3.0, size=(4, 4, 3))),
            x2=FieldGrid(data=rng.uniform(1.0, 3.0, size=(4, 4, 3))),
        )
        prediction = _noisy(sample, 0.2, index)
        report = total_loss(sample, prediction, strategy=strategies[index % 4])
        expected = report.l_x + report.l_s + 0.1 * report.l_mu
        assert report.mu_weight == 0.1
        assert abs(report.total - expected) <= 1e-6 * max(expected, 1e-12)


def test_exact_prediction_has_zero_loss(lattice_sample: SampleRecord) -> None:
    """Test the loss terms at the ground truth for every strategy."""
    for strategy in ScaleStrategy:
        report = total_loss(lattice_sample, _exact(lattice_sample), strategy=strategy)
        assert report.l_x == 0.0
        assert report.l_s == 0.0
        assert report.l_mu_mean < 1e-3
        if strategy == ScaleStrategy.ALIGN:
            assert report.align_scale == pytest.approx(1.0)


def test_mu_weight_zero_drops_flow_term(lattice_sample: SampleRecord) -> None:
    """Test the ablation without the projected-flow loss."""
    prediction = _noisy(lattice_sample, 0.1, 1)
    report = total_loss(lattice_sample, prediction, mu_weight=0.0)
    assert report.total == pytest.approx(report.l_x + report.l_s)
    assert report.l_mu > 0.0


def test_scale_factor_and_errors() -> None:
    """Test the mean-distance scale factor and its undefined case."""
    points = np.zeros((1, 2, 3))
    points[0, 0] = [3.0, 4.0, 0.0]
    points[0, 1] = [0.0, 0.0, 2.0]
    assert scale_factor(points, points, None, None) == pytest.approx(3.5)

    empty = ValidityMask(bits=np.zeros((1, 2), dtype=np.uint8))
    with pytest.raises(ScaleError):
        scale_factor(points, points, empty, empty)
    with pytest.raises(ScaleError):
        loss_pointmaps(points, points, points, points, empty, empty, False, "xor")


def test_loss_needs_cso_ground_truth(lattice_sample: SampleRecord) -> None:
    """Test that samples without CSO scene flow are rejected."""
    with pytest.raises(LossError):
        total_loss(lattice_sample.replace(sf=None, m_sf=None), _exact(lattice_sample))
    with pytest.raises(LossError):
        total_loss(lattice_sample.replace(sf_kind="ep"), _exact(lattice_sample))


@pytest.mark.parametrize("strategy", ["align", "always", "never", "xor"])
def test_gradient_audit(strategy: str) -> None:
    """Test analytic gradients against central differences on 10 samples."""
    for seed in range(10):
        sample, _ = rendered(seed, size=8)
        audit = gradient_audit(sample, _noisy(sample, 0.1, seed), strategy=strategy, h=1e-4)
        assert audit.checked > 0
        assert audit.max_rel_error < 1e-4, f"seed {seed}"


def test_gradient_shapes(lattice_sample: SampleRecord) -> None:
    """Test that the gradient covers every predicted field."""
    gradient = loss_gradient(lattice_sample, _noisy(lattice_sample, 0.1, 2))
    assert gradient.x1.shape == gradient.x2.shape == gradient.sf.shape == (16, 16, 3)
    assert gradient.flat().size == 3 * 16 * 16 * 3


def test_fitter_recovers_ground_truth() -> None:
    """Test that descent from GT + noise recovers the scene flow."""
    sample, _ = rendered(4, size=16)
    sample = sample.replace(metric=True)
    targets = LossTargets.from_sample(sample)
    fields, trajectory = fit_free_parameters(sample, _noisy(sample, 0.1, 4), strategy="xor", steps=2000)

    assert trajectory[-1].total <= 0.01 * trajectory[0].total
    totals = [report.total for report in trajectory]
    assert all(later < earlier for earlier, later in zip(totals, totals[1:]))
    epe = np.sqrt(np.sum((fields.sf - targets.sf) ** 2, axis=-1))[targets.ms]
    assert epe.mean() <= 1e-2


def test_fitter_without_line_search(lattice_sample: SampleRecord) -> None:
    """Test plain fixed-step descent still lowers the loss."""
    _, trajectory = fit_free_parameters(
        lattice_sample, _noisy(lattice_sample, 0.1, 3), strategy="never", steps=20, step_size=1e-3, line_search=False
    )
    assert len(trajectory) == 21
    assert trajectory[-1].total < trajectory[0].total


def test_fitter_stops_at_ground_truth(lattice_sample: SampleRecord) -> None:
    """Test that a fit started at the ground truth takes no step."""
    sample = lattice_sample.replace(metric=True)
    exact = _exact(sample)
    fields, trajectory = fit_free_parameters(sample, exact, strategy="xor", steps=50)
    assert len(trajectory) == 1
    assert trajectory[0].l_x == 0.0 and trajectory[0].l_s == 0.0
    assert np.array_equal(fields.sf, exact.sf)


def test_align_fit_recovers_only_up_to_scale(lattice_sample: SampleRecord) -> None:
    """Test that Align accepts a uniformly rescaled ground truth as optimal."""
    targets = LossTargets.from_sample(lattice_sample)
    init = _exact(lattice_sample).scaled(3.0)
    fields, trajectory = fit_free_parameters(lattice_sample, init, strategy="align", steps=50)
    assert trajectory[0].l_x <= 1e-9 and trajectory[0].l_s <= 1e-9
    final = trajectory[-1]
    assert final.align_scale == pytest.approx(1.0 / 3.0, rel=1e-2)
    aligned = final.align_scale * fields.sf
    assert np.abs(aligned - targets.sf)[targets.ms].max() <= 0.05
    ratio = np.linalg.norm(fields.x1, axis=-1)[targets.m1] / np.linalg.norm(targets.x1, axis=-1)[targets.m1]
    assert np.median(ratio) == pytest.approx(3.0, rel=0.05)
    # Metric comparison still sees the scale error.
    assert total_loss(lattice_sample, fields, strategy="never").l_x > 1.0


def test_fitter_divergence(lattice_sample: SampleRecord) -> None:
    """Test that fixed-step descent with an absurd step raises DivergenceError."""
    with pytest.raises(DivergenceError):
        fit_free_parameters(
            lattice_sample,
            _noisy(lattice_sample, 0.1, 6),
            strategy="never",
            steps=5,
            step_size=1e308,
            line_search=False,
        )
    with pytest.raises(LossError):
        fit_free_parameters(lattice_sample, _exact(lattice_sample), step_size=0.0)


def test_flow_gradient_ignores_joint_rescaling(lattice_sample: SampleRecord) -> None:
    """Test that the l_mu gradient is orthogonal to scaling x1 and sf together."""
    prediction = _noisy(lattice_sample, 0.1, 7)
    with_flow = loss_gradient(lattice_sample, prediction, strategy="never", mu_weight=1.0)
    without = loss_gradient(lattice_sample, prediction, strategy="never", mu_weight=0.0)
    d_x1 = with_flow.x1 - without.x1
    d_sf = with_flow.sf - without.sf
    assert np.abs(d_sf).max() > 0.0
    directional = float(np.sum(d_x1 * prediction.x1) + np.sum(d_sf * prediction.sf))
    assert abs(directional) <= 1e-6


def test_pointmap_loss_single_offset(lattice_sample: SampleRecord) -> None:
    """Test a unit offset at one metric pixel under Never."""
    targets = LossTargets.from_sample(lattice_sample)
    moved = targets.x1.copy()
    moved[3, 5] += [1.0, 0.0, 0.0]
    term = loss_pointmaps(moved, targets.x2, targets.x1, targets.x2, targets.m1, targets.m2, True, "never")
    assert term.mode == NormMode.RAW
    assert term.value == pytest.approx(1.0)


def test_sceneflow_loss_terms() -> None:
    """Test L_S on one pixel and its shared normalization."""
    gt = np.zeros((1, 1, 3))
    pred = np.array([[[0.1, 0.2, 0.3]]])
    assert loss_sceneflow(pred, gt, None, True, "never", 1.0, 1.0) == pytest.approx(0.6)
    assert loss_sceneflow(gt, gt, None, False, "xor", 2.0, 3.0) == 0.0

    rng = np.random.default_rng(11)
    pred, gt = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    base = loss_sceneflow(pred, gt, None, False, "xor", 2.0, 3.0)
    for s in (0.5, 4.0):
        assert loss_sceneflow(s * pred, gt, None, False, "xor", 2.0, s * 3.0) == pytest.approx(base, rel=1e-9)
    with pytest.raises(ScaleError):
        loss_sceneflow(pred, gt, None, True, "align", 2.0, 3.0)


def test_flow_loss_terms(intrinsics: CameraIntrinsics) -> None:
    """Test L_mu as an L1 sum, its scale invariance and excluded pixels."""
    x1 = np.array([[[0.0, 0.0, 2.0]]])
    term = loss_flow(x1, np.zeros((1, 1, 3)), np.array([[[-3.0, -4.0]]]), None, intrinsics)
    assert term.value == pytest.approx(7.0)
    assert (term.count, term.excluded) == (1, 0)

    rng = np.random.default_rng(12)
    x1 = np.concatenate([rng.uniform(-1, 1, (4, 4, 2)), rng.uniform(2, 5, (4, 4, 1))], axis=-1)
    sf = rng.uniform(-0.3, 0.3, (4, 4, 3))
    flow = rng.uniform(-2, 2, (4, 4, 2))
    base = loss_flow(x1, sf, flow, None, intrinsics).value
    for s in (0.2, 7.0):
        assert loss_flow(s * x1, s * sf, flow, None, intrinsics).value == pytest.approx(base, abs=1e-5)

    behind = x1.copy()
    behind[0, 0, 2] = -1.0
    assert loss_flow(behind, sf, flow, None, intrinsics).excluded == 1


@pytest.mark.parametrize("strategy", ["align", "always", "never", "xor"])
def test_total_loss_agrees_with_term_functions(lattice_sample: SampleRecord, strategy: str) -> None:
    """Test that total_loss reports the same terms as the standalone loss functions."""
    targets = LossTargets.from_sample(lattice_sample)
    prediction = _noisy(lattice_sample, 0.1, 8)
    report = total_loss(lattice_sample, prediction, strategy=strategy)
    points = loss_pointmaps(
        prediction.x1, prediction.x2, targets.x1, targets.x2, targets.m1, targets.m2, targets.metric, strategy
    )
    l_s = loss_sceneflow(
        prediction.sf, targets.sf, targets.ms, targets.metric, strategy, report.z_gt, report.z_pred, report.align_scale
    )
    flow = loss_flow(prediction.x1, prediction.sf, targets.flow, targets.ms, targets.k)
    assert report.l_x == pytest.approx(points.value, rel=1e-12)
    assert report.l_s == pytest.approx(l_s, rel=1e-12)
    assert report.l_mu == pytest.approx(flow.value, rel=1e-12)
    assert report.mu_excluded == flow.excluded
