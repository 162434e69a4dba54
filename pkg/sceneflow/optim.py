"""Scale-adaptive losses over predicted pointmaps and scene flow.

The total loss is L = L_X + L_S + w * L_mu, where L_X and L_S are masked L1
sums over pointmaps and scene flow and L_mu compares the optical flow implied
by the prediction with the ground-truth flow. Depending on the scale strategy
and the sample's metric flag, L_X and L_S compare raw values, values divided
by their own mean-distance scale factor, or predictions rescaled by a median
ratio onto the ground truth.

All internals run on float64 arrays so that analytic subgradients can be
audited against central finite differences.
"""
import logging
from enum import Enum
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from config import settings
from sceneflow.camera import CameraIntrinsics
from sceneflow.evaluation import PredictorOutput
from sceneflow.grids import FieldGrid, SceneFlowError, as_bool, as_f64
from sceneflow.recipe import gt_pointmaps
from sceneflow.tensors import SampleRecord

logger = logging.getLogger(__name__)

DIVERGENCE_PATIENCE = 10


class LossError(SceneFlowError):
    """Raised when a loss cannot be evaluated on the given inputs."""
    pass


class ScaleError(LossError):
    """Raised when a scale factor is undefined (no valid points)."""
    pass


class DivergenceError(LossError):
    """Raised when the fitter keeps increasing the loss."""
    pass


class ScaleStrategy(str, Enum):
    ALIGN = "align"
    ALWAYS = "always"
    NEVER = "never"
    XOR = "xor"


class NormMode(str, Enum):
    RAW = "raw"
    NORMALIZED = "normalized"
    ALIGNED = "aligned"


def effective_mode(strategy: Union[ScaleStrategy, str], metric_flag: bool) -> NormMode:
    """Resolve how L_X and L_S treat scale for one sample."""
    strategy = ScaleStrategy(strategy)
    if strategy == ScaleStrategy.ALIGN:
        return NormMode.ALIGNED
    if strategy == ScaleStrategy.NEVER:
        return NormMode.RAW
    if strategy == ScaleStrategy.ALWAYS:
        return NormMode.NORMALIZED
    return NormMode.RAW if metric_flag else NormMode.NORMALIZED


class LossReport(BaseModel):
    """Loss terms, their combination and the scale factors behind them."""

    l_x: float = Field(ge=0)
    l_s: float = Field(ge=0)
    l_mu: float = Field(ge=0)
    total: float = Field(ge=0)
    z_gt: float
    z_pred: float
    strategy: ScaleStrategy
    mode: NormMode
    mu_weight: float
    align_scale: Optional[float] = None
    l_x_mean: float = 0.0
    l_s_mean: float = 0.0
    l_mu_mean: float = 0.0
    mu_excluded: int = 0
    valid_points: int = 0
    valid_sf: int = 0


class FieldSet(NamedTuple):
    """Predicted free fields as float64 arrays."""

    x1: np.ndarray
    x2: np.ndarray
    sf: np.ndarray

    @classmethod
    def of(cls, prediction: Union["FieldSet", PredictorOutput]) -> "FieldSet":
        if isinstance(prediction, FieldSet):
            return cls(*(np.asarray(f, dtype=np.float64) for f in prediction))
        return cls(prediction.x1_hat.as_f64(), prediction.x2_hat.as_f64(), prediction.sf_hat.as_f64())

    def to_prediction(self) -> PredictorOutput:
        return PredictorOutput(
            x1_hat=FieldGrid(data=self.x1), x2_hat=FieldGrid(data=self.x2), sf_hat=FieldGrid(data=self.sf)
        )

    def scaled(self, s: float) -> "FieldSet":
        return FieldSet(self.x1 * s, self.x2 * s, self.sf * s)


class LossTargets(NamedTuple):
    """Ground truth of one sample, prepared once for repeated evaluation."""

    x1: np.ndarray
    x2: np.ndarray
    sf: np.ndarray
    flow: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    ms: np.ndarray
    k: CameraIntrinsics
    metric: bool

    @classmethod
    def from_sample(cls, sample: SampleRecord) -> "LossTargets":
        if sample.sf is None:
            raise LossError("sample has no ground-truth scene flow; run the recipe first")
        if sample.sf_kind != "cso":
            raise LossError(f"ground-truth scene flow must be CSO, got {sample.sf_kind}")
        if sample.x1 is not None and sample.x2 is not None:
            x1, x2 = sample.x1, sample.x2
        else:
            x1, x2 = gt_pointmaps(sample)
        return cls(
            x1=x1.as_f64(),
            x2=x2.as_f64(),
            sf=sample.sf.as_f64(),
            flow=sample.flow_fwd.as_f64(),
            m1=sample.mask("d1").as_bool(),
            m2=sample.mask("d2").as_bool(),
            ms=sample.mask("sf").as_bool(),
            k=sample.intrinsics,
            metric=bool(sample.metric),
        )


class LossGradient(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray
    sf: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x1.ravel(), self.x2.ravel(), self.sf.ravel()])


def _norms(points: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(points * points, axis=-1))


def scale_factor(x1, x2, m1, m2) -> float:
    """Mean distance from the camera-1 origin over the valid points of both views.

    Raises:
        ScaleError: If neither view has a valid point
    """
    p1, p2 = as_f64(x1), as_f64(x2)
    b1, b2 = as_bool(m1, p1.shape[:2]), as_bool(m2, p2.shape[:2])
    count = int(b1.sum() + b2.sum())
    if count == 0:
        raise ScaleError("scale factor undefined: no valid points")
    return float((_norms(p1)[b1].sum() + _norms(p2)[b2].sum()) / count)


def _median_selection(ratios: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Median of ``ratios`` plus the indices and weights that define it."""
    order = np.argsort(ratios, kind="stable")
    n = ratios.size
    if n % 2:
        idx = order[n // 2 : n // 2 + 1]
        weights = np.array([1.0])
    else:
        idx = order[n // 2 - 1 : n // 2 + 1]
        weights = np.array([0.5, 0.5])
    return float(np.dot(weights, ratios[idx])), idx, weights


def align_ratios(gt: List[np.ndarray], pred: List[np.ndarray], masks: List[np.ndarray]):
    """Per-pixel ratios |gt| / |pred| over valid pixels with a non-zero prediction.

    Returns (ratios, views, flat indices) so the selection can be traced back.
    """
    ratios, views, where = [], [], []
    for view, (g, p, m) in enumerate(zip(gt, pred, masks)):
        pn = _norms(p).ravel()
        gn = _norms(g).ravel()
        usable = m.ravel() & (pn > 0)
        index = np.flatnonzero(usable)
        ratios.append(gn[index] / pn[index])
        views.append(np.full(index.size, view))
        where.append(index)
    ratios = np.concatenate(ratios)
    if ratios.size == 0:
        raise ScaleError("alignment scale undefined: no valid pixel with a non-zero prediction")
    return ratios, np.concatenate(views), np.concatenate(where)


def fitted_align_scale(gt: List[np.ndarray], pred: List[np.ndarray], masks: List[np.ndarray]) -> float:
    ratios, _, _ = align_ratios(gt, pred, masks)
    return _median_selection(ratios)[0]


class PointmapTerm(NamedTuple):
    value: float
    z_gt: float
    z_pred: float
    mode: NormMode
    align_scale: Optional[float]
    count: int


def loss_pointmaps(pred1, pred2, gt1, gt2, m1, m2, metric_flag: bool, strategy) -> PointmapTerm:
    """L_X: masked L1 over both pointmaps under the effective scale mode."""
    p = [as_f64(pred1), as_f64(pred2)]
    g = [as_f64(gt1), as_f64(gt2)]
    m = [as_bool(m1, g[0].shape[:2]), as_bool(m2, g[1].shape[:2])]
    mode = effective_mode(strategy, metric_flag)
    z_gt = scale_factor(g[0], g[1], m[0], m[1])
    z_pred = scale_factor(p[0], p[1], m[0], m[1])
    a, b, s = _scales(mode, z_gt, z_pred, g, p, m)
    value = sum(_masked_l1(_residual(pv, gv, a, b), mv) for pv, gv, mv in zip(p, g, m))
    return PointmapTerm(value, z_gt, z_pred, mode, s, int(m[0].sum() + m[1].sum()))


def _multipliers(mode: NormMode, z_gt: float, z_pred: float, align_scale: Optional[float]) -> Tuple[float, float]:
    """Return (pred multiplier, gt multiplier) for the residual a*pred - b*gt."""
    if mode == NormMode.RAW:
        return 1.0, 1.0
    if mode == NormMode.NORMALIZED:
        if z_pred <= 0 or z_gt <= 0:
            raise ScaleError("cannot normalize by a zero scale factor")
        return 1.0 / z_pred, 1.0 / z_gt
    if align_scale is None:
        raise ScaleError("aligned loss needs the pointmap alignment scale")
    return align_scale, 1.0


def _scales(mode: NormMode, z_gt: float, z_pred: float, g, p, m) -> Tuple[float, float, Optional[float]]:
    s = fitted_align_scale(g, p, m) if mode == NormMode.ALIGNED else None
    a, b = _multipliers(mode, z_gt, z_pred, s)
    return a, b, s


def _residual(pred: np.ndarray, gt: np.ndarray, a: float, b: float) -> np.ndarray:
    return a * pred - b * gt


def _masked_l1(residual: np.ndarray, mask: np.ndarray) -> float:
    return float(np.abs(residual)[mask].sum())


def loss_sceneflow(
    pred_sf,
    gt_sf,
    m_sf,
    metric_flag: bool,
    strategy,
    z_gt: float,
    z_pred: float,
    align_scale: Optional[float] = None,
) -> float:
    """L_S: masked L1 over scene flow, sharing the pointmap scale factors."""
    ps, gs = as_f64(pred_sf), as_f64(gt_sf)
    ms = as_bool(m_sf, gs.shape[:2])
    a, b = _multipliers(effective_mode(strategy, metric_flag), z_gt, z_pred, align_scale)
    return _masked_l1(_residual(ps, gs, a, b), ms)


class FlowTerm(NamedTuple):
    value: float
    count: int
    excluded: int


def _projected_flow(x1: np.ndarray, sf: np.ndarray, k: CameraIntrinsics):
    a = x1 + sf
    za, zb = a[..., 2], x1[..., 2]
    ok = (za > 0) & (zb > 0)
    za_s = np.where(ok, za, 1.0)
    zb_s = np.where(ok, zb, 1.0)
    mu = np.stack(
        [
            k.fx * (a[..., 0] / za_s - x1[..., 0] / zb_s),
            k.fy * (a[..., 1] / za_s - x1[..., 1] / zb_s),
        ],
        axis=-1,
    )
    return mu, ok, a, za_s, zb_s


class _FlowResidual(NamedTuple):
    residual: np.ndarray
    used: np.ndarray
    ok: np.ndarray
    end: np.ndarray
    za: np.ndarray
    zb: np.ndarray


def _flow_residual(
    x1: np.ndarray, sf: np.ndarray, flow: np.ndarray, ms: np.ndarray, k: CameraIntrinsics
) -> _FlowResidual:
    mu_hat, ok, end, za, zb = _projected_flow(x1, sf, k)
    return _FlowResidual(mu_hat - flow, ms & ok, ok, end, za, zb)


def loss_flow(pred_x1, pred_sf, gt_flow, m_sf, k: CameraIntrinsics) -> FlowTerm:
    """L_mu: masked L1 between GT flow and the flow implied by (x1, sf).

    Pixels where either projection has non-positive depth are left out of the
    sum and counted in ``excluded``.
    """
    x1, sf = as_f64(pred_x1), as_f64(pred_sf)
    flow = as_f64(gt_flow)
    ms = as_bool(m_sf, x1.shape[:2])
    r = _flow_residual(x1, sf, flow, ms, k)
    return FlowTerm(_masked_l1(r.residual, r.used), int(r.used.sum()), int((ms & ~r.ok).sum()))


class _Evaluation(NamedTuple):
    report: LossReport
    gradient: Optional[LossGradient]
    signature: Tuple


def _evaluate(
    t: LossTargets,
    f: FieldSet,
    strategy: ScaleStrategy,
    mu_weight: float,
    with_gradient: bool,
) -> _Evaluation:
    mode = effective_mode(strategy, t.metric)
    g = [t.x1, t.x2]
    p = [f.x1, f.x2]
    m = [t.m1, t.m2]
    z_gt = scale_factor(g[0], g[1], m[0], m[1])
    z_pred = scale_factor(p[0], p[1], m[0], m[1])

    align_idx = None
    if mode == NormMode.ALIGNED:
        ratios, views, where = align_ratios(g, p, m)
        align_scale, sel, weights = _median_selection(ratios)
        align_idx = (views[sel], where[sel], weights)
    else:
        align_scale = None
    a, b = _multipliers(mode, z_gt, z_pred, align_scale)

    res_x = [_residual(pv, gv, a, b) for pv, gv in zip(p, g)]
    l_x = sum(_masked_l1(r, mv) for r, mv in zip(res_x, m))
    res_s = _residual(f.sf, t.sf, a, b)
    l_s = _masked_l1(res_s, t.ms)

    res_mu, used, ok, end, za, zb = _flow_residual(f.x1, f.sf, t.flow, t.ms, t.k)
    l_mu = _masked_l1(res_mu, used)
    if not np.isfinite([l_x, l_s, l_mu]).all():
        raise LossError(f"loss is not finite (l_x={l_x}, l_s={l_s}, l_mu={l_mu})")

    n_points = int(m[0].sum() + m[1].sum())
    n_sf = int(t.ms.sum())
    n_mu = int(used.sum())
    report = LossReport(
        l_x=l_x,
        l_s=l_s,
        l_mu=l_mu,
        total=l_x + l_s + mu_weight * l_mu,
        z_gt=z_gt,
        z_pred=z_pred,
        strategy=strategy,
        mode=mode,
        mu_weight=mu_weight,
        align_scale=align_scale,
        l_x_mean=l_x / n_points if n_points else 0.0,
        l_s_mean=l_s / n_sf if n_sf else 0.0,
        l_mu_mean=l_mu / n_mu if n_mu else 0.0,
        mu_excluded=int((t.ms & ~ok).sum()),
        valid_points=n_points,
        valid_sf=n_sf,
    )

    sign_x = [np.where(mv[..., None], np.sign(r), 0.0) for r, mv in zip(res_x, m)]
    sign_s = np.where(t.ms[..., None], np.sign(res_s), 0.0)
    sign_mu = np.where(used[..., None], np.sign(res_mu), 0.0)
    signature = (
        tuple(sx.astype(np.int8).tobytes() for sx in sign_x),
        sign_s.astype(np.int8).tobytes(),
        sign_mu.astype(np.int8).tobytes(),
        ok.tobytes(),
        None if align_idx is None else (align_idx[0].tobytes(), align_idx[1].tobytes()),
    )
    if not with_gradient:
        return _Evaluation(report, None, signature)

    grad_p = [a * sx for sx in sign_x]
    grad_sf = a * sign_s
    # d(L_X + L_S) / d(pred multiplier)
    c = sum(float(np.sum(sx * pv)) for sx, pv in zip(sign_x, p)) + float(np.sum(sign_s * f.sf))

    if mode == NormMode.NORMALIZED:
        dz = -c / (z_pred * z_pred)
        for pv, mv, gp in zip(p, m, grad_p):
            norms = _norms(pv)
            safe = np.where(norms > 0, norms, 1.0)
            coeff = np.where(mv & (norms > 0), dz / (n_points * safe), 0.0)
            gp += coeff[..., None] * pv
    elif mode == NormMode.ALIGNED:
        sel_views, sel_where, weights = align_idx
        for view, flat, w in zip(sel_views, sel_where, weights):
            row, col = np.unravel_index(flat, g[view].shape[:2])
            pv = p[view][row, col]
            gn = np.sqrt(np.dot(g[view][row, col], g[view][row, col]))
            pn = np.sqrt(np.dot(pv, pv))
            grad_p[view][row, col] += c * w * (-gn * pv / pn ** 3)

    # Chain rule through the pinhole projection of end (x1 + sf) and start (x1).
    gu = mu_weight * sign_mu[..., 0]
    gv = mu_weight * sign_mu[..., 1]
    d_end = np.stack(
        [gu * t.k.fx / za, gv * t.k.fy / za, -(gu * t.k.fx * end[..., 0] + gv * t.k.fy * end[..., 1]) / (za * za)],
        axis=-1,
    )
    d_start = -np.stack(
        [gu * t.k.fx / zb, gv * t.k.fy / zb, -(gu * t.k.fx * f.x1[..., 0] + gv * t.k.fy * f.x1[..., 1]) / (zb * zb)],
        axis=-1,
    )
    grad_x1 = grad_p[0] + d_end + d_start
    grad_sf = grad_sf + d_end
    return _Evaluation(report, LossGradient(grad_x1, grad_p[1], grad_sf), signature)


def _resolve(strategy, mu_weight) -> Tuple[ScaleStrategy, float]:
    strategy = ScaleStrategy(settings.STRATEGY if strategy is None else strategy)
    mu_weight = settings.MU_WEIGHT if mu_weight is None else float(mu_weight)
    return strategy, mu_weight


def total_loss(
    sample: SampleRecord,
    prediction: Union[PredictorOutput, FieldSet],
    strategy: Optional[Union[ScaleStrategy, str]] = None,
    mu_weight: Optional[float] = None,
) -> LossReport:
    """Evaluate L = L_X + L_S + mu_weight * L_mu for one sample.

    Args:
        sample: Sample with GT scene flow (CSO) and, optionally, GT pointmaps
        prediction: Predicted x1, x2 (camera-1 frame) and scene flow
        strategy: Scale strategy, settings default
        mu_weight: Weight of the projected-flow term, settings default (0.1)

    Returns:
        LossReport
    """
    strategy, mu_weight = _resolve(strategy, mu_weight)
    return _evaluate(LossTargets.from_sample(sample), FieldSet.of(prediction), strategy, mu_weight, False).report


def loss_gradient(
    sample: SampleRecord,
    prediction: Union[PredictorOutput, FieldSet],
    strategy: Optional[Union[ScaleStrategy, str]] = None,
    mu_weight: Optional[float] = None,
) -> LossGradient:
    """Analytic subgradient of ``total_loss`` w.r.t. every predicted value.

    The L1 subgradient is 0 at an exact zero residual.
    """
    strategy, mu_weight = _resolve(strategy, mu_weight)
    return _evaluate(LossTargets.from_sample(sample), FieldSet.of(prediction), strategy, mu_weight, True).gradient


def fit_free_parameters(
    sample: SampleRecord,
    init_prediction: Union[PredictorOutput, FieldSet],
    strategy: Optional[Union[ScaleStrategy, str]] = None,
    steps: Optional[int] = None,
    step_size: Optional[float] = None,
    mu_weight: Optional[float] = None,
    line_search: bool = True,
    tol: float = 1e-4,
    min_step: float = 1e-12,
) -> Tuple[FieldSet, List[LossReport]]:
    """Subgradient descent on the per-pixel predicted fields.

    With ``line_search`` the step is halved until the total strictly
    decreases, so the trajectory never increases; descent stops when the
    total falls below ``tol``, no step size helps, or ``steps`` run out.
    Without it every step is taken and ten consecutive increases raise
    DivergenceError.

    Returns:
        The fitted fields and the loss trajectory (initial report first)
    """
    strategy, mu_weight = _resolve(strategy, mu_weight)
    steps = settings.FIT_STEPS if steps is None else steps
    max_step = settings.FIT_STEP_SIZE if step_size is None else step_size
    if steps < 0 or max_step <= 0:
        raise LossError(f"fit needs steps >= 0 and a positive step size, got {steps} and {max_step}")
    step = max_step
    targets = LossTargets.from_sample(sample)
    fields = FieldSet.of(init_prediction)
    current = _evaluate(targets, fields, strategy, mu_weight, True)
    trajectory = [current.report]
    increases = 0

    for iteration in range(steps):
        if current.report.total <= tol:
            logger.debug(f"Fit converged at step {iteration}: total {current.report.total:.3e}")
            break
        grad = current.gradient
        if line_search:
            candidate = None
            trial = step
            while trial >= min_step:
                moved = FieldSet(fields.x1 - trial * grad.x1, fields.x2 - trial * grad.x2, fields.sf - trial * grad.sf)
                try:
                    total = _evaluate(targets, moved, strategy, mu_weight, False).report.total
                except LossError:
                    total = np.inf
                if total < current.report.total:
                    candidate = moved
                    break
                trial *= 0.5
            if candidate is None:
                logger.debug(f"Line search found no descent at step {iteration}; stopping")
                break
            step = min(trial * 1.5, max_step)
            fields = candidate
            current = _evaluate(targets, fields, strategy, mu_weight, True)
        else:
            fields = FieldSet(fields.x1 - step * grad.x1, fields.x2 - step * grad.x2, fields.sf - step * grad.sf)
            previous = current.report.total
            try:
                current = _evaluate(targets, fields, strategy, mu_weight, True)
            except LossError as e:
                raise DivergenceError(f"fit diverged at step {iteration + 1}: {e}") from e
            increases = increases + 1 if current.report.total > previous else 0
            if increases >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"total loss increased for {DIVERGENCE_PATIENCE} consecutive steps (now {current.report.total:.6g})"
                )
        trajectory.append(current.report)

    logger.info(
        f"Fit finished after {len(trajectory) - 1} accepted steps: "
        f"total {trajectory[0].total:.6g} -> {trajectory[-1].total:.6g}"
    )
    return fields, trajectory


class GradientAudit(BaseModel):
    """Analytic-versus-finite-difference comparison of the loss gradient."""

    max_rel_error: float
    checked: int
    skipped: int
    step: float
    strategy: ScaleStrategy


def gradient_audit(
    sample: SampleRecord,
    prediction: Union[PredictorOutput, FieldSet],
    strategy: Optional[Union[ScaleStrategy, str]] = None,
    mu_weight: Optional[float] = None,
    h: Optional[float] = None,
    floor: float = 1e-6,
) -> GradientAudit:
    """Compare analytic gradients with central differences on every coordinate.

    A coordinate is checked only when the sign pattern of every residual (and
    the median selection, under Align) is the same at x - h, x and x + h;
    otherwise it straddles a kink and is skipped.
    """
    strategy, mu_weight = _resolve(strategy, mu_weight)
    h = settings.FD_STEP if h is None else h
    targets = LossTargets.from_sample(sample)
    fields = FieldSet.of(prediction)
    center = _evaluate(targets, fields, strategy, mu_weight, True)
    analytic = center.gradient.flat()

    base = [fields.x1.copy(), fields.x2.copy(), fields.sf.copy()]
    sizes = [arr.size for arr in base]
    offsets = np.cumsum([0] + sizes)
    worst, checked, skipped = 0.0, 0, 0
    for index in range(int(offsets[-1])):
        which = int(np.searchsorted(offsets, index, side="right") - 1)
        flat = base[which].reshape(-1)
        local = index - offsets[which]
        original = flat[local]
        flat[local] = original + h
        plus = _evaluate(targets, FieldSet(*base), strategy, mu_weight, False)
        flat[local] = original - h
        minus = _evaluate(targets, FieldSet(*base), strategy, mu_weight, False)
        flat[local] = original
        if plus.signature != center.signature or minus.signature != center.signature:
            skipped += 1
            continue
        numeric = (plus.report.total - minus.report.total) / (2.0 * h)
        exact = analytic[index]
        denom = max(abs(exact), abs(numeric))
        error = 0.0 if denom < floor else abs(exact - numeric) / denom
        worst = max(worst, error)
        checked += 1

    logger.info(f"Gradient audit ({strategy.value}): {checked} checked, {skipped} skipped, max rel error {worst:.3e}")
    return GradientAudit(max_rel_error=worst, checked=checked, skipped=skipped, step=h, strategy=strategy)
