"""Evaluation statistics and the paired one-tailed model comparison.

Implements mean absolute error, standard deviation of absolute errors
(sample, n-1 divisor), the coefficient of determination, and a paired
one-tailed t-test whose p-value comes from an exact Student-t upper tail
computed through the regularized incomplete beta function (continued
fraction evaluation, no normal approximation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DishRecord, _record_pixels
from .layers import Vectorizer
from .models import Model

# Published full-scale results, kept as reference metadata only: they need
# the full Nutrition5k corpus and are not desk-reproducible acceptance
# targets.
REFERENCE_RESULTS = {
    "unimodal": {"mae": 84.76, "abs_err_std": 86.21, "r2": 0.6512},
    "multimodal": {"mae": 83.70, "abs_err_std": 78.77, "r2": 0.6847},
    "t_test": {"n": 653, "t_stat": 0.6339, "p_value": 0.2623, "alpha": 0.1},
}


@dataclass
class PredictionSet:
    """Per-dish true and predicted calories, paired by index."""

    dish_ids: list[str]
    y_true: np.ndarray
    y_pred: np.ndarray

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.float64)
        self.y_pred = np.asarray(self.y_pred, dtype=np.float64)
        if not (len(self.dish_ids) == len(self.y_true) == len(self.y_pred)):
            raise ValueError(
                f"prediction set lengths differ: {len(self.dish_ids)} ids, "
                f"{len(self.y_true)} true, {len(self.y_pred)} predicted")

    def abs_errors(self) -> np.ndarray:
        return np.abs(self.y_pred - self.y_true)

    def __len__(self) -> int:
        return len(self.dish_ids)


@dataclass
class EvalReport:
    """MAE, std of absolute error, and R-squared over a prediction set."""

    mae: float
    abs_err_std: float
    r2: float
    n: int

    def to_kv_text(self) -> str:
        return (f"n={self.n}\nmae={self.mae!r}\nabs_err_std={self.abs_err_std!r}\n"
                f"r2={self.r2!r}\n")


@dataclass
class TTestResult:
    """Paired one-tailed t-test outcome for H1: mean difference > 0."""

    t_stat: float
    p_value: float
    df: int
    mean_diff: float
    sd_diff: float
    alpha: float
    reject_null: bool


def evaluate(model: Model, records: list[DishRecord], vectorizer: Vectorizer | None = None,
             image_size: int | None = None, batch_size: int = 64) -> PredictionSet:
    """Eval-mode predictions for every record, in input order, without
    augmentation."""
    if not records:
        raise ValueError("evaluate needs a non-empty record list")
    if image_size is None:
        image_size = model.cfg.image_size
    if vectorizer is None:
        vectorizer = model.vectorizer
    if model.kind == "multimodal" and vectorizer is None:
        raise ValueError("multimodal evaluation needs a vectorizer")
    preds = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = np.stack([_record_pixels(r, image_size) for r in chunk])
        ids = None
        if model.kind == "multimodal":
            ids = np.stack([vectorizer.vectorize(r.dish_name) for r in chunk])
        out = model.forward(images, ids, mode="eval")
        preds.append(out.data[:, 0])
    return PredictionSet(
        dish_ids=[r.dish_id for r in records],
        y_true=np.asarray([r.calories for r in records], dtype=np.float64),
        y_pred=np.concatenate(preds).astype(np.float64))


def report(ps: PredictionSet) -> EvalReport:
    """Summary statistics; the std column is the sample (n-1) standard
    deviation of absolute errors."""
    n = len(ps)
    if n < 2:
        raise ValueError(f"report needs at least 2 predictions, got {n}")
    errors = ps.abs_errors()
    sst = float(np.sum((ps.y_true - ps.y_true.mean()) ** 2))
    if sst == 0.0:
        raise ValueError("r2 undefined: zero variance in true calories")
    sse = float(np.sum((ps.y_true - ps.y_pred) ** 2))
    return EvalReport(
        mae=float(errors.mean()),
        abs_err_std=float(errors.std(ddof=1)),
        r2=1.0 - sse / sst,
        n=n)


# ---------------------------------------------------------------------------
# Student-t upper tail via the regularized incomplete beta function
# ---------------------------------------------------------------------------

_CF_EPS = 1e-16
_CF_FPMIN = 1e-300
_CF_MAX_ITER = 600


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Modified Lentz evaluation of the incomplete beta continued fraction."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_FPMIN:
        d = _CF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to roughly machine precision for moderate a, b."""
    if a <= 0 or b <= 0:
        raise ValueError(f"incomplete beta needs positive a, b, got {a}, {b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_upper_tail(t: float, df: int) -> float:
    """P(T > t) for Student's t with df degrees of freedom.

    Uses I_x(df/2, 1/2) at x = df / (df + t^2): the upper tail is half of
    that for t >= 0 and its reflection for t < 0.
    """
    if df < 1:
        raise ValueError(f"degrees of freedom must be at least 1, got {df}")
    if not math.isfinite(t):
        raise ValueError(f"t statistic must be finite, got {t}")
    x = df / (df + t * t)
    half = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return half if t >= 0 else 1.0 - half


def paired_t_test(errors_uni, errors_multi, alpha: float = 0.1) -> TTestResult:
    """Paired one-tailed t-test on per-dish absolute errors.

    Differences are first-argument minus second (the expected-worse model
    first), H0: mean difference = 0, H1: mean difference > 0.
    """
    a = np.asarray(errors_uni, dtype=np.float64)
    b = np.asarray(errors_multi, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired errors must be equal-length vectors, "
                         f"got shapes {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    d = a - b
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        if mean == 0.0:
            # identical error sequences: the symmetric null, t = 0, p = 1/2
            return TTestResult(t_stat=0.0, p_value=0.5, df=n - 1, mean_diff=0.0,
                               sd_diff=0.0, alpha=alpha, reject_null=0.5 < alpha)
        raise ValueError("degenerate paired t-test: zero variance in nonzero differences")
    t_stat = mean * math.sqrt(n) / sd
    p = student_t_upper_tail(t_stat, n - 1)
    return TTestResult(t_stat=t_stat, p_value=p, df=n - 1, mean_diff=mean,
                       sd_diff=sd, alpha=alpha, reject_null=p < alpha)


# ---------------------------------------------------------------------------
# Scatter output and model comparison
# ---------------------------------------------------------------------------

def scatter_emit(ps: PredictionSet, path_prefix: str) -> tuple[str, str]:
    """Write predicted-vs-true scatter data (CSV) and a standalone SVG plot
    with the identity line; byte-deterministic for a given prediction set."""
    if len(ps) == 0:
        raise ValueError("scatter_emit needs a non-empty prediction set")
    csv_path = path_prefix + ".csv"
    svg_path = path_prefix + ".svg"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("dish_id,true_kcal,pred_kcal\n")
        for dish_id, yt, yp in zip(ps.dish_ids, ps.y_true, ps.y_pred):
            f.write(f"{dish_id},{float(yt)!r},{float(yp)!r}\n")

    size, margin = 480, 56
    span = size - 2 * margin
    hi = max(float(ps.y_true.max()), float(ps.y_pred.max()), 1.0) * 1.05

    def sx(v: float) -> float:
        return margin + span * v / hi

    def sy(v: float) -> float:
        return size - margin - span * v / hi

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" '
        f'y2="{size - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" '
        f'stroke="black"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
        f'stroke="#888" stroke-dasharray="6,4"/>',
        f'<text x="{size / 2:.0f}" y="{size - 14}" text-anchor="middle" '
        f'font-size="14">true kcal</text>',
        f'<text x="16" y="{size / 2:.0f}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 16 {size / 2:.0f})">predicted kcal</text>',
        f'<text x="{margin}" y="{size - margin + 18}" text-anchor="middle" '
        f'font-size="11">0</text>',
        f'<text x="{size - margin}" y="{size - margin + 18}" text-anchor="middle" '
        f'font-size="11">{hi:.0f}</text>',
    ]
    for yt, yp in zip(ps.y_true, ps.y_pred):
        parts.append(f'<circle cx="{sx(yt):.2f}" cy="{sy(yp):.2f}" r="3" '
                     f'fill="#1f6fb2" fill-opacity="0.6"/>')
    parts.append("</svg>")
    with open(svg_path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
    return csv_path, svg_path


@dataclass
class ComparisonSummary:
    """Structured A-vs-B summary; the 'uni' slot is the expected-worse model
    (first argument of the t-test) and 'multi' the challenger."""

    mae_uni: float
    mae_multi: float
    abs_err_std_uni: float
    abs_err_std_multi: float
    r2_uni: float
    r2_multi: float
    delta_mae: float
    delta_abs_err_std: float
    delta_r2: float
    t_stat: float
    p_value: float
    alpha: float
    reject_null: bool
    n: int

    @property
    def verdict(self) -> str:
        return "reject H0" if self.reject_null else "fail to reject H0"

    def to_kv_text(self) -> str:
        lines = [
            f"n={self.n}",
            f"mae_uni={self.mae_uni!r}",
            f"mae_multi={self.mae_multi!r}",
            f"abs_err_std_uni={self.abs_err_std_uni!r}",
            f"abs_err_std_multi={self.abs_err_std_multi!r}",
            f"r2_uni={self.r2_uni!r}",
            f"r2_multi={self.r2_multi!r}",
            f"delta_mae={self.delta_mae!r}",
            f"delta_abs_err_std={self.delta_abs_err_std!r}",
            f"delta_r2={self.delta_r2!r}",
            f"t_stat={self.t_stat!r}",
            f"p_value={self.p_value!r}",
            f"alpha={self.alpha!r}",
            f"reject_null={str(self.reject_null).lower()}",
        ]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        return (
            f"Paired comparison over {self.n} dishes\n"
            f"  MAE:            {self.mae_uni:.4f} vs {self.mae_multi:.4f} kcal "
            f"(delta {self.delta_mae:.4f})\n"
            f"  abs-error std:  {self.abs_err_std_uni:.4f} vs {self.abs_err_std_multi:.4f} "
            f"kcal (delta {self.delta_abs_err_std:.4f})\n"
            f"  R^2:            {self.r2_uni:.4f} vs {self.r2_multi:.4f} "
            f"(delta {self.delta_r2:.4f})\n"
            f"  one-tailed paired t-test: t = {self.t_stat:.4f}, p = {self.p_value:.4f}, "
            f"alpha = {self.alpha}\n"
            f"  verdict: {self.verdict}\n")


def compare(report_uni: EvalReport, report_multi: EvalReport,
            ttest: TTestResult) -> ComparisonSummary:
    """Combine two eval reports and a paired t-test into one summary.

    Deltas are oriented as improvements of the second (multi) slot:
    MAE and error-std deltas are uni minus multi, the R^2 delta is multi
    minus uni.
    """
    if report_uni.n != report_multi.n:
        raise ValueError(f"reports cover different n: {report_uni.n} vs {report_multi.n}")
    return ComparisonSummary(
        mae_uni=report_uni.mae, mae_multi=report_multi.mae,
        abs_err_std_uni=report_uni.abs_err_std, abs_err_std_multi=report_multi.abs_err_std,
        r2_uni=report_uni.r2, r2_multi=report_multi.r2,
        delta_mae=report_uni.mae - report_multi.mae,
        delta_abs_err_std=report_uni.abs_err_std - report_multi.abs_err_std,
        delta_r2=report_multi.r2 - report_uni.r2,
        t_stat=ttest.t_stat, p_value=ttest.p_value, alpha=ttest.alpha,
        reject_null=ttest.reject_null, n=report_uni.n)
