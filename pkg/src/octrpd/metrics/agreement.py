"""Absolute-agreement intraclass correlation and agreement tables."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.stats import f as f_dist

from .classification import MetricError


class IccBin(str, enum.Enum):
    POOR = "Poor"
    MODERATE = "Moderate"
    GOOD = "Good"
    EXCELLENT = "Excellent"


def icc_bin(value: float) -> IccBin:
    """<0.50 poor, [0.50, 0.75) moderate, [0.75, 0.90) good, >=0.90 excellent."""
    if value < 0.50:
        return IccBin.POOR
    if value < 0.75:
        return IccBin.MODERATE
    if value < 0.90:
        return IccBin.GOOD
    return IccBin.EXCELLENT


@dataclass(frozen=True)
class IccResult:
    icc: float
    ci_low: float
    ci_high: float
    bin: IccBin
    degenerate: bool = False

    def to_json(self):
        return {"icc": self.icc, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "bin": self.bin.value, "degenerate": self.degenerate}


def two_way_anova(ratings):
    """Mean squares (rows = targets, columns = raters, error) of a complete n x k table."""
    x = np.asarray(ratings, dtype=np.float64)
    n, k = x.shape
    grand = x.mean()
    ss_rows = k * ((x.mean(axis=1) - grand) ** 2).sum()
    ss_cols = n * ((x.mean(axis=0) - grand) ** 2).sum()
    ss_err = ((x - grand) ** 2).sum() - ss_rows - ss_cols
    ss_err = max(ss_err, 0.0)
    return ss_rows / (n - 1), ss_cols / (k - 1), ss_err / ((n - 1) * (k - 1))


def icc_absolute(ratings, alpha=0.05) -> IccResult:
    """Two-way random effects, absolute agreement, single rater: ICC(2,1).

    The confidence interval is the F-based interval of McGraw & Wong (1996).
    A table with no variation at all has an undefined ICC; it is reported as
    1.0 (complete agreement) with ``degenerate=True``.
    """
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError("ratings must be an n_targets x n_raters matrix")
    n, k = x.shape
    if n < 2 or k < 2:
        raise MetricError(f"need at least 2 targets and 2 raters, got {x.shape}")
    if not np.isfinite(x).all():
        raise MetricError("ratings contain missing or non-finite cells")
    msr, msc, mse = two_way_anova(x)
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom <= 0 or np.isclose(denom, 0.0, atol=1e-300):
        if np.ptp(x) == 0:
            return IccResult(1.0, 1.0, 1.0, IccBin.EXCELLENT, degenerate=True)
        raise MetricError("degenerate ratings: ICC denominator is zero")
    icc = (msr - mse) / denom
    lo, hi = _icc2_ci(icc, msr, msc, mse, n, k, alpha)
    return IccResult(float(icc), lo, hi, icc_bin(icc))


def _icc2_ci(icc, msr, msc, mse, n, k, alpha):
    if mse <= 0:
        return float("nan"), float("nan")
    fj = msc / mse
    a = n * (1 + (k - 1) * icc) - k * icc
    vn = (k - 1) * (n - 1) * (k * icc * fj + a) ** 2
    vd = (n - 1) * k ** 2 * icc ** 2 * fj ** 2 + a ** 2
    if vd <= 0:
        return float("nan"), float("nan")
    v = vn / vd
    fu = f_dist.ppf(1 - alpha / 2, n - 1, v)
    fl = f_dist.ppf(1 - alpha / 2, v, n - 1)
    c = k * msc + (k * n - k - n) * mse
    with np.errstate(invalid="ignore", divide="ignore"):
        lo = np.float64(n * (msr - fu * mse)) / np.float64(fu * c + n * msr)
        hi = np.float64(n * (fl * msr - mse)) / np.float64(c + n * fl * msr)
    return float(lo), float(hi)


@dataclass(frozen=True)
class AgreementTable:
    model_vs_grader: dict
    mean_model_vs_graders: float
    intergrader: IccResult | None

    def to_json(self):
        return {
            "model_vs_grader": {g: r.to_json() for g, r in self.model_vs_grader.items()},
            "mean_model_vs_graders": self.mean_model_vs_graders,
            "mean_bin": icc_bin(self.mean_model_vs_graders).value,
            "intergrader": None if self.intergrader is None else self.intergrader.to_json(),
        }


def agreement_report(model_areas, grader_areas: dict) -> AgreementTable:
    """ICC of model areas against each grader, their mean, and the all-grader ICC.

    Targets without a segmentation must be passed as zero area.
    """
    model = np.asarray(model_areas, dtype=np.float64).ravel()
    if not grader_areas:
        raise MetricError("at least one grader column is required")
    cols = {g: np.asarray(v, dtype=np.float64).ravel() for g, v in grader_areas.items()}
    for g, v in cols.items():
        if v.shape != model.shape:
            raise MetricError(f"grader {g!r} covers {v.size} targets, model covers {model.size}")
    per = {g: icc_absolute(np.column_stack([model, v])) for g, v in cols.items()}
    mean = float(np.mean([r.icc for r in per.values()]))
    inter = icc_absolute(np.column_stack(list(cols.values()))) if len(cols) >= 2 else None
    return AgreementTable(per, mean, inter)


def pairwise_icc(columns: dict) -> dict:
    return {f"{a}_vs_{b}": icc_absolute(np.column_stack([columns[a], columns[b]]))
            for a, b in itertools.combinations(columns, 2)}
