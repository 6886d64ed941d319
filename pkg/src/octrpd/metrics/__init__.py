from .agreement import (
    AgreementTable, IccBin, IccResult, agreement_report, icc_absolute, icc_bin, pairwise_icc,
    two_way_anova,
)
from .classification import (
    TABLE1_METRICS, ConfusionCounts, MetricError, classification_report, cohens_kappa,
    confusion_at, pr_auc, pr_curve, rates, roc_auc, roc_curve,
)
from .detection import (
    CATEGORY_GROUPS, FrocPoint, LesionMatch, category_codes, connected_components, dice,
    dice_table, froc, froc_counts, froc_operating_point, match_lesions, mean_dice,
)

__all__ = [
    "AgreementTable", "CATEGORY_GROUPS", "ConfusionCounts", "FrocPoint", "IccBin", "IccResult",
    "LesionMatch", "MetricError", "TABLE1_METRICS", "agreement_report", "category_codes",
    "classification_report", "cohens_kappa", "confusion_at", "connected_components", "dice",
    "dice_table", "froc", "froc_counts", "froc_operating_point", "icc_absolute", "icc_bin",
    "match_lesions", "mean_dice", "pairwise_icc", "pr_auc", "pr_curve", "rates", "roc_auc",
    "roc_curve", "two_way_anova",
]
