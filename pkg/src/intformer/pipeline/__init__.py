"""Zone formatting, labeling, feature selection and window preparation."""

from .formatting import (
    RowTable,
    exclude_post_crash,
    format_approach,
    format_within_intersection,
    index_crashes,
    nomenclature,
)
from .selection import (
    ExtraTreesConfig,
    SelectionResult,
    correlation_matrix,
    extra_trees_importance,
    pearson_r,
    select_features,
)
from .windows import WindowSet, smote_resample, split_train_test, stack_windows, unstack

__all__ = [
    "RowTable",
    "nomenclature",
    "format_approach",
    "format_within_intersection",
    "index_crashes",
    "exclude_post_crash",
    "pearson_r",
    "correlation_matrix",
    "ExtraTreesConfig",
    "extra_trees_importance",
    "SelectionResult",
    "select_features",
    "WindowSet",
    "stack_windows",
    "unstack",
    "split_train_test",
    "smote_resample",
]
