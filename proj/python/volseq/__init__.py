"""Python bindings for the volseq core library."""

from ._core import (
    Model,
    VolseqError,
    architectures,
    golden_table,
    gradient_check,
    macro_ovr_auc,
    macro_summary,
    parameter_table,
    read_nifti,
    roc_auc,
    run_cli,
    write_nifti,
)

__all__ = [
    "Model",
    "VolseqError",
    "architectures",
    "golden_table",
    "gradient_check",
    "macro_ovr_auc",
    "macro_summary",
    "parameter_table",
    "read_nifti",
    "roc_auc",
    "run_cli",
    "write_nifti",
]
