"""Cuffless blood-pressure regression and INT8 post-training quantization.

Thin Python layer over the C++ core. Arrays are NumPy; files use the same
formats as the ``bpq`` command-line tool.
"""

from ._core import (
    BHS_GRADES,
    BpqError,
    ConfigError,
    DivergenceError,
    EmptyDatasetError,
    MetricError,
    ParseError,
    ShapeError,
    aami_check,
    bhs_grade,
    count_params,
    evaluate,
    generate_synthetic,
    mae,
    model_size_bytes,
    predict,
    qparams_asymmetric,
    qparams_symmetric,
    quantize_model,
    quantize_value,
    r2,
    read_container,
    sd,
    train,
    write_container,
)

__all__ = [
    "BHS_GRADES",
    "BpqError",
    "ConfigError",
    "DivergenceError",
    "EmptyDatasetError",
    "MetricError",
    "ParseError",
    "ShapeError",
    "aami_check",
    "bhs_grade",
    "count_params",
    "evaluate",
    "generate_synthetic",
    "mae",
    "model_size_bytes",
    "predict",
    "qparams_asymmetric",
    "qparams_symmetric",
    "quantize_model",
    "quantize_value",
    "r2",
    "read_container",
    "sd",
    "train",
    "write_container",
]
