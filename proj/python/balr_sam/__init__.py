from ._balr import (
    BalrError,
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    NumericError,
    ScheduleError,
    ValidationError,
    adapter_param_count,
    bench_attention,
    cosine_lr,
    default_config_text,
    metrics,
    parameter_split,
    sam_scale_fraction,
    set_instrumentation,
    synth_sample,
    train,
    verify,
)

__all__ = [
    "BalrError",
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "NumericError",
    "ScheduleError",
    "ValidationError",
    "adapter_param_count",
    "bench_attention",
    "cosine_lr",
    "default_config_text",
    "metrics",
    "parameter_split",
    "sam_scale_fraction",
    "set_instrumentation",
    "synth_sample",
    "train",
    "verify",
]
