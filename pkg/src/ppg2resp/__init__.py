"""Reconstruct respiratory waveforms from PPG with a small 1-D conv net.

The package is self-contained: its own reverse-mode gradients, Adam,
radix-2 FFT, and PLS baseline. See the command line (``ppg2resp --help``)
for the operator workflow.
"""

__version__ = "0.1.0"

from .data import (
    Recording,
    SegmentPair,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_recording,
    normalize_input,
    normalize_target,
    resample_to_30hz,
    segment_test,
    segment_training,
    write_recording_csv,
)
from .errors import (
    BadMagicError,
    BuildError,
    DataError,
    DatasetError,
    DegenerateSignalError,
    EmptyReportError,
    FusionError,
    IngestionError,
    NoPeakError,
    NumericError,
    ParameterError,
    PipelineError,
    ShapeError,
    TrainingError,
    TruncatedFileError,
    UndefinedCorrelationError,
    UnsupportedRateError,
    WeightFileError,
)
from .evaluation import (
    EvaluationWindow,
    MetricsReport,
    aggregate_metrics,
    duty_cycle,
    estimate_rr_fft,
    evaluate_recording,
    fft_radix2,
    fuse_segments,
    pearson_corr,
    pls_predict,
    pls_train,
    reference_rr,
    waveform_mae,
)
from .interpret import (
    KernelAttribution,
    argmax_map,
    kernel_rr_distribution,
    latent_argmax,
    smooth_kernel,
    trace_to_layer1,
)
from .model import (
    EncoderDecoderModel,
    ModelConfig,
    build_model,
    encoder_activations,
    forward,
    forward_batch,
    load_weights,
    save_weights,
    shape_plan_for,
)
from .training import (
    FoldResult,
    TrainConfig,
    fold_seed,
    loso_cv,
    train,
    training_segments,
    transfer_retrain,
)

__all__ = [
    "__version__",
    "Recording",
    "SegmentPair",
    "SynthConfig",
    "generate_synthetic",
    "load_dataset",
    "load_recording",
    "normalize_input",
    "normalize_target",
    "resample_to_30hz",
    "segment_test",
    "segment_training",
    "write_recording_csv",
    "BadMagicError",
    "BuildError",
    "DataError",
    "DatasetError",
    "DegenerateSignalError",
    "EmptyReportError",
    "FusionError",
    "IngestionError",
    "NoPeakError",
    "NumericError",
    "ParameterError",
    "PipelineError",
    "ShapeError",
    "TrainingError",
    "TruncatedFileError",
    "UndefinedCorrelationError",
    "UnsupportedRateError",
    "WeightFileError",
    "EvaluationWindow",
    "MetricsReport",
    "aggregate_metrics",
    "duty_cycle",
    "estimate_rr_fft",
    "evaluate_recording",
    "fft_radix2",
    "fuse_segments",
    "pearson_corr",
    "pls_predict",
    "pls_train",
    "reference_rr",
    "waveform_mae",
    "KernelAttribution",
    "argmax_map",
    "kernel_rr_distribution",
    "latent_argmax",
    "smooth_kernel",
    "trace_to_layer1",
    "EncoderDecoderModel",
    "ModelConfig",
    "build_model",
    "encoder_activations",
    "forward",
    "forward_batch",
    "load_weights",
    "save_weights",
    "shape_plan_for",
    "FoldResult",
    "TrainConfig",
    "fold_seed",
    "loso_cv",
    "train",
    "training_segments",
    "transfer_retrain",
]
