"""Quantization-aware low-rank (LoRA) initializations for quantized weights.

The package quantizes weight matrices blockwise (NF4 or symmetric INT8,
with optional double quantization of the scales), accumulates activation
correlation statistics from calibration batches, and initializes a
low-rank pair (A, B) per layer so that ``Q + A B^T`` tracks the
full-precision weights on the calibration distribution.  A synthetic
experiment harness and a CLI tie the stages together.
"""

from .calibration import (
    CorrAccumulator,
    CorrelationMatrix,
    accumulate,
    finalize,
    finalize_guarded,
    merge,
)
from .container import (
    TensorContainer,
    TensorEntry,
    read_container,
    read_quantized,
    write_container,
    write_quantized,
)
from .errors import (
    DegenerateStatisticsError,
    FormatError,
    NumericError,
    QuailoraError,
    ShapeError,
    SingularSystemError,
)
from .harness import (
    ExperimentReport,
    ExperimentRow,
    SynthSpec,
    TinyModel,
    finetune_proxy,
    gap_closed,
    gen_instance,
    proxy_experiment,
    rank_sweep,
    run_pipeline,
    table_gap_report,
)
from .initializer import (
    InitReport,
    LoraPair,
    baseline_init,
    calibrated_objective,
    init_uncalibrated,
    quailora_init,
    uncalibrated_objective,
    update_a,
    update_b,
)
from .linalg import TruncatedSVD, matmul, solve_spd, svd_truncated
from .quantizer import (
    Codebook,
    DoubleQuantScales,
    QuantizedTensor,
    build_nf4_codebook,
    dequantize,
    double_quantize,
    quant_error,
    quantize_blockwise,
    with_double_quant,
)

__version__ = "0.1.0"
