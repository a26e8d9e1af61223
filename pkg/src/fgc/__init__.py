"""Frequency-domain gradient compression: codec, cost model, simulator."""

from .quantizer import (
    QuantizerConfig,
    tune_eps,
    encode,
    decode,
    encode_array,
    decode_array,
    encode_block,
    decode_block,
)
from .spectral import (
    Spectrum,
    SparsificationSpec,
    AssumptionCheck,
    dft_forward,
    dft_inverse,
    truncate,
    sparsify_time,
    assumption_check,
    half_round_trip,
)
from .packer import PackedSparse, pack, unpack, prefix_sum
from .codec import (
    CodecConfig,
    CompressedMessage,
    CodecFormatError,
    CorruptHeaderError,
    TruncatedPayloadError,
    BitmapMismatchError,
    compress,
    decompress,
    reconstruct,
    serialize,
    deserialize,
    calibrate,
    compression_ratio,
)
from .costmodel import (
    ThroughputProfile,
    compression_cost,
    min_beneficial_k,
    is_beneficial,
    sweep,
    bench_stages,
)
from .simulator import (
    QuadraticProblem,
    LogisticProblem,
    MlpProblem,
    make_problem,
    LrSchedule,
    ThetaSchedule,
    TrainConfig,
    ConvergenceTrace,
    sub_gradient,
    step,
    run,
    gradient_stats,
)

__version__ = "0.1.0"
