"""Hierarchical token speech codec.

Audio is transformed into frame embeddings, residual-vector-quantized
into coarse-to-fine token grids, and only the coarse tokens are
transmitted, entropy-coded under a causal token model.  The receiver
reconstructs the coarse tokens losslessly, synthesizes the fine tokens
with a second causal model, and inverts the quantizer and transform.
"""

from .errors import (
    CodecError,
    ContextError,
    CorruptStream,
    EmptyInput,
    InsufficientData,
    InvalidCode,
    InvalidSample,
    InvalidSymbol,
    ModelMismatch,
    ShapeError,
    TrainingDiverged,
    UnsupportedFormat,
)
from .frontend import (
    EmbeddingSequence,
    FrontendConfig,
    Waveform,
    analyze,
    read_wav,
    synthesize,
    write_wav,
)
from .rvq import (
    Codebooks,
    CodecConfig,
    TokenGrid,
    dequantize,
    dequantize_grid,
    fit_codebooks,
    load_codebooks,
    quantize,
    quantize_grid,
    save_codebooks,
)
from .probmodel import (
    ROLE_COARSE,
    ROLE_FINE,
    SymbolContext,
    TransformerConfig,
    accuracy,
    flatten_coarse,
    flatten_full,
    load_model,
    save_model,
    train_context_model,
    train_transformer,
)
from .entropy import (
    Bitstream,
    cross_entropy_bits,
    decode_stream,
    encode_stream,
    entropy_bits,
    quantize_distribution,
)
from .pipeline import SamplerConfig, StreamDecoder, StreamEncoder, decode, encode, sample_fine
from .vad import (
    RateReport,
    VadTrack,
    confidence_profile,
    frame_voicing,
    rate_report,
    vad_probs,
    vad_rate_report,
    vad_track,
)

__version__ = "0.1.0"
