"""Low-rank KV-cache compression toolkit.

Factorizes a decoder's key/value projections with a truncated SVD so the
cache stores short latent vectors, fuses the rotation-free factors into
the query and output projections, allocates per-layer widths from
cumulative condition numbers, and measures decode fidelity end to end on
deterministic synthetic models.
"""

from .bounds import (
    ACTIVATIONS,
    SILU_LIPSCHITZ,
    BoundReport,
    ChainNetwork,
    activation_truncation_bound,
    chain_truncation_bound,
    generate_chain,
    transformer_divergence_report,
    truncation_bound,
    verify_chain_bound,
    verify_truncation_bound,
)
from .compressor import (
    CompressedLayer,
    CompressedModel,
    compress_layer,
    compress_model,
    load_compressed,
    save_compressed,
)
from .densemat import (
    Matrix,
    SvdResult,
    condition_number,
    frobenius_rel_error,
    matmul,
    reconstruct,
    spectral_norm,
    svd,
    truncate,
)
from .errors import (
    AllocatorError,
    ContainerFormatError,
    ContractViolationError,
    InfeasibleTargetError,
    KvFactorError,
    NumericalError,
    UndefinedInputError,
)
from .model import (
    LARGE_PRESETS,
    PRESETS,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    SpectrumSpec,
    forward_hidden_states,
    forward_logits,
    generate_synthetic,
    load_model,
    preset_config,
    save_model,
)
from .prng import Prng, substream_normals
from .rope import pair_frequencies, rope_rotate, rotate_heads
from .runtime import (
    DecodeReport,
    KvCache,
    cache_bytes,
    compare_decodes,
    decode,
    profile_single_layer,
    random_prompts,
)
from .sensitivity import (
    CompressionPlan,
    LayerPlan,
    LayerSensitivity,
    default_threshold,
    layer_sensitivities,
    plan_from_dict,
    plan_progressive,
    plan_to_dict,
    plan_uniform,
    retained_ratio,
    solve_dmin,
)

__version__ = "0.1.0"

__all__ = [
    "ACTIVATIONS",
    "SILU_LIPSCHITZ",
    "AllocatorError",
    "BoundReport",
    "ChainNetwork",
    "CompressedLayer",
    "CompressedModel",
    "CompressionPlan",
    "ContainerFormatError",
    "ContractViolationError",
    "DecodeReport",
    "InfeasibleTargetError",
    "KvCache",
    "KvFactorError",
    "LARGE_PRESETS",
    "LayerPlan",
    "LayerSensitivity",
    "LayerWeights",
    "Matrix",
    "ModelConfig",
    "ModelWeights",
    "NumericalError",
    "PRESETS",
    "Prng",
    "SpectrumSpec",
    "SvdResult",
    "UndefinedInputError",
    "activation_truncation_bound",
    "cache_bytes",
    "chain_truncation_bound",
    "compare_decodes",
    "compress_layer",
    "compress_model",
    "condition_number",
    "decode",
    "default_threshold",
    "forward_hidden_states",
    "forward_logits",
    "frobenius_rel_error",
    "generate_chain",
    "generate_synthetic",
    "layer_sensitivities",
    "load_compressed",
    "load_model",
    "matmul",
    "pair_frequencies",
    "plan_from_dict",
    "plan_progressive",
    "plan_to_dict",
    "plan_uniform",
    "preset_config",
    "profile_single_layer",
    "random_prompts",
    "reconstruct",
    "retained_ratio",
    "rope_rotate",
    "rotate_heads",
    "save_compressed",
    "save_model",
    "solve_dmin",
    "spectral_norm",
    "substream_normals",
    "svd",
    "transformer_divergence_report",
    "truncate",
    "truncation_bound",
    "verify_chain_bound",
    "verify_truncation_bound",
]
