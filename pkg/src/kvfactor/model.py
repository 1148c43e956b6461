"""Toy decoder models with fully prescribed singular spectra.

The architecture is a standard pre-norm decoder stack: RMSNorm into grouped
multi-head attention with a residual add, RMSNorm into a gated SiLU MLP with
a residual add, then a final RMSNorm and an output projection over a byte
vocabulary. Small enough to run on a desk, structured enough that per-layer
compression effects show up the same way they do at scale.

Weight matrices are synthesized as Q1 @ diag(sigma) @ Q2.T with Q1, Q2 drawn
from QR factorizations of seeded Gaussian matrices, so every matrix has an
exactly known singular spectrum and condition number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .container import read_container, write_container
from .densemat import Matrix
from .errors import ContainerFormatError, ContractViolationError
from .prng import Prng
from .rope import rotate_heads

RMSNORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for a decoder stack."""

    num_layers: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    model_dim: int
    vocab_size: int
    mlp_hidden: int
    rope_base: float = 10000.0
    rope_enabled: bool = True
    max_seq_len: int = 256

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "num_kv_heads", "head_dim",
                     "model_dim", "vocab_size", "mlp_hidden", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ContractViolationError(f"{name} must be positive")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ContractViolationError(
                f"model_dim {self.model_dim} != num_heads*head_dim "
                f"{self.num_heads * self.head_dim}"
            )
        if self.num_heads % self.num_kv_heads:
            raise ContractViolationError(
                f"num_heads {self.num_heads} not divisible by "
                f"num_kv_heads {self.num_kv_heads}"
            )
        if self.head_dim % 2:
            raise ContractViolationError("head_dim must be even for rotary embeddings")
        if self.rope_base <= 0.0:
            raise ContractViolationError("rope_base must be positive")

    @property
    def kv_dim(self) -> int:
        """Width of the key (or value) projection output."""
        return self.num_kv_heads * self.head_dim

    def kv_head_of(self, query_head: int) -> int:
        """Group map: query head j reads kv head floor(j * h_kv / h)."""
        return (query_head * self.num_kv_heads) // self.num_heads


@dataclass(frozen=True)
class SpectrumSpec:
    """Prescribed singular spectrum: sigma_i = sigma_max * decay**i.

    per_layer_decay, when given, overrides decay for each layer's matrices
    (length must equal num_layers); embedding and output head use the base
    decay either way.
    """

    sigma_max: float = 1.0
    decay: float = 0.9
    per_layer_decay: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.sigma_max <= 0.0:
            raise ContractViolationError("sigma_max must be positive")
        decays = (self.decay,) + tuple(self.per_layer_decay or ())
        for g in decays:
            if not 0.0 < g <= 1.0:
                raise ContractViolationError(f"decay must be in (0, 1], got {g}")

    def layer_decay(self, layer: int) -> float:
        if self.per_layer_decay is None:
            return self.decay
        return self.per_layer_decay[layer]


@dataclass(frozen=True)
class LayerWeights:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    attn_norm: NDArray[np.float64]
    mlp_gate: Matrix
    mlp_up: Matrix
    mlp_down: Matrix
    mlp_norm: NDArray[np.float64]


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embedding: Matrix
    layers: tuple[LayerWeights, ...]
    final_norm: NDArray[np.float64]
    lm_head: Matrix


PRESETS: dict[str, ModelConfig] = {
    "llama2-13b": ModelConfig(
        num_layers=40, num_heads=40, num_kv_heads=40, head_dim=128,
        model_dim=5120, vocab_size=32000, mlp_hidden=13824,
        rope_base=10000.0, max_seq_len=4096,
    ),
    "llama3-8b": ModelConfig(
        num_layers=32, num_heads=32, num_kv_heads=8, head_dim=128,
        model_dim=4096, vocab_size=128256, mlp_hidden=14336,
        rope_base=500000.0, max_seq_len=8192,
    ),
    "llama3-70b": ModelConfig(
        num_layers=80, num_heads=64, num_kv_heads=8, head_dim=128,
        model_dim=8192, vocab_size=128256, mlp_hidden=28672,
        rope_base=500000.0, max_seq_len=8192,
    ),
    "toy-small": ModelConfig(
        num_layers=8, num_heads=4, num_kv_heads=2, head_dim=16,
        model_dim=64, vocab_size=256, mlp_hidden=128,
        rope_base=10000.0, max_seq_len=256,
    ),
    "toy-deep": ModelConfig(
        num_layers=16, num_heads=4, num_kv_heads=2, head_dim=16,
        model_dim=64, vocab_size=256, mlp_hidden=128,
        rope_base=10000.0, max_seq_len=256,
    ),
}

# Presets with weights too large to synthesize casually on a desk machine.
LARGE_PRESETS = frozenset({"llama2-13b", "llama3-8b", "llama3-70b"})


def preset_config(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ContractViolationError(
            f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}"
        ) from None


def _orthonormal(rng: Prng, rows: int, cols: int) -> NDArray[np.float64]:
    """Orthonormal rows x cols frame from a seeded Gaussian draw.

    Sign-normalized so the R diagonal is nonnegative, which makes the frame
    a deterministic function of the Gaussian draw alone.
    """
    g = rng.gaussian_matrix(rows, cols)
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return q * signs


def matrix_with_spectrum(rng: Prng, rows: int, cols: int,
                         sigmas: NDArray[np.float64] | list[float]) -> Matrix:
    """Random matrix whose singular values equal the given nonincreasing list."""
    s = np.asarray(sigmas, dtype=np.float64)
    r = min(rows, cols)
    if s.shape != (r,):
        raise ContractViolationError(
            f"need {r} singular values for a {rows}x{cols} matrix, got {s.shape}"
        )
    if np.any(s < 0.0) or np.any(np.diff(s) > 0.0):
        raise ContractViolationError("singular values must be nonincreasing and >= 0")
    q1 = _orthonormal(rng, rows, r)
    q2 = _orthonormal(rng, cols, r)
    return Matrix((q1 * s) @ q2.T)


def _geometric_sigmas(spec: SpectrumSpec, layer: int | None, r: int) -> NDArray[np.float64]:
    decay = spec.decay if layer is None else spec.layer_decay(layer)
    return spec.sigma_max * decay ** np.arange(r)


def generate_synthetic(config: ModelConfig, spectrum: SpectrumSpec, seed: int) -> ModelWeights:
    """Synthesize a full model with prescribed per-matrix spectra.

    Tensors are drawn from one sequential PRNG stream in a fixed order
    (embedding, then each layer's tensors, then the final norm and output
    head), so a (config, spectrum, seed) triple pins every bit.
    """
    if spectrum.per_layer_decay is not None and \
            len(spectrum.per_layer_decay) != config.num_layers:
        raise ContractViolationError(
            f"per_layer_decay has {len(spectrum.per_layer_decay)} entries "
            f"for {config.num_layers} layers"
        )
    rng = Prng(seed)
    d_model = config.model_dim
    qkv = config.num_heads * config.head_dim
    kv = config.kv_dim

    def spectral(rows, cols, layer=None):
        return matrix_with_spectrum(
            rng, rows, cols, _geometric_sigmas(spectrum, layer, min(rows, cols))
        )

    embedding = spectral(config.vocab_size, d_model)
    layers = []
    for l in range(config.num_layers):
        layers.append(LayerWeights(
            w_q=spectral(d_model, qkv, l),
            w_k=spectral(d_model, kv, l),
            w_v=spectral(d_model, kv, l),
            w_o=spectral(qkv, d_model, l),
            attn_norm=np.ones(d_model),
            mlp_gate=spectral(d_model, config.mlp_hidden, l),
            mlp_up=spectral(d_model, config.mlp_hidden, l),
            mlp_down=spectral(config.mlp_hidden, d_model, l),
            mlp_norm=np.ones(d_model),
        ))
    final_norm = np.ones(d_model)
    lm_head = spectral(d_model, config.vocab_size)
    return ModelWeights(
        config=config,
        embedding=embedding,
        layers=tuple(layers),
        final_norm=final_norm,
        lm_head=lm_head,
    )


def rmsnorm(x: NDArray[np.float64], weight: NDArray[np.float64]) -> NDArray[np.float64]:
    """Root-mean-square normalization over the last axis."""
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMSNORM_EPS) * weight


def silu(x: NDArray[np.float64]) -> NDArray[np.float64]:
    return x / (1.0 + np.exp(-x))


def softmax(x: NDArray[np.float64], axis: int = -1) -> NDArray[np.float64]:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_token_ids(config: ModelConfig, token_ids) -> list[int]:
    ids = [int(t) for t in token_ids]
    if not ids:
        raise ContractViolationError("token sequence must be nonempty")
    if len(ids) > config.max_seq_len:
        raise ContractViolationError(
            f"sequence length {len(ids)} exceeds max_seq_len {config.max_seq_len}"
        )
    for t in ids:
        if not 0 <= t < config.vocab_size:
            raise ContractViolationError(f"token id {t} outside vocabulary")
    return ids


def _layer_step(cfg: ModelConfig, layer: LayerWeights, x: NDArray[np.float64],
                positions: NDArray, mask: NDArray[np.bool_]):
    """One attention-plus-mlp block; returns (normed attention input, output)."""
    n = x.shape[0]
    h, hk, d = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    xn = rmsnorm(x, layer.attn_norm)
    q = (xn @ layer.w_q.data).reshape(n, h, d)
    k = (xn @ layer.w_k.data).reshape(n, hk, d)
    v = (xn @ layer.w_v.data).reshape(n, hk, d)
    if cfg.rope_enabled:
        q = rotate_heads(q, positions, cfg.rope_base)
        k = rotate_heads(k, positions, cfg.rope_base)
    heads = np.empty((n, h, d))
    for j in range(h):
        g = cfg.kv_head_of(j)
        scores = (q[:, j, :] @ k[:, g, :].T) / math.sqrt(d)
        scores = np.where(mask, scores, -np.inf)
        heads[:, j, :] = softmax(scores) @ v[:, g, :]
    x = x + heads.reshape(n, h * d) @ layer.w_o.data
    xm = rmsnorm(x, layer.mlp_norm)
    gate = silu(xm @ layer.mlp_gate.data)
    x = x + (gate * (xm @ layer.mlp_up.data)) @ layer.mlp_down.data
    return xn, x


def forward_logits(weights: ModelWeights, token_ids) -> Matrix:
    """Reference forward pass: next-token logits at every position.

    Processes the whole sequence at once with causal masking; the cached
    decode path in the runtime must reproduce these numbers.
    """
    cfg = weights.config
    ids = _check_token_ids(cfg, token_ids)
    n = len(ids)
    positions = np.arange(n)
    mask = np.tril(np.ones((n, n), dtype=bool))

    x = weights.embedding.data[ids, :]
    for layer in weights.layers:
        _, x = _layer_step(cfg, layer, x, positions, mask)
    logits = rmsnorm(x, weights.final_norm) @ weights.lm_head.data
    return Matrix(logits)


def forward_hidden_states(weights: ModelWeights, token_ids):
    """Yield (layer index, normalized attention input) over a sequence.

    Diagnostics use this to measure the magnitudes each key/value
    projection actually receives instead of assuming a constant.
    """
    cfg = weights.config
    ids = _check_token_ids(cfg, token_ids)
    n = len(ids)
    positions = np.arange(n)
    mask = np.tril(np.ones((n, n), dtype=bool))
    x = weights.embedding.data[ids, :]
    for i, layer in enumerate(weights.layers):
        xn, x = _layer_step(cfg, layer, x, positions, mask)
        yield i, xn


_CONFIG_FIELDS = (
    "num_layers", "num_heads", "num_kv_heads", "head_dim", "model_dim",
    "vocab_size", "mlp_hidden", "rope_base", "rope_enabled", "max_seq_len",
)


def config_to_fields(config: ModelConfig) -> dict:
    return {name: getattr(config, name) for name in _CONFIG_FIELDS}


def config_from_fields(fields: dict) -> ModelConfig:
    missing = [n for n in _CONFIG_FIELDS if n not in fields]
    if missing:
        raise ContainerFormatError(f"config.json missing fields: {', '.join(missing)}")
    try:
        return ModelConfig(**{n: fields[n] for n in _CONFIG_FIELDS})
    except ContractViolationError as exc:
        raise ContainerFormatError(f"invalid config: {exc}") from exc


def _layer_tensor_items(l: int, layer: LayerWeights) -> list[tuple[str, np.ndarray]]:
    prefix = f"layers.{l}."
    return [
        (prefix + "w_q", layer.w_q.data),
        (prefix + "w_k", layer.w_k.data),
        (prefix + "w_v", layer.w_v.data),
        (prefix + "w_o", layer.w_o.data),
        (prefix + "attn_norm", layer.attn_norm),
        (prefix + "mlp_gate", layer.mlp_gate.data),
        (prefix + "mlp_up", layer.mlp_up.data),
        (prefix + "mlp_down", layer.mlp_down.data),
        (prefix + "mlp_norm", layer.mlp_norm),
    ]


def save_model(weights: ModelWeights, path: str) -> None:
    """Write a model to a container directory."""
    tensors: list[tuple[str, np.ndarray]] = [("embedding", weights.embedding.data)]
    for l, layer in enumerate(weights.layers):
        tensors.extend(_layer_tensor_items(l, layer))
    tensors.append(("final_norm", weights.final_norm))
    tensors.append(("lm_head", weights.lm_head.data))
    write_container(path, config_to_fields(weights.config), tensors)


def _take_tensor(tensors: dict, name: str, rows: int, cols: int) -> np.ndarray:
    if name not in tensors:
        raise ContainerFormatError(f"missing tensor {name!r}")
    arr = tensors.pop(name)
    if arr.shape != (rows, cols):
        raise ContainerFormatError(
            f"tensor {name!r} has shape {arr.shape}, expected ({rows}, {cols})"
        )
    return arr


def _take_vector(tensors: dict, name: str, length: int) -> np.ndarray:
    return _take_tensor(tensors, name, 1, length).reshape(length)


def load_model(path: str) -> ModelWeights:
    """Read a plain model container; rejects compressed containers."""
    config_fields, tensors = read_container(path)
    if config_fields.get("compressed"):
        raise ContainerFormatError(
            "container holds a compressed model; use load_compressed"
        )
    cfg = config_from_fields(config_fields)
    d_model = cfg.model_dim
    qkv = cfg.num_heads * cfg.head_dim
    kv = cfg.kv_dim
    embedding = Matrix(_take_tensor(tensors, "embedding", cfg.vocab_size, d_model))
    layers = []
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        layers.append(LayerWeights(
            w_q=Matrix(_take_tensor(tensors, p + "w_q", d_model, qkv)),
            w_k=Matrix(_take_tensor(tensors, p + "w_k", d_model, kv)),
            w_v=Matrix(_take_tensor(tensors, p + "w_v", d_model, kv)),
            w_o=Matrix(_take_tensor(tensors, p + "w_o", qkv, d_model)),
            attn_norm=_take_vector(tensors, p + "attn_norm", d_model),
            mlp_gate=Matrix(_take_tensor(tensors, p + "mlp_gate", d_model, cfg.mlp_hidden)),
            mlp_up=Matrix(_take_tensor(tensors, p + "mlp_up", d_model, cfg.mlp_hidden)),
            mlp_down=Matrix(_take_tensor(tensors, p + "mlp_down", cfg.mlp_hidden, d_model)),
            mlp_norm=_take_vector(tensors, p + "mlp_norm", d_model),
        ))
    final_norm = _take_vector(tensors, "final_norm", d_model)
    lm_head = Matrix(_take_tensor(tensors, "lm_head", d_model, cfg.vocab_size))
    if tensors:
        raise ContainerFormatError(
            f"unexpected extra tensors: {', '.join(sorted(tensors))}"
        )
    return ModelWeights(
        config=cfg, embedding=embedding, layers=tuple(layers),
        final_norm=final_norm, lm_head=lm_head,
    )
