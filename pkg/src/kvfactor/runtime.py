"""Autoregressive decoding against full and latent key/value caches.

The full path caches rotated keys and raw values per layer. The latent path
caches the down-projected states from a compressed layer instead; scores
come either from fused query projections (exact, available when rotary
embeddings are off) or by reconstructing per-head keys from the latents and
rotating them in place. Both paths reproduce the reference forward pass on
uncompressed layers, which the tests pin down.

Cache accounting follows two conventions. ``cache_bytes`` prices capacity
for a deployment scenario and can count one latent per token when the
caller treats keys and values as a joint entry. ``KvCache.bytes`` reports
the payload actually held, with keys and values always counted separately.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .compressor import CompressedLayer, CompressedModel
from .errors import ContractViolationError
from .model import (
    LayerWeights,
    ModelConfig,
    ModelWeights,
    _check_token_ids,
    rmsnorm,
    silu,
    softmax,
)
from .rope import rope_rotate, rotate_heads
from .sensitivity import (
    CompressionPlan,
    LayerPlan,
    layer_sensitivities,
)

__all__ = [
    "KvCache",
    "DecodeReport",
    "cache_bytes",
    "compare_decodes",
    "decode",
    "profile_single_layer",
    "rope_rotate",
]

_CACHE_DTYPES = (np.float64, np.float32)


def cache_bytes(
    config: ModelConfig,
    plan: CompressionPlan | None = None,
    *,
    batch: int,
    seq_len: int,
    bytes_per_element: int = 2,
    count_kv_jointly: bool = True,
) -> int:
    """Cache footprint in bytes for a batch of sequences.

    Without a plan every layer is priced at full key/value width. With one,
    compressed layers are priced at their latent width and skipped layers at
    full width. ``count_kv_jointly`` prices one entry per token per layer;
    set it False to count key and value storage separately, matching what
    ``KvCache`` actually allocates.
    """
    if batch < 1:
        raise ContractViolationError(f"batch must be >= 1, got {batch}")
    if seq_len < 0:
        raise ContractViolationError(f"seq_len must be >= 0, got {seq_len}")
    if bytes_per_element < 1:
        raise ContractViolationError(
            f"bytes_per_element must be >= 1, got {bytes_per_element}"
        )
    if plan is None:
        widths = [config.kv_dim] * config.num_layers
    else:
        if plan.num_layers != config.num_layers:
            raise ContractViolationError(
                f"plan covers {plan.num_layers} layers, model has {config.num_layers}"
            )
        widths = [
            config.kv_dim if e.skip else e.d_c for e in plan.layers
        ]
    per_token = sum(widths) * bytes_per_element
    if not count_kv_jointly:
        per_token *= 2
    return batch * seq_len * per_token


class KvCache:
    """Preallocated per-layer cache for one sequence.

    Full layers hold rotated keys and values at kv width; compressed layers
    hold the pre-rotation key latents and value latents at their plan width.
    Entries are stored in the requested dtype and upcast to float64 on read.
    """

    def __init__(self, model: ModelWeights | CompressedModel, max_len: int,
                 dtype=np.float64):
        if max_len < 1:
            raise ContractViolationError(f"max_len must be >= 1, got {max_len}")
        if dtype not in _CACHE_DTYPES:
            raise ContractViolationError(
                "cache dtype must be float64 or float32"
            )
        self.config = model.config
        self.max_len = max_len
        self.dtype = np.dtype(dtype)
        self.length = 0
        self._k: list[NDArray] = []
        self._v: list[NDArray] = []
        for layer in model.layers:
            width = layer.d_c if isinstance(layer, CompressedLayer) else model.config.kv_dim
            self._k.append(np.zeros((max_len, width), dtype=self.dtype))
            self._v.append(np.zeros((max_len, width), dtype=self.dtype))

    def store(self, layer: int, start: int, k_block: NDArray, v_block: NDArray) -> None:
        stop = start + k_block.shape[0]
        if stop > self.max_len:
            raise ContractViolationError(
                f"cache overflow: writing to {stop} with capacity {self.max_len}"
            )
        self._k[layer][start:stop] = k_block
        self._v[layer][start:stop] = v_block

    def keys(self, layer: int, length: int) -> NDArray[np.float64]:
        return self._k[layer][:length].astype(np.float64)

    def values(self, layer: int, length: int) -> NDArray[np.float64]:
        return self._v[layer][:length].astype(np.float64)

    def bytes(self) -> int:
        """Payload held for the tokens cached so far, keys and values separate."""
        per_token = sum(a.shape[1] for a in self._k) * self.dtype.itemsize
        return self.length * per_token * 2


@dataclass
class DecodeReport:
    prompt: list[int]
    tokens: list[int]
    logits: NDArray[np.float64]
    cache_bytes: int
    seconds: float
    tokens_per_sec: float
    kl: list[float] | None = None
    max_abs_logit_diff: list[float] | None = None
    top1_match: list[bool] | None = None


def _causal_mask(block: int, total: int) -> NDArray[np.bool_]:
    prefix = total - block
    cols = np.arange(total)[None, :]
    rows = np.arange(block)[:, None]
    return cols <= prefix + rows


def _full_layer_block(cfg: ModelConfig, layer: LayerWeights, cache: KvCache,
                      layer_index: int, x: NDArray, start: int) -> NDArray:
    m = x.shape[0]
    total = start + m
    h, hk, d = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    xn = rmsnorm(x, layer.attn_norm)
    q = (xn @ layer.w_q.data).reshape(m, h, d)
    k_new = (xn @ layer.w_k.data).reshape(m, hk, d)
    v_new = (xn @ layer.w_v.data).reshape(m, hk, d)
    if cfg.rope_enabled:
        positions = np.arange(start, total)
        q = rotate_heads(q, positions, cfg.rope_base)
        k_new = rotate_heads(k_new, positions, cfg.rope_base)
    cache.store(layer_index, start, k_new.reshape(m, hk * d), v_new.reshape(m, hk * d))
    k_all = cache.keys(layer_index, total).reshape(total, hk, d)
    v_all = cache.values(layer_index, total).reshape(total, hk, d)
    mask = _causal_mask(m, total)
    heads = np.empty((m, h, d))
    for j in range(h):
        g = cfg.kv_head_of(j)
        scores = (q[:, j, :] @ k_all[:, g, :].T) / math.sqrt(d)
        scores = np.where(mask, scores, -np.inf)
        heads[:, j, :] = softmax(scores) @ v_all[:, g, :]
    return x + heads.reshape(m, h * d) @ layer.w_o.data


def _latent_layer_block(cfg: ModelConfig, layer: CompressedLayer, cache: KvCache,
                        layer_index: int, x: NDArray, start: int,
                        force_reconstruct: bool) -> NDArray:
    m = x.shape[0]
    total = start + m
    h, hk, d = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    xn = rmsnorm(x, layer.attn_norm)
    ck_new = xn @ layer.key_down.data
    cv_new = xn @ layer.value_down.data
    cache.store(layer_index, start, ck_new, cv_new)
    ck = cache.keys(layer_index, total)
    cv = cache.values(layer_index, total)
    mask = _causal_mask(m, total)
    scale = math.sqrt(d)

    reconstruct = cfg.rope_enabled or force_reconstruct
    if reconstruct:
        q = (xn @ layer.w_q.data).reshape(m, h, d)
        k_all = np.stack([ck @ a.data for a in layer.key_up], axis=1)
        if cfg.rope_enabled:
            q = rotate_heads(q, np.arange(start, total), cfg.rope_base)
            k_all = rotate_heads(k_all, np.arange(total), cfg.rope_base)

    out = np.zeros_like(x)
    for j in range(h):
        if reconstruct:
            g = cfg.kv_head_of(j)
            scores = (q[:, j, :] @ k_all[:, g, :].T) / scale
        else:
            scores = ((xn @ layer.fused_q[j].data) @ ck.T) / scale
        scores = np.where(mask, scores, -np.inf)
        out += (softmax(scores) @ cv) @ layer.fused_out[j].data
    return x + out


def _mlp_block(layer: LayerWeights | CompressedLayer, x: NDArray) -> NDArray:
    xn = rmsnorm(x, layer.mlp_norm)
    gate = silu(xn @ layer.mlp_gate.data)
    return x + (gate * (xn @ layer.mlp_up.data)) @ layer.mlp_down.data


def _forward_block(model: ModelWeights | CompressedModel, cache: KvCache,
                   ids: list[int], start: int,
                   force_reconstruct: bool) -> NDArray[np.float64]:
    cfg = model.config
    x = model.embedding.data[ids, :]
    for i, layer in enumerate(model.layers):
        if isinstance(layer, CompressedLayer):
            x = _latent_layer_block(cfg, layer, cache, i, x, start, force_reconstruct)
        else:
            x = _full_layer_block(cfg, layer, cache, i, x, start)
        x = _mlp_block(layer, x)
    cache.length = start + len(ids)
    return rmsnorm(x, model.final_norm) @ model.lm_head.data


def decode(
    model: ModelWeights | CompressedModel,
    prompt,
    steps: int,
    *,
    forced_tokens=None,
    force_reconstruct: bool = False,
    cache_dtype=np.float64,
) -> DecodeReport:
    """Greedy decode for ``steps`` tokens after prefilling the prompt.

    ``tokens`` in the report are always the model's own argmax picks; when
    ``forced_tokens`` is given those are fed back instead, so a compressed
    model can be scored position by position against a reference trace.
    """
    cfg = model.config
    ids = _check_token_ids(cfg, prompt)
    if steps < 1:
        raise ContractViolationError(f"steps must be >= 1, got {steps}")
    total = len(ids) + steps
    if total > cfg.max_seq_len:
        raise ContractViolationError(
            f"prompt plus steps is {total}, exceeds max_seq_len {cfg.max_seq_len}"
        )
    forced: list[int] | None = None
    if forced_tokens is not None:
        forced = [int(t) for t in forced_tokens]
        if len(forced) < steps:
            raise ContractViolationError(
                f"need {steps} forced tokens, got {len(forced)}"
            )
        for t in forced:
            if not 0 <= t < cfg.vocab_size:
                raise ContractViolationError(f"forced token {t} outside vocabulary")

    cache = KvCache(model, total, dtype=cache_dtype)
    t0 = time.perf_counter()
    block_logits = _forward_block(model, cache, ids, 0, force_reconstruct)
    step_logits = np.empty((steps, cfg.vocab_size))
    tokens: list[int] = []
    current = block_logits[-1]
    for s in range(steps):
        step_logits[s] = current
        pick = int(np.argmax(current))
        tokens.append(pick)
        feed = forced[s] if forced is not None else pick
        if s + 1 < steps:
            current = _forward_block(
                model, cache, [feed], len(ids) + s, force_reconstruct
            )[-1]
        else:
            # the last chosen token still lands in the cache so the report's
            # byte count covers every token the sequence produced
            _forward_block(model, cache, [feed], len(ids) + s, force_reconstruct)
    seconds = time.perf_counter() - t0
    return DecodeReport(
        prompt=ids,
        tokens=tokens,
        logits=step_logits,
        cache_bytes=cache.bytes(),
        seconds=seconds,
        tokens_per_sec=steps / max(seconds, 1e-9),
    )


def _log_softmax(x: NDArray[np.float64]) -> NDArray[np.float64]:
    shifted = x - np.max(x)
    return shifted - math.log(np.sum(np.exp(shifted)))


def compare_decodes(
    reference: ModelWeights | CompressedModel,
    test: ModelWeights | CompressedModel,
    prompt,
    steps: int,
    *,
    force_reconstruct: bool = False,
    cache_dtype=np.float64,
) -> tuple[DecodeReport, DecodeReport]:
    """Decode the reference greedily, then teacher-force the test model.

    The test model sees the reference's token choices, so its report lines
    up position for position: per-step KL of the reference distribution
    against the test distribution, the largest logit gap, and whether the
    argmax picks agree.
    """
    ref = decode(reference, prompt, steps, cache_dtype=cache_dtype)
    out = decode(
        test, prompt, steps,
        forced_tokens=ref.tokens,
        force_reconstruct=force_reconstruct,
        cache_dtype=cache_dtype,
    )
    kl: list[float] = []
    gaps: list[float] = []
    agree: list[bool] = []
    for s in range(steps):
        lp = _log_softmax(ref.logits[s])
        lq = _log_softmax(out.logits[s])
        p = np.exp(lp)
        # roundoff can push a mathematically nonnegative KL a hair below zero
        kl.append(max(0.0, float(np.sum(p * (lp - lq)))))
        gaps.append(float(np.max(np.abs(ref.logits[s] - out.logits[s]))))
        agree.append(out.tokens[s] == ref.tokens[s])
    out.kl = kl
    out.max_abs_logit_diff = gaps
    out.top1_match = agree
    return ref, out


def _single_layer_plan(model: ModelWeights, layer_index: int, d_c: int,
                       sensitivities) -> CompressionPlan:
    cfg = model.config
    if not 0 <= layer_index < cfg.num_layers:
        raise ContractViolationError(
            f"layer index {layer_index} outside [0, {cfg.num_layers})"
        )
    entries = []
    for s in sensitivities:
        skip = s.layer != layer_index
        entries.append(LayerPlan(
            layer=s.layer,
            skip=skip,
            d_c=cfg.kv_dim if skip else d_c,
            kappa_tilde=s.kappa_tilde,
        ))
    return CompressionPlan(
        strategy="single-layer",
        d_max=d_c,
        d_min=d_c,
        threshold=float("inf"),
        layers=tuple(entries),
    )


def random_prompts(config: ModelConfig, *, seed: int, count: int,
                   length: int) -> list[list[int]]:
    """Deterministic uniform token prompts for profiling runs."""
    from .prng import Prng

    if count < 1 or length < 1:
        raise ContractViolationError("count and length must be >= 1")
    rng = Prng(seed)
    return [
        [int(rng.u64() % config.vocab_size) for _ in range(length)]
        for _ in range(count)
    ]


def profile_single_layer(
    model: ModelWeights,
    layer_index: int,
    d_c: int,
    *,
    sensitivities=None,
    prompt_seed: int = 0,
    num_prompts: int = 4,
    prompt_len: int = 8,
    steps: int = 16,
    eval_fn=None,
) -> float:
    """Quality cost of compressing one layer to d_c, all others untouched.

    Returns the mean per-step KL between the full model and the singly
    compressed model across deterministic prompts; pass ``eval_fn`` taking
    (reference report, test report) to score differently.
    """
    from .compressor import compress_model

    if sensitivities is None:
        sensitivities = layer_sensitivities(model)
    plan = _single_layer_plan(model, layer_index, d_c, sensitivities)
    compressed = compress_model(model, plan)
    prompts = random_prompts(
        model.config, seed=prompt_seed, count=num_prompts, length=prompt_len
    )
    scores = []
    for prompt in prompts:
        ref, out = compare_decodes(model, compressed, prompt, steps)
        if eval_fn is None:
            scores.append(float(np.mean(out.kl)))
        else:
            scores.append(float(eval_fn(ref, out)))
    return float(np.mean(scores))
