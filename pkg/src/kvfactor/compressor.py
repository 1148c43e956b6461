"""Weight factorization for cached key/value compression.

Keys: w_k is truncated by SVD to P_k @ A, where P_k (model_dim x d_c) maps a
hidden state to the cached latent and A (d_c x kv width) reconstructs the
per-head keys. The per-head blocks of A fold into the query projection, so
scoring against latents needs no reconstruction when rotary embeddings are
off. Values: the mirror factorization P_v @ B, with each head's block of B
folded into the output projection. Both folds are algebraically exact; the
only approximation anywhere is the SVD truncation itself.

Skipped layers pass through untouched and keep their full-width cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .densemat import Matrix, svd, truncate
from .errors import ContainerFormatError, ContractViolationError
from .model import (
    LayerWeights,
    ModelConfig,
    ModelWeights,
    _layer_tensor_items,
    _take_tensor,
    _take_vector,
    config_from_fields,
    config_to_fields,
)
from .sensitivity import CompressionPlan, plan_from_dict, plan_to_dict


@dataclass(frozen=True)
class CompressedLayer:
    """One attention layer with factorized key/value projections."""

    d_c: int
    key_down: Matrix                  # model_dim x d_c
    key_up: tuple[Matrix, ...]        # per kv head: d_c x head_dim
    w_q: Matrix                       # original query projection
    fused_q: tuple[Matrix, ...]       # per query head: model_dim x d_c
    value_down: Matrix                # model_dim x d_c
    fused_out: tuple[Matrix, ...]     # per query head: d_c x model_dim
    attn_norm: np.ndarray
    mlp_gate: Matrix
    mlp_up: Matrix
    mlp_down: Matrix
    mlp_norm: np.ndarray


@dataclass(frozen=True)
class CompressedModel:
    config: ModelConfig
    plan: CompressionPlan
    embedding: Matrix
    layers: tuple[CompressedLayer | LayerWeights, ...]
    final_norm: np.ndarray
    lm_head: Matrix


def _head_blocks(flat: np.ndarray, head_dim: int) -> tuple[Matrix, ...]:
    n = flat.shape[1] // head_dim
    return tuple(
        Matrix(flat[:, i * head_dim:(i + 1) * head_dim]) for i in range(n)
    )


def compress_layer(layer: LayerWeights, d_c: int, config: ModelConfig) -> CompressedLayer:
    """Factorize one layer's key and value projections at width d_c."""
    kv_dim = config.kv_dim
    if not 1 <= d_c <= kv_dim:
        raise ContractViolationError(f"d_c {d_c} outside [1, {kv_dim}]")
    d = config.head_dim

    key_svd = truncate(svd(layer.w_k), d_c)
    key_down = key_svd.u
    key_up_flat = key_svd.sigma[:, None] * key_svd.vt.data
    key_up = _head_blocks(key_up_flat, d)

    value_svd = truncate(svd(layer.w_v), d_c)
    value_down = value_svd.u
    value_up_flat = value_svd.sigma[:, None] * value_svd.vt.data
    value_up = _head_blocks(value_up_flat, d)

    fused_q = []
    fused_out = []
    for j in range(config.num_heads):
        g = config.kv_head_of(j)
        wq_j = layer.w_q.data[:, j * d:(j + 1) * d]
        fused_q.append(Matrix(wq_j @ key_up[g].data.T))
        wo_j = layer.w_o.data[j * d:(j + 1) * d, :]
        fused_out.append(Matrix(value_up[g].data @ wo_j))

    return CompressedLayer(
        d_c=d_c,
        key_down=key_down,
        key_up=key_up,
        w_q=layer.w_q,
        fused_q=tuple(fused_q),
        value_down=value_down,
        fused_out=tuple(fused_out),
        attn_norm=layer.attn_norm,
        mlp_gate=layer.mlp_gate,
        mlp_up=layer.mlp_up,
        mlp_down=layer.mlp_down,
        mlp_norm=layer.mlp_norm,
    )


def _validate_plan_against_config(plan: CompressionPlan, config: ModelConfig) -> None:
    if plan.num_layers != config.num_layers:
        raise ContractViolationError(
            f"plan covers {plan.num_layers} layers, model has {config.num_layers}"
        )
    kv_dim = config.kv_dim
    for idx, entry in enumerate(plan.layers):
        if entry.layer != idx:
            raise ContractViolationError(
                f"plan layer indices out of order at position {idx}"
            )
        if entry.skip:
            if entry.d_c != kv_dim:
                raise ContractViolationError(
                    f"skipped layer {idx} must keep full width {kv_dim}, "
                    f"plan says {entry.d_c}"
                )
        elif not 1 <= entry.d_c <= kv_dim:
            raise ContractViolationError(
                f"layer {idx} d_c {entry.d_c} outside [1, {kv_dim}]"
            )


def compress_model(weights: ModelWeights, plan: CompressionPlan) -> CompressedModel:
    """Apply a plan across the stack; skipped layers pass through untouched."""
    _validate_plan_against_config(plan, weights.config)
    layers: list[CompressedLayer | LayerWeights] = []
    for entry, layer in zip(plan.layers, weights.layers):
        if entry.skip:
            layers.append(layer)
        else:
            layers.append(compress_layer(layer, entry.d_c, weights.config))
    return CompressedModel(
        config=weights.config,
        plan=plan,
        embedding=weights.embedding,
        layers=tuple(layers),
        final_norm=weights.final_norm,
        lm_head=weights.lm_head,
    )


def save_compressed(model: CompressedModel, path: str) -> None:
    """Write a compressed container: factor tensors plus the embedded plan."""
    cfg = model.config
    fields = config_to_fields(cfg)
    fields["compressed"] = True
    fields["plan"] = plan_to_dict(model.plan)
    tensors: list[tuple[str, np.ndarray]] = [("embedding", model.embedding.data)]
    for l, layer in enumerate(model.layers):
        p = f"layers.{l}."
        if isinstance(layer, LayerWeights):
            tensors.extend(_layer_tensor_items(l, layer))
            continue
        tensors.append((p + "P_k", layer.key_down.data))
        for i, a in enumerate(layer.key_up):
            tensors.append((p + f"A.{i}", a.data))
        tensors.append((p + "w_q", layer.w_q.data))
        for j, fq in enumerate(layer.fused_q):
            tensors.append((p + f"Wq_fused.{j}", fq.data))
        tensors.append((p + "P_v", layer.value_down.data))
        for j, m in enumerate(layer.fused_out):
            tensors.append((p + f"M.{j}", m.data))
        tensors.append((p + "attn_norm", layer.attn_norm))
        tensors.append((p + "mlp_gate", layer.mlp_gate.data))
        tensors.append((p + "mlp_up", layer.mlp_up.data))
        tensors.append((p + "mlp_down", layer.mlp_down.data))
        tensors.append((p + "mlp_norm", layer.mlp_norm))
    tensors.append(("final_norm", model.final_norm))
    tensors.append(("lm_head", model.lm_head.data))
    write_container(path, fields, tensors)


def load_compressed(path: str) -> CompressedModel:
    """Read a compressed container; rejects plain model containers."""
    config_fields, tensors = read_container(path)
    if not config_fields.get("compressed"):
        raise ContainerFormatError(
            "container holds a plain model; use load_model"
        )
    if "plan" not in config_fields:
        raise ContainerFormatError("compressed container missing embedded plan")
    cfg = config_from_fields(config_fields)
    plan = plan_from_dict(config_fields["plan"])
    _validate_plan_against_config(plan, cfg)
    d_model, d, kv = cfg.model_dim, cfg.head_dim, cfg.kv_dim
    qkv = cfg.num_heads * cfg.head_dim

    embedding = Matrix(_take_tensor(tensors, "embedding", cfg.vocab_size, d_model))
    layers: list[CompressedLayer | LayerWeights] = []
    for l, entry in enumerate(plan.layers):
        p = f"layers.{l}."
        if entry.skip:
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
            continue
        d_c = entry.d_c
        layers.append(CompressedLayer(
            d_c=d_c,
            key_down=Matrix(_take_tensor(tensors, p + "P_k", d_model, d_c)),
            key_up=tuple(
                Matrix(_take_tensor(tensors, p + f"A.{i}", d_c, d))
                for i in range(cfg.num_kv_heads)
            ),
            w_q=Matrix(_take_tensor(tensors, p + "w_q", d_model, qkv)),
            fused_q=tuple(
                Matrix(_take_tensor(tensors, p + f"Wq_fused.{j}", d_model, d_c))
                for j in range(cfg.num_heads)
            ),
            value_down=Matrix(_take_tensor(tensors, p + "P_v", d_model, d_c)),
            fused_out=tuple(
                Matrix(_take_tensor(tensors, p + f"M.{j}", d_c, d_model))
                for j in range(cfg.num_heads)
            ),
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
    return CompressedModel(
        config=cfg, plan=plan, embedding=embedding, layers=tuple(layers),
        final_norm=final_norm, lm_head=lm_head,
    )
