"""Layer sensitivity scoring and compressed-dimension allocation.

A layer's sensitivity is the cumulative product of the condition numbers of
its own and all deeper layers' key/value projections, accumulated back to
front. Errors injected at a layer pass through everything after it, so the
cumulative product is the planning signal: the larger it is, the more the
network downstream can amplify whatever the compression breaks.

Plans map that signal to a per-layer compressed dimension. The progressive
allocator interpolates between d_min and d_max on a log scale; the uniform
one is the flat baseline; two alternates (variance-fraction and a
closed-form optimal split of a target ratio) come from the same spectral
bookkeeping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .densemat import condition_number, svd
from .errors import (
    AllocatorError,
    ContractViolationError,
    InfeasibleTargetError,
)
from .model import ModelWeights

DEGENERATE_LOG_RANGE = 1e-9

# Default skip thresholds per published preset; toy models are experiments
# and must state theirs explicitly.
DEFAULT_SKIP_THRESHOLDS: dict[str, float] = {
    "llama3-8b": 30.0,
    "llama2-13b": 90.0,
    "llama3-70b": 90.0,
}


def default_threshold(preset_name: str) -> float:
    if preset_name in DEFAULT_SKIP_THRESHOLDS:
        return DEFAULT_SKIP_THRESHOLDS[preset_name]
    raise ContractViolationError(
        f"no default skip threshold for preset {preset_name!r}; pass one explicitly"
    )


@dataclass(frozen=True)
class LayerSensitivity:
    layer: int
    kappa_key: float
    kappa_value: float
    kappa_tilde: float


@dataclass(frozen=True)
class LayerPlan:
    layer: int
    skip: bool
    d_c: int
    kappa_tilde: float


@dataclass(frozen=True)
class CompressionPlan:
    strategy: str
    d_max: int
    d_min: int
    threshold: float
    layers: tuple[LayerPlan, ...]

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def layer_sensitivities(weights: ModelWeights) -> list[LayerSensitivity]:
    """Condition numbers per layer plus the back-to-front cumulative product.

    An infinite condition number anywhere makes that layer's cumulative value
    (and every shallower one's) infinite; overflow of the running product
    saturates to infinity the same way, which planners treat as "never
    compress".
    """
    kappas = []
    for layer in weights.layers:
        kappas.append((condition_number(layer.w_k), condition_number(layer.w_v)))
    out: list[LayerSensitivity] = []
    running = 1.0
    for idx in range(len(kappas) - 1, -1, -1):
        kk, kv = kappas[idx]
        running *= kk * kv
        out.append(LayerSensitivity(
            layer=idx, kappa_key=kk, kappa_value=kv, kappa_tilde=running,
        ))
    out.reverse()
    return out


def _skip(kappa_tilde: float, threshold: float) -> bool:
    return math.isinf(kappa_tilde) or kappa_tilde > threshold


def _check_bounds(d_min: int, d_max: int, kv_dim: int) -> None:
    if not 1 <= d_min <= d_max <= kv_dim:
        raise ContractViolationError(
            f"need 1 <= d_min ({d_min}) <= d_max ({d_max}) <= kv width ({kv_dim})"
        )


def _check_threshold(threshold: float) -> None:
    if math.isnan(threshold) or threshold <= 0.0:
        raise ContractViolationError(f"threshold must be positive, got {threshold}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _apply_align(d_c: int, align: int, d_min: int, d_max: int) -> int:
    if align <= 1:
        return d_c
    aligned = max(align, _round_half_up(d_c / align) * align)
    return max(d_min, min(aligned, d_max))


def plan_progressive(
    sensitivities: list[LayerSensitivity],
    *,
    d_max: int,
    d_min: int,
    threshold: float,
    kv_dim: int,
    align: int = 1,
) -> CompressionPlan:
    """Log-interpolated allocation: most sensitive layers keep d_max.

    The interpolation runs over the log cumulative condition numbers of all
    layers with a finite value, skipped ones included; layers skipped for
    exceeding the threshold (or for an infinite value) keep the full width.
    A degenerate log range collapses every compressed layer to d_max.
    """
    _check_bounds(d_min, d_max, kv_dim)
    _check_threshold(threshold)
    finite_logs = [
        math.log(s.kappa_tilde) for s in sensitivities
        if not math.isinf(s.kappa_tilde)
    ]
    degenerate = True
    log_hi = log_lo = 0.0
    if finite_logs:
        log_hi = max(finite_logs)
        log_lo = min(finite_logs)
        degenerate = (log_hi - log_lo) < DEGENERATE_LOG_RANGE
    layers = []
    for s in sensitivities:
        if _skip(s.kappa_tilde, threshold):
            layers.append(LayerPlan(s.layer, True, kv_dim, s.kappa_tilde))
            continue
        if degenerate:
            d_c = d_max
        else:
            t = (log_hi - math.log(s.kappa_tilde)) / (log_hi - log_lo)
            raw = d_max * (1.0 - t * (1.0 - d_min / d_max))
            d_c = max(d_min, min(_round_half_up(raw), d_max))
        d_c = _apply_align(d_c, align, d_min, d_max)
        layers.append(LayerPlan(s.layer, False, d_c, s.kappa_tilde))
    return CompressionPlan(
        strategy="progressive", d_max=d_max, d_min=d_min,
        threshold=threshold, layers=tuple(layers),
    )


def plan_uniform(
    sensitivities: list[LayerSensitivity],
    *,
    d_c: int,
    threshold: float,
    kv_dim: int,
) -> CompressionPlan:
    """Same compressed width everywhere, same skip rule as progressive."""
    _check_bounds(d_c, d_c, kv_dim)
    _check_threshold(threshold)
    layers = []
    for s in sensitivities:
        if _skip(s.kappa_tilde, threshold):
            layers.append(LayerPlan(s.layer, True, kv_dim, s.kappa_tilde))
        else:
            layers.append(LayerPlan(s.layer, False, d_c, s.kappa_tilde))
    return CompressionPlan(
        strategy="uniform", d_max=d_c, d_min=d_c,
        threshold=threshold, layers=tuple(layers),
    )


def retained_ratio(plan: CompressionPlan, kv_dim: int) -> float:
    """Fraction of the full cache the plan keeps (skipped layers count full)."""
    if not plan.layers:
        raise ContractViolationError("plan has no layers")
    total = sum(p.d_c for p in plan.layers)
    return total / (len(plan.layers) * kv_dim)


def solve_dmin(
    sensitivities: list[LayerSensitivity],
    *,
    target_ratio: float,
    d_max: int,
    threshold: float,
    kv_dim: int,
    align: int = 1,
) -> tuple[int, CompressionPlan]:
    """Largest d_min whose progressive plan fits the retained-ratio budget.

    The returned d_min brackets the target: its plan ratio is <= the target,
    and d_min + 1 (when in range) would overshoot. Raises a structured
    infeasibility error carrying the floor ratio when even d_min = 1 cannot
    meet the budget (for instance when skipped layers already exceed it).
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ContractViolationError(f"target ratio must be in (0, 1], got {target_ratio}")

    def ratio_at(d_min: int) -> tuple[float, CompressionPlan]:
        plan = plan_progressive(
            sensitivities, d_max=d_max, d_min=d_min,
            threshold=threshold, kv_dim=kv_dim, align=align,
        )
        return retained_ratio(plan, kv_dim), plan

    floor_ratio, floor_plan = ratio_at(1)
    if floor_ratio > target_ratio:
        raise InfeasibleTargetError(
            f"target ratio {target_ratio} unreachable; floor is {floor_ratio:.6f}",
            floor_ratio=floor_ratio,
        )
    lo, best = 1, (1, floor_plan)
    hi = d_max
    while lo <= hi:
        mid = (lo + hi) // 2
        r, plan = ratio_at(mid)
        if r <= target_ratio:
            best = (mid, plan)
            lo = mid + 1
        else:
            hi = mid - 1
    return best


def plan_variance_fraction(
    weights: ModelWeights, *, alpha: float
) -> CompressionPlan:
    """Keep enough ranks to capture an alpha fraction of squared-spectrum mass.

    Per layer, each of the key and value projections gets the smallest k
    whose leading singular values hold at least alpha of the total squared
    mass; the layer keeps the larger of the two. No layers are skipped.
    """
    if not 0.0 < alpha <= 1.0:
        raise ContractViolationError(f"alpha must be in (0, 1], got {alpha}")
    kv_dim = weights.config.kv_dim
    sens = layer_sensitivities(weights)
    layers = []
    for s, layer in zip(sens, weights.layers):
        d_c = max(
            _variance_rank(layer.w_k, alpha),
            _variance_rank(layer.w_v, alpha),
        )
        layers.append(LayerPlan(s.layer, False, d_c, s.kappa_tilde))
    d_cs = [p.d_c for p in layers]
    return CompressionPlan(
        strategy="variance-fraction", d_max=kv_dim, d_min=min(d_cs),
        threshold=math.inf, layers=tuple(layers),
    )


def _variance_rank(matrix, alpha: float) -> int:
    sigma = svd(matrix).sigma
    power = sigma * sigma
    total = float(power.sum())
    if total == 0.0:
        return 1
    frac = np.cumsum(power) / total
    hits = np.nonzero(frac >= alpha - 1e-12)[0]
    return int(hits[0]) + 1 if hits.size else len(sigma)


def optimal_ratios(
    sensitivities: list[LayerSensitivity], *, target_ratio: float
) -> np.ndarray:
    """Closed-form per-layer keep ratios whose product is the target.

    Each layer's ratio is target ** (log kappa_tilde_l / sum of logs). Note
    the lean: with a base below one, layers with larger cumulative condition
    numbers get larger exponents and therefore smaller keep ratios. That is
    what minimizing a sensitivity-weighted discard under a product budget
    works out to, and it is deliberately not the progressive allocation.
    Needs every cumulative condition number finite and > 1; otherwise the
    exponents are undefined and the allocator refuses.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ContractViolationError(
            f"target ratio must be in (0, 1], got {target_ratio}"
        )
    logs = []
    for s in sensitivities:
        if math.isinf(s.kappa_tilde) or s.kappa_tilde <= 1.0:
            raise AllocatorError(
                f"optimal-ratio needs finite kappa_tilde > 1; layer {s.layer} "
                f"has {s.kappa_tilde}"
            )
        logs.append(math.log(s.kappa_tilde))
    logs_arr = np.array(logs)
    return target_ratio ** (logs_arr / logs_arr.sum())


def plan_optimal_ratio(
    sensitivities: list[LayerSensitivity],
    *,
    target_ratio: float,
    kv_dim: int,
) -> CompressionPlan:
    """Allocation from the closed-form ratio split, rounded to integer dims."""
    ratios = optimal_ratios(sensitivities, target_ratio=target_ratio)
    layers = []
    for s, r in zip(sensitivities, ratios):
        d_c = max(1, min(_round_half_up(r * kv_dim), kv_dim))
        layers.append(LayerPlan(s.layer, False, d_c, s.kappa_tilde))
    d_cs = [p.d_c for p in layers]
    return CompressionPlan(
        strategy="optimal-ratio", d_max=max(d_cs), d_min=min(d_cs),
        threshold=math.inf, layers=tuple(layers),
    )


def _encode_float(x: float):
    if math.isinf(x):
        return "inf"
    return x


def _decode_float(x) -> float:
    if x == "inf":
        return math.inf
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return float(x)
    raise ContractViolationError(f"bad numeric field in plan: {x!r}")


def plan_to_dict(plan: CompressionPlan) -> dict:
    """JSON-ready form; infinities encode as the string "inf"."""
    return {
        "strategy": plan.strategy,
        "d_max": plan.d_max,
        "d_min": plan.d_min,
        "threshold": _encode_float(plan.threshold),
        "layers": [
            {
                "l": p.layer,
                "skip": p.skip,
                "d_c": p.d_c,
                "kappa_tilde": _encode_float(p.kappa_tilde),
            }
            for p in plan.layers
        ],
    }


def plan_from_dict(data: dict) -> CompressionPlan:
    try:
        layers = tuple(
            LayerPlan(
                layer=int(entry["l"]),
                skip=bool(entry["skip"]),
                d_c=int(entry["d_c"]),
                kappa_tilde=_decode_float(entry["kappa_tilde"]),
            )
            for entry in data["layers"]
        )
        return CompressionPlan(
            strategy=str(data["strategy"]),
            d_max=int(data["d_max"]),
            d_min=int(data["d_min"]),
            threshold=_decode_float(data["threshold"]),
            layers=layers,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractViolationError(f"malformed plan JSON: {exc}") from exc
