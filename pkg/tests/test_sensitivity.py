"""Sensitivity scoring and plan allocation contracts."""

from __future__ import annotations

import math

import numpy as np
import pytest

from kvfactor.densemat import Matrix
from kvfactor.errors import (
    AllocatorError,
    ContractViolationError,
    InfeasibleTargetError,
)
from kvfactor.model import (
    LayerWeights,
    ModelWeights,
    SpectrumSpec,
    generate_synthetic,
    preset_config,
)
from kvfactor.sensitivity import (
    CompressionPlan,
    LayerSensitivity,
    default_threshold,
    layer_sensitivities,
    optimal_ratios,
    plan_from_dict,
    plan_optimal_ratio,
    plan_progressive,
    plan_to_dict,
    plan_uniform,
    plan_variance_fraction,
    retained_ratio,
    solve_dmin,
)

TOY = preset_config("toy-small")


def sens_from_kappa_tilde(values) -> list[LayerSensitivity]:
    return [
        LayerSensitivity(layer=i, kappa_key=1.0, kappa_value=1.0, kappa_tilde=v)
        for i, v in enumerate(values)
    ]


class TestLayerSensitivities:
    def test_cumulative_product_back_to_front(self):
        w = generate_synthetic(TOY, SpectrumSpec(decay=0.9), seed=2)
        sens = layer_sensitivities(w)
        assert [s.layer for s in sens] == list(range(TOY.num_layers))
        # independent oracle: per-matrix conditions from LAPACK
        kappas = []
        for layer in w.layers:
            sk = np.linalg.svd(layer.w_k.data, compute_uv=False)
            sv = np.linalg.svd(layer.w_v.data, compute_uv=False)
            kappas.append((sk[0] / sk[-1]) * (sv[0] / sv[-1]))
        running = 1.0
        expected = [0.0] * len(kappas)
        for i in range(len(kappas) - 1, -1, -1):
            running *= kappas[i]
            expected[i] = running
        for s, want in zip(sens, expected):
            assert s.kappa_tilde == pytest.approx(want, rel=1e-6)

    def test_monotone_nonincreasing_with_depth(self):
        w = generate_synthetic(TOY, SpectrumSpec(decay=0.85), seed=5)
        sens = layer_sensitivities(w)
        values = [s.kappa_tilde for s in sens]
        assert all(a >= b * (1 - 1e-12) for a, b in zip(values, values[1:]))

    def test_rank_deficient_layer_infects_shallower_layers(self):
        w = generate_synthetic(TOY, SpectrumSpec(decay=0.9), seed=3)
        kv = TOY.kv_dim
        # make layer 5's value projection rank deficient
        defective = np.array(w.layers[5].w_v.data)
        defective[:, -1] = defective[:, 0]
        layers = list(w.layers)
        layers[5] = LayerWeights(**{
            **{f: getattr(w.layers[5], f) for f in (
                "w_q", "w_k", "w_o", "attn_norm", "mlp_gate", "mlp_up",
                "mlp_down", "mlp_norm")},
            "w_v": Matrix(defective),
        })
        w2 = ModelWeights(config=w.config, embedding=w.embedding,
                          layers=tuple(layers), final_norm=w.final_norm,
                          lm_head=w.lm_head)
        sens = layer_sensitivities(w2)
        assert all(math.isinf(sens[i].kappa_tilde) for i in range(6))
        assert all(math.isfinite(sens[i].kappa_tilde) for i in range(6, 8))
        assert kv == 32


class TestProgressivePlan:
    def test_even_log_spacing_gives_linear_dims(self):
        sens = sens_from_kappa_tilde([math.e ** 4, math.e ** 3, math.e ** 2, math.e])
        plan = plan_progressive(sens, d_max=32, d_min=8, threshold=math.inf, kv_dim=32)
        assert [p.d_c for p in plan.layers] == [32, 24, 16, 8]
        assert not any(p.skip for p in plan.layers)

    def test_endpoints(self):
        sens = sens_from_kappa_tilde([50.0, 7.0, 2.0])
        plan = plan_progressive(sens, d_max=20, d_min=5, threshold=math.inf, kv_dim=32)
        assert plan.layers[0].d_c == 20
        assert plan.layers[-1].d_c == 5

    def test_degenerate_range_keeps_dmax(self):
        sens = sens_from_kappa_tilde([3.0, 3.0, 3.0])
        plan = plan_progressive(sens, d_max=24, d_min=4, threshold=math.inf, kv_dim=32)
        assert [p.d_c for p in plan.layers] == [24, 24, 24]

    def test_skipped_layer_keeps_full_width_and_sets_the_scale(self):
        # the skipped layer still participates in the min/max of the log range
        sens = sens_from_kappa_tilde([math.e ** 6, math.e ** 4, math.e ** 2])
        plan = plan_progressive(
            sens, d_max=32, d_min=8, threshold=math.e ** 5, kv_dim=40
        )
        assert plan.layers[0].skip and plan.layers[0].d_c == 40
        assert [p.d_c for p in plan.layers[1:]] == [20, 8]

    def test_infinite_kappa_always_skipped(self):
        sens = sens_from_kappa_tilde([math.inf, 10.0, 3.0])
        plan = plan_progressive(sens, d_max=16, d_min=4, threshold=math.inf, kv_dim=32)
        assert plan.layers[0].skip and plan.layers[0].d_c == 32
        assert not plan.layers[1].skip

    def test_bounds_validated(self):
        sens = sens_from_kappa_tilde([2.0])
        with pytest.raises(ContractViolationError):
            plan_progressive(sens, d_max=40, d_min=8, threshold=1e9, kv_dim=32)
        with pytest.raises(ContractViolationError):
            plan_progressive(sens, d_max=16, d_min=0, threshold=1e9, kv_dim=32)
        with pytest.raises(ContractViolationError):
            plan_progressive(sens, d_max=16, d_min=4, threshold=-1.0, kv_dim=32)

    def test_alignment_flag(self):
        sens = sens_from_kappa_tilde([math.e ** 4, math.e ** 3, math.e ** 2, math.e])
        plan = plan_progressive(
            sens, d_max=30, d_min=9, threshold=math.inf, kv_dim=32, align=8
        )
        for p in plan.layers:
            assert 9 <= p.d_c <= 30


class TestUniformPlan:
    def test_infinite_threshold_compresses_everything(self):
        sens = sens_from_kappa_tilde([100.0, 10.0, 2.0])
        plan = plan_uniform(sens, d_c=12, threshold=math.inf, kv_dim=32)
        assert [p.d_c for p in plan.layers] == [12, 12, 12]
        assert not any(p.skip for p in plan.layers)

    def test_tiny_threshold_skips_everything(self):
        sens = sens_from_kappa_tilde([100.0, 10.0, 2.0])
        plan = plan_uniform(sens, d_c=12, threshold=1.5, kv_dim=32)
        assert all(p.skip for p in plan.layers)
        assert retained_ratio(plan, 32) == 1.0

    def test_skip_set_matches_progressive(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            values = np.exp(rng.uniform(0.0, 12.0, 6))
            values.sort()
            sens = sens_from_kappa_tilde(values[::-1])
            threshold = float(np.exp(rng.uniform(0.0, 12.0)))
            prog = plan_progressive(
                sens, d_max=16, d_min=4, threshold=threshold, kv_dim=32
            )
            unif = plan_uniform(sens, d_c=8, threshold=threshold, kv_dim=32)
            assert [p.skip for p in prog.layers] == [p.skip for p in unif.layers]


class TestSolveDmin:
    def test_frozen_bracketing_case(self):
        sens = sens_from_kappa_tilde([math.e ** 4, math.e ** 3, math.e ** 2, math.e])
        d_min, plan = solve_dmin(
            sens, target_ratio=0.6, d_max=32, threshold=math.inf, kv_dim=32
        )
        assert d_min == 6
        assert retained_ratio(plan, 32) == pytest.approx(76 / 128)
        above = plan_progressive(
            sens, d_max=32, d_min=7, threshold=math.inf, kv_dim=32
        )
        assert retained_ratio(above, 32) > 0.6

    def test_bracketing_property_random(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            values = np.sort(np.exp(rng.uniform(0.5, 14.0, 8)))[::-1]
            sens = sens_from_kappa_tilde(values)
            target = float(rng.uniform(0.3, 0.95))
            try:
                d_min, plan = solve_dmin(
                    sens, target_ratio=target, d_max=32, threshold=math.inf, kv_dim=32
                )
            except InfeasibleTargetError as err:
                # legitimate when even d_min=1 overshoots; floor must prove it
                assert err.floor_ratio is not None and err.floor_ratio > target
                continue
            assert retained_ratio(plan, 32) <= target + 1e-12
            if d_min < 32:
                bigger = plan_progressive(
                    sens, d_max=32, d_min=d_min + 1, threshold=math.inf, kv_dim=32
                )
                assert retained_ratio(bigger, 32) > target

    def test_ratio_one_means_no_compression_needed(self):
        sens = sens_from_kappa_tilde([50.0, 2.0])
        d_min, plan = solve_dmin(
            sens, target_ratio=1.0, d_max=32, threshold=math.inf, kv_dim=32
        )
        assert d_min == 32
        assert retained_ratio(plan, 32) == 1.0

    def test_infeasible_reports_floor(self):
        sens = sens_from_kappa_tilde([100.0, 50.0, 2.0])
        # two layers skipped at threshold 60 -> floor ratio > 2/3
        with pytest.raises(InfeasibleTargetError) as err:
            solve_dmin(sens, target_ratio=0.5, d_max=32, threshold=60.0, kv_dim=32)
        assert err.value.floor_ratio is not None
        assert err.value.floor_ratio > 0.5


class TestVarianceFraction:
    def test_flat_spectrum_takes_half_at_alpha_half(self):
        w = generate_synthetic(TOY, SpectrumSpec(decay=1.0), seed=4)
        plan = plan_variance_fraction(w, alpha=0.5)
        assert plan.strategy == "variance-fraction"
        assert all(p.d_c == 16 for p in plan.layers)

    def test_geometric_spectrum_frozen_rank(self):
        # sigma_i = 0.5**i, squared mass fraction (1 - 0.25**k); alpha=0.99 -> k=4
        w = generate_synthetic(TOY, SpectrumSpec(decay=0.5), seed=4)
        plan = plan_variance_fraction(w, alpha=0.99)
        assert all(p.d_c == 4 for p in plan.layers)

    def test_alpha_one_keeps_full_rank(self):
        w = generate_synthetic(TOY, SpectrumSpec(decay=0.7), seed=6)
        plan = plan_variance_fraction(w, alpha=1.0)
        assert all(p.d_c == TOY.kv_dim for p in plan.layers)

    def test_alpha_validated(self):
        w = generate_synthetic(TOY, SpectrumSpec(decay=0.9), seed=4)
        with pytest.raises(ContractViolationError):
            plan_variance_fraction(w, alpha=0.0)
        with pytest.raises(ContractViolationError):
            plan_variance_fraction(w, alpha=1.5)


class TestOptimalRatio:
    def test_equal_sensitivities_split_evenly(self):
        sens = sens_from_kappa_tilde([math.e ** 2] * 4)
        ratios = optimal_ratios(sens, target_ratio=0.5)
        assert np.allclose(ratios, 0.5 ** 0.25)

    def test_product_equals_target(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            values = np.exp(rng.uniform(0.1, 9.0, 6))
            sens = sens_from_kappa_tilde(values)
            target = float(rng.uniform(0.2, 0.9))
            ratios = optimal_ratios(sens, target_ratio=target)
            assert float(np.prod(ratios)) == pytest.approx(target, abs=1e-9)

    def test_weighting_direction(self):
        # the product budget puts the squeeze on the high-kappa layers: their
        # exponent is larger, and the base is below one
        sens = sens_from_kappa_tilde([math.e ** 6, math.e ** 2, math.e])
        ratios = optimal_ratios(sens, target_ratio=0.5)
        assert ratios[0] < ratios[1] < ratios[2]
        plan = plan_optimal_ratio(sens, target_ratio=0.5, kv_dim=32)
        dims = [p.d_c for p in plan.layers]
        assert dims[0] <= dims[1] <= dims[2]
        assert plan.strategy == "optimal-ratio"

    def test_rejects_unit_or_infinite_kappa(self):
        with pytest.raises(AllocatorError):
            optimal_ratios(sens_from_kappa_tilde([1.0, 5.0]), target_ratio=0.5)
        with pytest.raises(AllocatorError):
            optimal_ratios(sens_from_kappa_tilde([math.inf, 5.0]), target_ratio=0.5)


class TestPlanSerialization:
    def test_round_trip_with_infinities(self):
        sens = sens_from_kappa_tilde([math.inf, math.e ** 3, 2.0])
        plan = plan_progressive(sens, d_max=16, d_min=4, threshold=math.inf, kv_dim=32)
        back = plan_from_dict(plan_to_dict(plan))
        assert back == plan

    def test_dict_shape(self):
        plan = plan_uniform(
            sens_from_kappa_tilde([4.0, 2.0]), d_c=8, threshold=10.0, kv_dim=32
        )
        d = plan_to_dict(plan)
        assert set(d) == {"strategy", "d_max", "d_min", "threshold", "layers"}
        assert set(d["layers"][0]) == {"l", "skip", "d_c", "kappa_tilde"}

    def test_malformed_rejected(self):
        with pytest.raises(ContractViolationError):
            plan_from_dict({"strategy": "uniform", "layers": []})


class TestScalingInvariance:
    def test_plans_ignore_global_weight_scale(self):
        w = generate_synthetic(TOY, SpectrumSpec(decay=0.8), seed=9)
        scaled_layers = tuple(
            LayerWeights(
                w_q=l.w_q, w_k=Matrix(3.0 * l.w_k.data), w_v=Matrix(3.0 * l.w_v.data),
                w_o=l.w_o, attn_norm=l.attn_norm, mlp_gate=l.mlp_gate,
                mlp_up=l.mlp_up, mlp_down=l.mlp_down, mlp_norm=l.mlp_norm,
            )
            for l in w.layers
        )
        w2 = ModelWeights(config=w.config, embedding=w.embedding,
                          layers=scaled_layers, final_norm=w.final_norm,
                          lm_head=w.lm_head)
        s1 = layer_sensitivities(w)
        s2 = layer_sensitivities(w2)
        for a, b in zip(s1, s2):
            assert a.kappa_tilde == pytest.approx(b.kappa_tilde, rel=1e-9)
        p1 = plan_progressive(s1, d_max=24, d_min=6, threshold=math.inf, kv_dim=32)
        p2 = plan_progressive(s2, d_max=24, d_min=6, threshold=math.inf, kv_dim=32)
        assert [p.d_c for p in p1.layers] == [p.d_c for p in p2.layers]


class TestDefaults:
    def test_published_defaults(self):
        assert default_threshold("llama3-8b") == 30.0
        assert default_threshold("llama2-13b") == 90.0
        assert default_threshold("llama3-70b") == 90.0

    def test_toys_need_explicit_threshold(self):
        with pytest.raises(ContractViolationError):
            default_threshold("toy-small")
