"""Batch command-line surface for the toolkit.

Subcommands cover the full loop: synthesize a model, plan a compression,
apply it, compare decodes, profile per-layer cost, reproduce the
shallow-versus-deep experiment, verify error bounds, and size caches.

Conventions shared by every command:

* ``--out`` names the output directory; when omitted it falls back to the
  ``KVFACTOR_OUT_DIR`` environment variable.
* A ``manifest.json`` written beside the outputs records the command, the
  resolved arguments, seeds, paths, tool version, and wall-clock duration.
  Outputs other than the manifest are bit-exact across reruns; timing
  lives only in the manifest so it never poisons reproducibility.
* ``--format json|csv|text`` selects the stdout rendering. Files on disk
  are always written in their fixed formats regardless of ``--format``.
* Report commands render matplotlib figures next to their CSV files;
  ``--no-figures`` skips the rendering.
* Exit codes: 0 success, 2 validation error, 3 numerical-contract
  failure, 4 I/O or container error. Failures print a one-line JSON
  object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .compressor import CompressedModel, compress_model, load_compressed, save_compressed
from .errors import (
    AllocatorError,
    ContainerFormatError,
    ContractViolationError,
    InfeasibleTargetError,
    KvFactorError,
    NumericalError,
    UndefinedInputError,
)
from .bounds import (
    generate_chain,
    transformer_divergence_report,
    verify_chain_bound,
)
from .model import (
    LARGE_PRESETS,
    PRESETS,
    ModelConfig,
    SpectrumSpec,
    generate_synthetic,
    load_model,
    preset_config,
    save_model,
)
from .runtime import cache_bytes, compare_decodes, profile_single_layer, random_prompts
from .sensitivity import (
    CompressionPlan,
    LayerPlan,
    layer_sensitivities,
    plan_from_dict,
    plan_progressive,
    plan_to_dict,
    plan_uniform,
    retained_ratio,
    solve_dmin,
)

VERSION = "0.1.0"

OUT_DIR_ENV = "KVFACTOR_OUT_DIR"

# Hand-rolled configs above this weight count need --allow-large too; a
# synthetic model this big is pointless to materialize by accident.
_LARGE_ELEMENT_GUARD = 1 << 26


# ---------------------------------------------------------------------------
# shared plumbing


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _json_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, default=_json_default)


def _encode_threshold(x: float):
    return "inf" if math.isinf(x) else x


def _resolve_out(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get(OUT_DIR_ENV)
    if not out:
        raise ContractViolationError(
            f"no output directory: pass --out or set {OUT_DIR_ENV}"
        )
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out_dir: Path, *, command: str, args: argparse.Namespace,
                    seeds: list[int], inputs: list[str], outputs: list[str],
                    started: float) -> Path:
    arguments = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k not in ("func", "command") and not k.startswith("_")
    }
    for key, value in list(arguments.items()):
        if isinstance(value, float) and math.isinf(value):
            arguments[key] = "inf"
    manifest = {
        "command": command,
        "arguments": arguments,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "version": VERSION,
        "duration_seconds": round(time.perf_counter() - started, 6),
    }
    path = out_dir / "manifest.json"
    path.write_text(_json_line(manifest) + "\n", encoding="utf-8")
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n",
        encoding="utf-8",
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _emit(args, payload: dict, text_lines: list[str],
          csv_table: tuple[list[str], list[list]] | None = None) -> None:
    if args.format == "json":
        print(_json_line(payload))
    elif args.format == "csv":
        if csv_table is None:
            header, rows = ["key", "value"], [[k, payload[k]] for k in sorted(payload)]
        else:
            header, rows = csv_table
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)
    else:
        for line in text_lines:
            print(line)


def _load_any(path: str):
    """Open a container as plain or compressed, whichever it holds."""
    cfg_path = Path(path) / "config.json"
    try:
        fields = json.loads(cfg_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ContainerFormatError(f"{path} is not a model container") from exc
    except json.JSONDecodeError as exc:
        raise ContainerFormatError(f"{path}: unreadable config.json") from exc
    if fields.get("compressed"):
        return load_compressed(path)
    return load_model(path)


def _parse_int_list(text: str, label: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ContractViolationError(f"{label} must be comma-separated integers") from exc


def _parse_float_list(text: str, label: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ContractViolationError(f"{label} must be comma-separated numbers") from exc


def _prompt_from_args(config: ModelConfig, args) -> list[int]:
    if args.prompt is not None:
        return _parse_int_list(args.prompt, "--prompt")
    return random_prompts(config, seed=args.prompt_seed, count=1,
                          length=args.prompt_len)[0]


def _mean_kl(report) -> float:
    return float(np.mean(report.kl)) if report.kl else 0.0


# ---------------------------------------------------------------------------
# gen


def _config_from_args(args) -> ModelConfig:
    config = preset_config(args.preset)
    overrides = {}
    for name in ("vocab_size", "num_layers", "num_heads", "num_kv_heads",
                 "head_dim", "model_dim", "mlp_hidden", "max_seq_len"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.no_rope:
        overrides["rope_enabled"] = False
    if args.rope_base is not None:
        overrides["rope_base"] = args.rope_base
    return dataclasses.replace(config, **overrides) if overrides else config


def _estimated_elements(c: ModelConfig) -> int:
    attn = c.model_dim * (c.num_heads * c.head_dim + 2 * c.kv_dim) \
        + c.num_heads * c.head_dim * c.model_dim
    mlp = 3 * c.model_dim * c.mlp_hidden
    return 2 * c.vocab_size * c.model_dim + c.num_layers * (attn + mlp)


def cmd_gen(args) -> int:
    started = time.perf_counter()
    config = _config_from_args(args)
    guarded = args.preset in LARGE_PRESETS or _estimated_elements(config) > _LARGE_ELEMENT_GUARD
    if guarded and not args.allow_large:
        raise ContractViolationError(
            f"refusing to materialize {args.preset!r} at this size without "
            "--allow-large; large presets are meant for the memory calculator"
        )
    per_layer = None
    if args.per_layer_decay is not None:
        per_layer = tuple(_parse_float_list(args.per_layer_decay, "--per-layer-decay"))
    spectrum = SpectrumSpec(sigma_max=args.sigma_max, decay=args.decay,
                            per_layer_decay=per_layer)
    out_dir = _resolve_out(args)
    weights = generate_synthetic(config, spectrum, seed=args.seed)
    save_model(weights, str(out_dir))
    _write_manifest(out_dir, command="gen", args=args, seeds=[args.seed],
                    inputs=[], outputs=[str(out_dir)], started=started)
    payload = {
        "preset": args.preset,
        "seed": args.seed,
        "num_layers": config.num_layers,
        "kv_dim": config.kv_dim,
        "out": str(out_dir),
    }
    _emit(args, payload, [
        f"wrote {args.preset} model (seed {args.seed}, "
        f"{config.num_layers} layers, kv width {config.kv_dim}) to {out_dir}",
    ])
    return 0


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    started = time.perf_counter()
    weights = _load_any(args.model_dir)
    if isinstance(weights, CompressedModel):
        raise ContractViolationError("plan requires an uncompressed model container")
    config = weights.config
    sens = layer_sensitivities(weights)
    kv_dim = config.kv_dim
    d_max = args.d_max if args.d_max is not None else kv_dim
    if args.strategy == "uniform":
        if args.d_c is None:
            raise ContractViolationError("uniform strategy requires --d-c")
        plan = plan_uniform(sens, d_c=args.d_c, threshold=args.threshold,
                            kv_dim=kv_dim)
    else:
        if (args.d_min is None) == (args.target_ratio is None):
            raise ContractViolationError(
                "progressive strategy requires exactly one of --d-min or --target-ratio"
            )
        if args.target_ratio is not None:
            _, plan = solve_dmin(sens, target_ratio=args.target_ratio,
                                 d_max=d_max, threshold=args.threshold,
                                 kv_dim=kv_dim, align=args.align)
        else:
            plan = plan_progressive(sens, d_max=d_max, d_min=args.d_min,
                                    threshold=args.threshold, kv_dim=kv_dim,
                                    align=args.align)
    out_dir = _resolve_out(args)
    plan_path = out_dir / "plan.json"
    _write_json(plan_path, plan_to_dict(plan))
    csv_path = out_dir / "plan.csv"
    header = ["layer", "kappa_tilde", "d_c", "skip"]
    rows = [[lp.layer, f"{lp.kappa_tilde:.17g}", lp.d_c, int(lp.skip)]
            for lp in plan.layers]
    _write_csv(csv_path, header, rows)
    outputs = [str(plan_path), str(csv_path)]
    if not args.no_figures:
        fig_path = figures.plot_cache_widths(
            kv_dim, [lp.d_c for lp in plan.layers],
            [lp.skip for lp in plan.layers], out_dir / "plan_widths.png")
        outputs.append(str(fig_path))
    _write_manifest(out_dir, command="plan", args=args, seeds=[],
                    inputs=[args.model_dir], outputs=outputs, started=started)
    ratio = retained_ratio(plan, kv_dim)
    payload = {
        "strategy": plan.strategy,
        "d_max": plan.d_max,
        "d_min": plan.d_min,
        "threshold": _encode_threshold(plan.threshold),
        "retained_ratio": ratio,
        "skipped_layers": sum(lp.skip for lp in plan.layers),
        "plan": str(plan_path),
    }
    lines = [f"{plan.strategy} plan over {len(plan.layers)} layers: "
             f"retained ratio {ratio:.4f}, d range [{plan.d_min}, {plan.d_max}]"]
    lines += [f"  layer {lp.layer:3d}  kappa~ {lp.kappa_tilde:12.4g}  "
              f"d_c {lp.d_c:4d}{'  skip' if lp.skip else ''}"
              for lp in plan.layers]
    _emit(args, payload, lines, (header, rows))
    return 0


# ---------------------------------------------------------------------------
# compress


def cmd_compress(args) -> int:
    started = time.perf_counter()
    weights = load_model(args.model_dir)
    plan = plan_from_dict(json.loads(Path(args.plan).read_text(encoding="utf-8")))
    compressed = compress_model(weights, plan)
    out_dir = _resolve_out(args)
    save_compressed(compressed, str(out_dir))
    ratio = retained_ratio(plan, weights.config.kv_dim)
    report = {
        "layers": len(plan.layers),
        "skipped_layers": sum(lp.skip for lp in plan.layers),
        "retained_ratio": ratio,
        "widths": [lp.d_c for lp in plan.layers],
        "out": str(out_dir),
    }
    report_path = out_dir / "compress_report.json"
    _write_json(report_path, report)
    _write_manifest(out_dir, command="compress", args=args, seeds=[],
                    inputs=[args.model_dir, args.plan],
                    outputs=[str(out_dir), str(report_path)], started=started)
    _emit(args, report, [
        f"compressed {len(plan.layers)} layers "
        f"({report['skipped_layers']} skipped) at retained ratio {ratio:.4f} "
        f"into {out_dir}",
    ])
    return 0


# ---------------------------------------------------------------------------
# decode-compare


def cmd_decode_compare(args) -> int:
    started = time.perf_counter()
    reference = _load_any(args.model_dir)
    test = _load_any(args.compressed_dir)
    if reference.config != test.config:
        raise ContractViolationError("model and compressed containers disagree on config")
    prompt = _prompt_from_args(reference.config, args)
    ref_report, test_report = compare_decodes(reference, test, prompt, args.steps)
    agreement = float(np.mean(test_report.top1_match))
    out_dir = _resolve_out(args)
    steps = list(range(len(test_report.kl)))
    trace_path = out_dir / "trace.csv"
    _write_csv(
        trace_path,
        ["step", "kl", "max_abs_logit_diff", "top1_match"],
        [[s, f"{k:.17g}", f"{g:.17g}", int(m)]
         for s, k, g, m in zip(steps, test_report.kl,
                               test_report.max_abs_logit_diff,
                               test_report.top1_match)],
    )
    payload = {
        "prompt": prompt,
        "steps": args.steps,
        "reference": {
            "tokens": ref_report.tokens,
            "cache_bytes": ref_report.cache_bytes,
        },
        "test": {
            "tokens": test_report.tokens,
            "cache_bytes": test_report.cache_bytes,
        },
        "kl_mean": _mean_kl(test_report),
        "kl_max": float(np.max(test_report.kl)),
        "max_abs_logit_diff": float(np.max(test_report.max_abs_logit_diff)),
        "agreement": agreement,
        "cache_ratio": test_report.cache_bytes / max(ref_report.cache_bytes, 1),
    }
    report_path = out_dir / "decode_compare.json"
    _write_json(report_path, payload)
    outputs = [str(report_path), str(trace_path)]
    if not args.no_figures:
        fig_path = figures.plot_decode_trace(
            steps, test_report.kl, test_report.max_abs_logit_diff,
            test_report.top1_match, out_dir / "decode_compare.png")
        outputs.append(str(fig_path))
    seeds = [] if args.prompt is not None else [args.prompt_seed]
    _write_manifest(out_dir, command="decode-compare", args=args, seeds=seeds,
                    inputs=[args.model_dir, args.compressed_dir],
                    outputs=outputs, started=started)
    _emit(args, payload, [
        f"steps {args.steps}  kl mean {payload['kl_mean']:.3e}  "
        f"max logit gap {payload['max_abs_logit_diff']:.3e}  "
        f"agreement {agreement:.3f}",
        f"cache bytes {ref_report.cache_bytes} -> {test_report.cache_bytes} "
        f"(ratio {payload['cache_ratio']:.4f})",
        f"decode rate {test_report.tokens_per_sec:.1f} tok/s",
    ])
    return 0


# ---------------------------------------------------------------------------
# profile-layer


def cmd_profile_layer(args) -> int:
    started = time.perf_counter()
    weights = load_model(args.model_dir)
    config = weights.config
    widths = _parse_int_list(args.d_c, "--d-c")
    if not widths:
        raise ContractViolationError("--d-c needs at least one width")
    if args.layers == "all":
        layers = list(range(config.num_layers))
    else:
        layers = _parse_int_list(args.layers, "--layers")
    sens = layer_sensitivities(weights)
    scores = np.zeros((len(layers), len(widths)))
    for i, layer in enumerate(layers):
        for j, d_c in enumerate(widths):
            scores[i, j] = profile_single_layer(
                weights, layer, d_c, sensitivities=sens,
                prompt_seed=args.prompt_seed, num_prompts=args.prompts,
                prompt_len=args.prompt_len, steps=args.steps)
    out_dir = _resolve_out(args)
    csv_path = out_dir / "profile.csv"
    header = ["layer", "d_c", "mean_kl"]
    rows = [[layer, d_c, f"{scores[i, j]:.17g}"]
            for i, layer in enumerate(layers)
            for j, d_c in enumerate(widths)]
    _write_csv(csv_path, header, rows)
    outputs = [str(csv_path)]
    if not args.no_figures:
        fig_path = figures.plot_profile_grid(layers, widths, scores,
                                             out_dir / "profile_grid.png")
        outputs.append(str(fig_path))
    _write_manifest(out_dir, command="profile-layer", args=args,
                    seeds=[args.prompt_seed], inputs=[args.model_dir],
                    outputs=outputs, started=started)
    payload = {
        "layers": layers,
        "d_c": widths,
        "mean_kl": [[float(x) for x in row] for row in scores],
        "csv": str(csv_path),
    }
    lines = ["layer " + "".join(f"  d_c={w:<8d}" for w in widths)]
    lines += [f"{layer:5d} " + "".join(f"  {scores[i, j]:<12.4e}"
                                       for j in range(len(widths)))
              for i, layer in enumerate(layers)]
    _emit(args, payload, lines, (header, rows))
    return 0


# ---------------------------------------------------------------------------
# shallow-vs-deep


def _block_plan(sens, config: ModelConfig, head: int, width: int,
                strategy: str) -> CompressionPlan:
    layers = tuple(
        LayerPlan(layer=l, skip=(l >= head),
                  d_c=(width if l < head else config.kv_dim),
                  kappa_tilde=sens[l].kappa_tilde)
        for l in range(config.num_layers)
    )
    return CompressionPlan(strategy=strategy, d_max=width, d_min=width,
                           threshold=float("inf"), layers=layers)


def cmd_shallow_vs_deep(args) -> int:
    started = time.perf_counter()
    weights = load_model(args.model_dir)
    config = weights.config
    if not 0.0 < args.fraction <= 1.0 or not 0.0 < args.layer_ratio <= 1.0:
        raise ContractViolationError("--fraction and --layer-ratio must be in (0, 1]")
    sens = layer_sensitivities(weights)
    kv_dim = config.kv_dim
    head = max(1, round(config.num_layers * args.fraction))
    width = max(1, round(kv_dim * args.layer_ratio))
    shallow = _block_plan(sens, config, head, width, "shallow-block")
    layer0 = _block_plan(sens, config, 1, width, "layer0-only")
    variants: list[tuple[str, CompressionPlan]] = [("shallow_block", shallow)]
    _, prog_eq = solve_dmin(sens, target_ratio=retained_ratio(shallow, kv_dim),
                            d_max=kv_dim, threshold=float("inf"), kv_dim=kv_dim)
    variants.append(("progressive_equal", prog_eq))
    variants.append(("layer0_only", layer0))
    _, prog_eq0 = solve_dmin(sens, target_ratio=retained_ratio(layer0, kv_dim),
                             d_max=kv_dim, threshold=float("inf"), kv_dim=kv_dim)
    variants.append(("progressive_equal_layer0", prog_eq0))

    prompts = random_prompts(config, seed=args.prompt_seed, count=args.prompts,
                             length=args.prompt_len)
    results = []
    for name, plan in variants:
        compressed = compress_model(weights, plan)
        kls = []
        bytes_seen = 0
        for prompt in prompts:
            _, out = compare_decodes(weights, compressed, prompt, args.steps)
            kls.append(_mean_kl(out))
            bytes_seen = out.cache_bytes
        results.append({
            "variant": name,
            "retained_ratio": retained_ratio(plan, kv_dim),
            "mean_kl": float(np.mean(kls)),
            "cache_bytes": bytes_seen,
        })
    by_name = {r["variant"]: r for r in results}
    payload = {
        "num_layers": config.num_layers,
        "shallow_layers": head,
        "block_width": width,
        "variants": results,
        "shallow_worse": by_name["shallow_block"]["mean_kl"]
        >= by_name["progressive_equal"]["mean_kl"],
    }
    out_dir = _resolve_out(args)
    report_path = out_dir / "shallow_vs_deep.json"
    _write_json(report_path, payload)
    csv_path = out_dir / "shallow_vs_deep.csv"
    header = ["variant", "retained_ratio", "mean_kl", "cache_bytes"]
    rows = [[r["variant"], f"{r['retained_ratio']:.17g}",
             f"{r['mean_kl']:.17g}", r["cache_bytes"]] for r in results]
    _write_csv(csv_path, header, rows)
    outputs = [str(report_path), str(csv_path)]
    if not args.no_figures:
        fig_path = figures.plot_comparison_bars(
            [r["variant"] for r in results],
            [r["mean_kl"] for r in results],
            [r["retained_ratio"] for r in results],
            out_dir / "shallow_vs_deep.png")
        outputs.append(str(fig_path))
    _write_manifest(out_dir, command="shallow-vs-deep", args=args,
                    seeds=[args.prompt_seed], inputs=[args.model_dir],
                    outputs=outputs, started=started)
    lines = [
        f"first {head} of {config.num_layers} layers at width {width} "
        f"vs progressive at equal budget:"
    ]
    lines += [f"  {r['variant']:<26s} rho {r['retained_ratio']:.4f}  "
              f"mean KL {r['mean_kl']:.4e}" for r in results]
    lines.append("shallow block is worse" if payload["shallow_worse"]
                 else "shallow block is NOT worse here")
    _emit(args, payload, lines, (header, rows))
    return 0


# ---------------------------------------------------------------------------
# verify-bounds


def cmd_verify_bounds(args) -> int:
    started = time.perf_counter()
    out_dir = _resolve_out(args)
    if (args.model_dir is None) == (args.chain_widths is None):
        raise ContractViolationError(
            "pass exactly one target: --model-dir with --compressed-dir, "
            "or --chain-widths with --ranks"
        )
    if args.model_dir is not None:
        if args.compressed_dir is None:
            raise ContractViolationError("--model-dir requires --compressed-dir")
        weights = load_model(args.model_dir)
        compressed = load_compressed(args.compressed_dir)
        report = transformer_divergence_report(
            weights, compressed, prompt_seed=args.seed,
            num_prompts=args.prompts, steps=args.steps)
        target = "transformer"
        inputs = [args.model_dir, args.compressed_dir]
    else:
        widths = _parse_int_list(args.chain_widths, "--chain-widths")
        if args.ranks is None:
            raise ContractViolationError("--chain-widths requires --ranks")
        ranks = _parse_int_list(args.ranks, "--ranks")
        net = generate_chain(args.chain_seed, widths, args.activation,
                             decay=args.chain_decay)
        report = verify_chain_bound(net, ranks, args.samples, args.seed)
        target = f"{args.activation} chain"
        inputs = []
    payload = dict(report.to_dict())
    payload["advisory"] = report.advisory
    payload["target"] = target
    payload["samples"] = report.samples
    report_path = out_dir / "bound_report.json"
    _write_json(report_path, payload)
    outputs = [str(report_path)]
    if not args.no_figures:
        fig_path = figures.plot_bound_report(
            report.bound, report.empirical_max, out_dir / "bound_report.png",
            corrected_bound=report.corrected_bound, advisory=report.advisory)
        outputs.append(str(fig_path))
    _write_manifest(out_dir, command="verify-bounds", args=args,
                    seeds=[args.seed], inputs=inputs, outputs=outputs,
                    started=started)
    verdict = "advisory only" if report.advisory else (
        "holds" if report.holds else "VIOLATED")
    _emit(args, payload, [
        f"{target}: bound {report.bound:.6e}, empirical max "
        f"{report.empirical_max:.6e}, slack {report.slack:.3e} ({verdict})",
    ])
    if not report.advisory and not report.holds:
        raise NumericalError(
            "empirical error exceeded the bound",
            residual=report.empirical_max - report.bound)
    return 0


# ---------------------------------------------------------------------------
# memory


def cmd_memory(args) -> int:
    started = time.perf_counter()
    if (args.preset is None) == (args.model_dir is None):
        raise ContractViolationError("pass exactly one of --preset or --model-dir")
    if args.preset is not None:
        config = preset_config(args.preset)
        source = args.preset
    else:
        config = _load_any(args.model_dir).config
        source = args.model_dir
    plan = None
    if args.plan is not None:
        plan = plan_from_dict(json.loads(Path(args.plan).read_text(encoding="utf-8")))
    joint = not args.split_kv
    full_bytes = cache_bytes(config, None, batch=args.batch, seq_len=args.seq_len,
                             bytes_per_element=args.bytes_per_element,
                             count_kv_jointly=joint)
    payload = {
        "source": source,
        "num_layers": config.num_layers,
        "kv_dim": config.kv_dim,
        "batch": args.batch,
        "seq_len": args.seq_len,
        "bytes_per_element": args.bytes_per_element,
        "joint_kv": joint,
        "full_cache_bytes": full_bytes,
    }
    if plan is not None:
        plan_bytes = cache_bytes(config, plan, batch=args.batch,
                                 seq_len=args.seq_len,
                                 bytes_per_element=args.bytes_per_element,
                                 count_kv_jointly=joint)
        payload["plan_cache_bytes"] = plan_bytes
        payload["retained_ratio"] = retained_ratio(plan, config.kv_dim)
    lines = [f"{k:<20s} {payload[k]}" for k in payload]
    outputs: list[str] = []
    if args.out or os.environ.get(OUT_DIR_ENV):
        out_dir = _resolve_out(args)
        json_path = out_dir / "memory.json"
        _write_json(json_path, payload)
        csv_path = out_dir / "memory.csv"
        _write_csv(csv_path, ["key", "value"],
                   [[k, payload[k]] for k in payload])
        outputs = [str(json_path), str(csv_path)]
        if not args.no_figures:
            if plan is not None:
                plan_widths = [lp.d_c for lp in plan.layers]
                skips = [lp.skip for lp in plan.layers]
            else:
                plan_widths = [config.kv_dim] * config.num_layers
                skips = [True] * config.num_layers
            fig_path = figures.plot_cache_widths(config.kv_dim, plan_widths,
                                                 skips, out_dir / "memory.png")
            outputs.append(str(fig_path))
        _write_manifest(out_dir, command="memory", args=args, seeds=[],
                        inputs=[p for p in (args.model_dir, args.plan) if p],
                        outputs=outputs, started=started)
    _emit(args, payload, lines)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common_out(sp, *, with_figures: bool = False) -> None:
    sp.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV})")
    sp.add_argument("--format", choices=("json", "csv", "text"), default="text",
                    help="stdout rendering; files keep their fixed formats")
    if with_figures:
        sp.add_argument("--no-figures", action="store_true",
                        help="skip rendering PNG figures next to the CSV")


def _add_prompt_args(sp, *, steps_default: int) -> None:
    sp.add_argument("--prompt", help="explicit comma-separated token ids")
    sp.add_argument("--prompt-seed", type=int, default=0,
                    help="seed for a random prompt when --prompt is absent")
    sp.add_argument("--prompt-len", type=int, default=8)
    sp.add_argument("--steps", type=int, default=steps_default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvfactor",
        description="Low-rank KV-cache compression toolkit",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a model container")
    g.add_argument("--preset", default="toy-small", choices=sorted(PRESETS))
    for name in ("vocab-size", "num-layers", "num-heads", "num-kv-heads",
                 "head-dim", "model-dim", "mlp-hidden", "max-seq-len"):
        g.add_argument(f"--{name}", type=int, default=None,
                       help=argparse.SUPPRESS)
    g.add_argument("--no-rope", action="store_true")
    g.add_argument("--rope-base", type=float, default=None)
    g.add_argument("--decay", type=float, default=0.9,
                   help="geometric singular-value decay per matrix")
    g.add_argument("--sigma-max", type=float, default=1.0)
    g.add_argument("--per-layer-decay",
                   help="comma-separated decay per layer, overrides --decay "
                        "for attention and MLP weights")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--allow-large", action="store_true",
                   help="permit materializing paper-size presets")
    _add_common_out(g)
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("plan", help="compute a compression plan")
    p.add_argument("model_dir")
    p.add_argument("--strategy", choices=("progressive", "uniform"),
                   default="progressive")
    p.add_argument("--d-min", type=int, default=None)
    p.add_argument("--d-max", type=int, default=None)
    p.add_argument("--d-c", type=int, default=None,
                   help="uniform width (uniform strategy only)")
    p.add_argument("--target-ratio", type=float, default=None)
    p.add_argument("--threshold", type=float, default=float("inf"),
                   help="skip layers whose cumulative condition number "
                        "exceeds this")
    p.add_argument("--align", type=int, default=1)
    _add_common_out(p, with_figures=True)
    p.set_defaults(func=cmd_plan)

    c = sub.add_parser("compress", help="apply a plan to a model container")
    c.add_argument("model_dir")
    c.add_argument("plan")
    _add_common_out(c)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decode-compare",
                       help="decode with both models and report divergence")
    d.add_argument("model_dir")
    d.add_argument("compressed_dir")
    _add_prompt_args(d, steps_default=32)
    _add_common_out(d, with_figures=True)
    d.set_defaults(func=cmd_decode_compare)

    pl = sub.add_parser("profile-layer",
                        help="score single-layer compression over a width grid")
    pl.add_argument("model_dir")
    pl.add_argument("--d-c", required=True,
                    help="comma-separated compressed widths")
    pl.add_argument("--layers", default="all",
                    help="comma-separated layer indices, or 'all'")
    pl.add_argument("--prompt-seed", type=int, default=0)
    pl.add_argument("--prompts", type=int, default=4)
    pl.add_argument("--prompt-len", type=int, default=8)
    pl.add_argument("--steps", type=int, default=16)
    _add_common_out(pl, with_figures=True)
    pl.set_defaults(func=cmd_profile_layer)

    sv = sub.add_parser("shallow-vs-deep",
                        help="compare a shallow compression block against a "
                             "progressive plan of equal budget")
    sv.add_argument("model_dir")
    sv.add_argument("--fraction", type=float, default=0.125,
                    help="fraction of layers in the shallow block")
    sv.add_argument("--layer-ratio", type=float, default=0.5,
                    help="retained width fraction inside the block")
    sv.add_argument("--prompt-seed", type=int, default=0)
    sv.add_argument("--prompts", type=int, default=3)
    sv.add_argument("--prompt-len", type=int, default=8)
    sv.add_argument("--steps", type=int, default=24)
    _add_common_out(sv, with_figures=True)
    sv.set_defaults(func=cmd_shallow_vs_deep)

    vb = sub.add_parser("verify-bounds",
                        help="Monte-Carlo check of truncation error bounds")
    vb.add_argument("--model-dir", default=None)
    vb.add_argument("--compressed-dir", default=None)
    vb.add_argument("--chain-widths", default=None,
                    help="comma-separated widths, input first")
    vb.add_argument("--ranks", default=None,
                    help="comma-separated kept ranks per chain layer")
    vb.add_argument("--activation", choices=("relu", "identity"),
                    default="relu")
    vb.add_argument("--chain-seed", type=int, default=0)
    vb.add_argument("--chain-decay", type=float, default=0.8)
    vb.add_argument("--samples", type=int, default=1000)
    vb.add_argument("--seed", type=int, default=0)
    vb.add_argument("--prompts", type=int, default=2,
                    help="prompts for the transformer target")
    vb.add_argument("--steps", type=int, default=16,
                    help="decode steps for the transformer target")
    _add_common_out(vb, with_figures=True)
    vb.set_defaults(func=cmd_verify_bounds)

    m = sub.add_parser("memory", help="cache size calculator")
    m.add_argument("--preset", default=None, choices=sorted(PRESETS))
    m.add_argument("--model-dir", default=None)
    m.add_argument("--batch", type=int, default=64)
    m.add_argument("--seq-len", type=int, default=2048)
    m.add_argument("--bytes-per-element", type=int, default=2)
    m.add_argument("--plan", default=None,
                   help="plan JSON; adds compressed cache size")
    m.add_argument("--split-kv", action="store_true",
                   help="count keys and values as separate tensors")
    _add_common_out(m, with_figures=True)
    m.set_defaults(func=cmd_memory)

    return parser


def _fail(exc: Exception, code: int) -> int:
    print(_json_line({
        "error": type(exc).__name__,
        "message": str(exc),
        "exit_code": code,
    }), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolationError, UndefinedInputError, InfeasibleTargetError,
            AllocatorError) as exc:
        return _fail(exc, 2)
    except NumericalError as exc:
        return _fail(exc, 3)
    except (ContainerFormatError, OSError) as exc:
        return _fail(exc, 4)
    except KvFactorError as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
