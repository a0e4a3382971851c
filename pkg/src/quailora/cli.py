"""Command-line pipeline over QTNZ containers and the synthetic harness.

Subcommands: quantize, calibrate, init, demo, sweep, report.  Exit codes
are 0 for success, 2 for usage or validation problems, 3 for IO/format
failures and 4 for numeric failures.  Stdout carries data (CSV);
diagnostics go to stderr.

Every option can also come from a JSON config file passed with
``--config``; explicit flags win over config values, which win over the
built-in defaults (the defaults reproduce the standard configuration:
rank 64, 20 alternating rounds, 2000 calibration samples, alpha 16,
learning rate 2e-4).
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import harness
from .calibration import (
    CorrAccumulator,
    CorrelationMatrix,
    accumulate,
    activation_batches,
    activation_layers,
    finalize_guarded,
)
from .container import (
    TensorContainer,
    read_container,
    read_quantized,
    write_container,
    write_quantized,
)
from .errors import (
    DegenerateStatisticsError,
    FormatError,
    NumericError,
    ShapeError,
)
from .initializer import quailora_init
from .quantizer import quant_error, quantize_blockwise, with_double_quant

RESERVED_PREFIXES = ("acts/", "h/", "h_meta/", "lora/")


class _UsageError(Exception):
    """Validation problem that should terminate with exit code 2."""


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as e:
        raise _UsageError(f"invalid config: cannot read {path} ({e})") from e
    except json.JSONDecodeError as e:
        raise _UsageError(f"invalid config: {path} is not valid JSON ({e})") from e
    if not isinstance(obj, dict):
        raise _UsageError("invalid config: top level must be an object")
    return obj


def _resolve(args, key, default=None, convert=None, required=False):
    """Flag value if given, else config value, else default."""
    value = getattr(args, key, None)
    if value is None:
        config = getattr(args, "_config", {})
        if key in config:
            try:
                value = convert(config[key]) if convert else config[key]
            except (TypeError, ValueError) as e:
                raise _UsageError(f"invalid config: field '{key}' ({e})") from e
        else:
            value = default
    if required and value is None:
        raise _UsageError(f"missing required option --{key.replace('_', '-')}")
    return value


def _check_config_keys(args, allowed):
    config = getattr(args, "_config", {})
    for key in config:
        if key not in allowed:
            raise _UsageError(f"invalid config: unknown field '{key}'")


def _weight_names(container):
    names = []
    for name in container.names():
        entry = container.entries[name]
        if entry.dtype not in ("f32", "f64") or len(entry.shape) != 2:
            continue
        if name.startswith(RESERVED_PREFIXES):
            continue
        if name.rsplit("/", 1)[-1].startswith("q_"):
            continue
        names.append(name)
    return names


def _stdout_csv(header, rows):
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)


def _fmt(value):
    return "" if value is None else repr(float(value))


def cmd_quantize(args) -> int:
    _check_config_keys(args, {"input", "output", "bits", "block_size", "double_quant"})
    input_path = _resolve(args, "input", required=True)
    output_path = _resolve(args, "output", required=True)
    bits = _resolve(args, "bits", default=4, convert=int)
    block_size = _resolve(args, "block_size", default=64, convert=int)
    double_quant = _resolve(args, "double_quant", default="on" if bits == 4 else "off")
    if bits not in (4, 8):
        raise _UsageError(f"--bits must be 4 or 8, got {bits}")
    if double_quant not in ("on", "off"):
        raise _UsageError(f"--double-quant must be 'on' or 'off', got {double_quant}")
    if double_quant == "on" and bits == 8:
        raise _UsageError("double quantization applies to 4-bit scales only")

    container = read_container(input_path)
    names = _weight_names(container)
    if not names:
        raise _UsageError(f"no weight tensors found in {input_path}")

    out = TensorContainer()
    summary = []
    for name in names:
        w = container.get_array(name).astype(np.float64)
        q = quantize_blockwise(w, bits, block_size)
        if double_quant == "on":
            q = with_double_quant(q)
        write_quantized(out, name, q)
        summary.append([name, _fmt(np.linalg.norm(quant_error(w, q)))])
    write_container(output_path, out)
    _stdout_csv(["layer", "quant_error_fro"], summary)
    return 0


def cmd_calibrate(args) -> int:
    _check_config_keys(args, {"acts", "output", "samples", "damping"})
    acts_path = _resolve(args, "acts", required=True)
    output_path = _resolve(args, "output", required=True)
    samples = _resolve(args, "samples", default=2000, convert=int)
    damping = _resolve(args, "damping", default=0.01, convert=float)
    if samples < 1:
        raise _UsageError(f"--samples must be >= 1, got {samples}")
    if damping < 0:
        raise _UsageError(f"--damping must be >= 0, got {damping}")

    container = read_container(acts_path)
    layers = activation_layers(container)
    if not layers:
        raise _UsageError(f"no activation batches found in {acts_path}")

    out = TensorContainer()
    summary = []
    for layer in layers:
        batches = activation_batches(container, layer)
        acc = CorrAccumulator(dim=batches[0].shape[0])
        remaining = samples
        for batch in batches:
            if remaining <= 0:
                break
            take = min(batch.shape[1], remaining)
            accumulate(acc, batch[:, :take])
            remaining -= take
        h = finalize_guarded(acc, damping)
        out.set_array(f"h/{layer}", h.h)
        out.set_json(
            f"h_meta/{layer}",
            {"samples": h.samples, "damping_lambda": h.damping_lambda},
        )
        summary.append([layer, h.samples, _fmt(h.damping_lambda)])
    write_container(output_path, out)
    _stdout_csv(["layer", "samples", "damping_lambda"], summary)
    return 0


def cmd_init(args) -> int:
    _check_config_keys(
        args, {"weights", "quantized", "hstats", "output", "report", "rank", "iters", "alpha"}
    )
    weights_path = _resolve(args, "weights", required=True)
    quantized_path = _resolve(args, "quantized", required=True)
    hstats_path = _resolve(args, "hstats", required=True)
    output_path = _resolve(args, "output", required=True)
    report_path = _resolve(args, "report")
    rank = _resolve(args, "rank", default=64, convert=int)
    iters = _resolve(args, "iters", default=20, convert=int)
    alpha = _resolve(args, "alpha", default=16.0, convert=float)
    if rank < 1:
        raise _UsageError(f"--rank must be >= 1, got {rank}")
    if iters < 0:
        raise _UsageError(f"--iters must be >= 0, got {iters}")

    weights = read_container(weights_path)
    quantized = read_container(quantized_path)
    hstats = read_container(hstats_path)
    names = _weight_names(weights)
    if not names:
        raise _UsageError(f"no weight tensors found in {weights_path}")

    for name in names:
        if f"{name}/q_meta" not in quantized:
            raise _UsageError(f"quantized container has no entries for layer '{name}'")
        if f"h/{name}" not in hstats:
            raise _UsageError(f"no activation statistic for layer '{name}'")

    out = TensorContainer()
    trace_rows = []
    for name in names:
        w = weights.get_array(name).astype(np.float64)
        q = read_quantized(quantized, name)
        meta = hstats.get_json(f"h_meta/{name}") if f"h_meta/{name}" in hstats else {}
        h = CorrelationMatrix(
            h=hstats.get_array(f"h/{name}"),
            damping_lambda=float(meta.get("damping_lambda", 0.0)),
            samples=int(meta.get("samples", 0)),
        )
        pair, report = quailora_init(
            w, q, h, r=rank, iters=iters, alpha=alpha, layer_name=name
        )
        out.set_array(f"lora/{name}/A", pair.a)
        out.set_array(f"lora/{name}/B", pair.b)
        out.set_json(f"lora/{name}/meta", {"rank": rank, "alpha": alpha, "iters": iters})
        for i, value in enumerate(report.objective_trace):
            trace_rows.append([name, i, _fmt(value)])
    write_container(output_path, out)
    if report_path:
        with open(report_path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["layer", "iter", "objective"])
            writer.writerows(trace_rows)
    _stdout_csv(["layer", "iter", "objective"], trace_rows)
    return 0


def cmd_report(args) -> int:
    _check_config_keys(args, {"out_dir", "rows_json"})
    out_dir = _resolve(args, "out_dir")
    rows_json = _resolve(args, "rows_json")

    if rows_json:
        with open(rows_json) as f:
            raw = json.load(f)
        triples = [(r["base4"], r["ours4"], r.get("base8")) for r in raw]
        models = [r.get("model", f"row{i}") for i, r in enumerate(raw)]
        gaps, avg = harness.table_gap_report(triples)
        rows = [
            [model, _fmt(b4), _fmt(o4), _fmt(b8), _fmt(g)]
            for model, (b4, o4, b8), g in zip(models, triples, gaps)
        ]
        rows.append(["avg_recomputed", "", "", "", _fmt(avg)])
    else:
        gap_rows, computed_avg, published_avg = harness.reference_gap_report()
        rows = []
        for r in gap_rows:
            rows.append([r.model, _fmt(r.base4), _fmt(r.ours4), _fmt(r.base8), _fmt(r.computed)])
            if r.rounding_mismatch:
                print(
                    f"note: {r.model}: recomputed gap {r.computed:.3f} differs from "
                    f"the shipped {r.published / 100.0:.2f} (two-decimal inputs)",
                    file=sys.stderr,
                )
        rows.append(["avg_recomputed", "", "", "", _fmt(computed_avg)])
        rows.append(["avg_published", "", "", "", _fmt(published_avg)])

    _stdout_csv(["model", "base4", "ours4", "base8", "gap_closed"], rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "gap_report.csv"), "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["model", "base4", "ours4", "base8", "gap_closed"])
            writer.writerows(rows)
    return 0


def cmd_sweep(args) -> int:
    allowed = {
        "seed", "out_dir", "m", "n", "bits", "ranks", "iters", "samples",
        "weight_dist", "act_dist", "rho", "num_seeds",
    }
    _check_config_keys(args, allowed)
    seed = _resolve(args, "seed", convert=int, required=True)
    out_dir = _resolve(args, "out_dir", default=".")
    m = _resolve(args, "m", default=256, convert=int)
    n = _resolve(args, "n", default=256, convert=int)
    bits = _resolve(args, "bits", default=4, convert=int)
    ranks = _resolve(args, "ranks", default="8,16,32,64,128")
    iters = _resolve(args, "iters", default=20, convert=int)
    samples = _resolve(args, "samples", default=2000, convert=int)
    weight_dist = _resolve(args, "weight_dist", default="gaussian")
    act_dist = _resolve(args, "act_dist", default="iid_gaussian")
    rho = _resolve(args, "rho", default=0.0, convert=float)
    num_seeds = _resolve(args, "num_seeds", default=1, convert=int)
    try:
        rank_list = [int(v) for v in str(ranks).split(",") if v.strip()]
    except ValueError as e:
        raise _UsageError(f"--ranks must be a comma-separated int list ({e})") from e
    if num_seeds < 1:
        raise _UsageError(f"--num-seeds must be >= 1, got {num_seeds}")

    report = harness.ExperimentReport()
    for i in range(num_seeds):
        spec = harness.SynthSpec(
            m=m, n=n, weight_dist=weight_dist, act_dist=act_dist,
            rho=rho, s=samples, seed=seed + i,
        )
        report.rows.extend(harness.rank_sweep(spec, bits, rank_list, iters).rows)

    os.makedirs(out_dir, exist_ok=True)
    harness.report_to_csv(report, os.path.join(out_dir, "sweep.csv"))
    harness.report_to_json(report, os.path.join(out_dir, "sweep.json"))
    series = []
    for method in ("baseline", "quailora"):
        ys = []
        for r in rank_list:
            vals = [
                row.calibrated_error
                for row in report.rows
                if row.method == method and row.rank == r
            ]
            ys.append(sum(vals) / len(vals))
        series.append((method, rank_list, ys))
    harness.svg_line_chart(
        os.path.join(out_dir, "sweep.svg"),
        series,
        title="calibrated error vs rank",
        xlabel="rank",
        ylabel="calibrated error",
    )
    rows = [
        [row.config_id, row.bits, row.method, row.rank,
         repr(row.calibrated_error), repr(row.uncalibrated_error)]
        for row in report.rows
    ]
    _stdout_csv(
        ["config_id", "bits", "method", "rank", "calibrated_error", "uncalibrated_error"],
        rows,
    )
    return 0


def cmd_demo(args) -> int:
    allowed = {
        "seed", "out_dir", "bits", "rank", "steps", "lr", "eval_every",
        "n_in", "n_hidden", "n_out",
    }
    _check_config_keys(args, allowed)
    seed = _resolve(args, "seed", convert=int, required=True)
    out_dir = _resolve(args, "out_dir", default=".")
    bits = _resolve(args, "bits", default=4, convert=int)
    rank = _resolve(args, "rank", default=8, convert=int)
    steps = _resolve(args, "steps", default=500, convert=int)
    lr = _resolve(args, "lr", default=harness.DEFAULT_LR, convert=float)
    eval_every = _resolve(args, "eval_every", default=25, convert=int)
    n_in = _resolve(args, "n_in", default=64, convert=int)
    n_hidden = _resolve(args, "n_hidden", default=48, convert=int)
    n_out = _resolve(args, "n_out", default=32, convert=int)

    curves = {}
    for method in ("baseline", "quailora"):
        curves[method] = harness.proxy_experiment(
            seed, method, bits=bits, n_in=n_in, n_hidden=n_hidden, n_out=n_out,
            r=rank, steps=steps, lr=lr, eval_every=eval_every,
        )
    xs = [min(i * eval_every, steps) for i in range(len(curves["baseline"]))]

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "proxy_curves.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "step", "loss"])
        for method in ("baseline", "quailora"):
            for x, y in zip(xs, curves[method]):
                writer.writerow([method, x, repr(y)])
    harness.svg_line_chart(
        os.path.join(out_dir, "proxy_curves.svg"),
        [(m, xs, curves[m]) for m in ("baseline", "quailora")],
        title="proxy fine-tuning loss",
        xlabel="step",
        ylabel="loss",
    )
    with open(os.path.join(out_dir, "demo.json"), "w") as f:
        json.dump(
            {"seed": seed, "bits": bits, "rank": rank, "steps": steps, "lr": lr,
             "eval_every": eval_every, "curves": curves},
            f, indent=2, sort_keys=True,
        )
        f.write("\n")

    rows = []
    for method in ("baseline", "quailora"):
        rows.extend([method, x, repr(y)] for x, y in zip(xs, curves[method]))
    _stdout_csv(["method", "step", "loss"], rows)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quailora",
        description="quantization-aware low-rank initialization pipeline",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("quantize", help="blockwise-quantize every weight tensor")
    p.add_argument("--config")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--bits", type=int, choices=(4, 8))
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--double-quant", dest="double_quant", choices=("on", "off"))
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("calibrate", help="accumulate activation statistics per layer")
    p.add_argument("--config")
    p.add_argument("--acts")
    p.add_argument("--output")
    p.add_argument("--samples", type=int)
    p.add_argument("--damping", type=float)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("init", help="compute low-rank initializations per layer")
    p.add_argument("--config")
    p.add_argument("--weights")
    p.add_argument("--quantized")
    p.add_argument("--hstats")
    p.add_argument("--output")
    p.add_argument("--report")
    p.add_argument("--rank", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("report", help="gap-closed report over metric triples")
    p.add_argument("--config")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--rows-json", dest="rows_json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="rank sweep on synthetic instances")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--bits", type=int, choices=(4, 8))
    p.add_argument("--ranks")
    p.add_argument("--iters", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--weight-dist", dest="weight_dist", choices=harness.WEIGHT_DISTS)
    p.add_argument("--act-dist", dest="act_dist", choices=harness.ACT_DISTS)
    p.add_argument("--rho", type=float)
    p.add_argument("--num-seeds", dest="num_seeds", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("demo", help="fine-tuning proxy on a tiny synthetic model")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--bits", type=int, choices=(4, 8))
    p.add_argument("--rank", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--n-in", dest="n_in", type=int)
    p.add_argument("--n-hidden", dest="n_hidden", type=int)
    p.add_argument("--n-out", dest="n_out", type=int)
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return 2
    try:
        args._config = _load_config(getattr(args, "config", None))
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ShapeError, DegenerateStatisticsError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
