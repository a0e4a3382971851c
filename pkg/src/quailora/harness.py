"""Synthetic experiment driver: instances, pipelines, metrics, artifacts.

Generates weight matrices and calibration activations, runs the
quantize -> calibrate -> initialize pipeline for both initialization
methods, sweeps the rank, computes the gap-closed comparison metric,
and runs a small teacher-matching fine-tuning proxy.  Every run is
deterministic given its spec and seed.
"""

import csv
import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .calibration import CorrAccumulator, accumulate, finalize_guarded
from .errors import DegenerateStatisticsError, NumericError, ShapeError
from .initializer import (
    DEFAULT_ITERS,
    LoraPair,
    baseline_init,
    calibrated_objective,
    quailora_init,
    uncalibrated_objective,
)
from .quantizer import dequantize, quant_error, quantize_blockwise, with_double_quant

__all__ = [
    "SynthSpec",
    "ExperimentRow",
    "ExperimentReport",
    "TinyModel",
    "gen_instance",
    "run_pipeline",
    "rank_sweep",
    "gap_closed",
    "table_gap_report",
    "reference_gap_report",
    "make_tiny_model",
    "finetune_proxy",
    "proxy_experiment",
    "report_to_csv",
    "report_to_json",
    "svg_line_chart",
    "REFERENCE_PERPLEXITY_ROWS",
]

WEIGHT_DISTS = ("gaussian", "heavy_tailed", "low_rank_plus_noise")
ACT_DISTS = ("iid_gaussian", "correlated")
DEFAULT_RANKS = (8, 16, 32, 64, 128)
DEFAULT_LR = 2e-4
_BATCH_COLS = 500
_DIVERGENCE_LIMIT = 1e6


def _rng(seed: int, tag: str) -> np.random.Generator:
    """Independent deterministic stream for one purpose within one seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]))


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic (weights, activations) instance."""

    m: int
    n: int
    weight_dist: str = "gaussian"
    dof: float = 4.0
    low_rank: int = 8
    noise_std: float = 0.0
    act_dist: str = "iid_gaussian"
    rho: float = 0.0
    s: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ShapeError(f"dims must be >= 1, got {self.m}x{self.n}")
        if self.weight_dist not in WEIGHT_DISTS:
            raise ShapeError(f"weight_dist must be one of {WEIGHT_DISTS}")
        if self.act_dist not in ACT_DISTS:
            raise ShapeError(f"act_dist must be one of {ACT_DISTS}")
        if not 0.0 <= self.rho < 1.0:
            raise ShapeError(f"rho must be in [0, 1), got {self.rho}")
        if self.s < 1:
            raise ShapeError(f"s must be >= 1, got {self.s}")
        if self.weight_dist == "heavy_tailed" and self.dof <= 0:
            raise ShapeError(f"dof must be > 0, got {self.dof}")


def gen_instance(spec: SynthSpec):
    """Draw (weights, activation batches) deterministically from a spec.

    Correlated activations are built as L z with L the Cholesky factor
    of the uniform-correlation matrix with off-diagonal ``rho``.
    """
    rng_w = _rng(spec.seed, "weights")
    if spec.weight_dist == "gaussian":
        w = rng_w.standard_normal((spec.m, spec.n))
    elif spec.weight_dist == "heavy_tailed":
        w = rng_w.standard_t(spec.dof, size=(spec.m, spec.n))
    else:
        k = spec.low_rank
        g1 = rng_w.standard_normal((spec.m, k))
        g2 = rng_w.standard_normal((spec.n, k))
        w = g1 @ g2.T / np.sqrt(k)
        if spec.noise_std:
            w = w + spec.noise_std * rng_w.standard_normal((spec.m, spec.n))

    rng_x = _rng(spec.seed, "activations")
    z = rng_x.standard_normal((spec.n, spec.s))
    if spec.act_dist == "correlated" and spec.rho > 0.0:
        corr = (1.0 - spec.rho) * np.eye(spec.n) + spec.rho * np.ones((spec.n, spec.n))
        z = np.linalg.cholesky(corr) @ z
    batches = [z[:, i : i + _BATCH_COLS] for i in range(0, spec.s, _BATCH_COLS)]
    return w, batches


@dataclass(frozen=True)
class ExperimentRow:
    config_id: str
    bits: int
    method: str
    rank: int
    calibrated_error: float
    uncalibrated_error: float
    proxy_loss_curve: "list | None" = None


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)


def run_pipeline(
    spec: SynthSpec,
    bits: int,
    r: int,
    iters: int = DEFAULT_ITERS,
    method: str = "quailora",
    block_size: int = 64,
    double_quant: "bool | None" = None,
) -> ExperimentRow:
    """Quantize, calibrate and initialize one instance; report its errors.

    The reported errors measure ``w - (dequantized q + a b^T)``: the
    calibrated one weighted by the accumulated activation statistic,
    the uncalibrated one in plain Frobenius norm.
    """
    if method not in ("baseline", "quailora"):
        raise ShapeError(f"method must be 'baseline' or 'quailora', got {method!r}")
    w, batches = gen_instance(spec)
    q = quantize_blockwise(w, bits, block_size)
    if double_quant is None:
        double_quant = bits == 4
    if double_quant:
        if bits != 4:
            raise ShapeError("double quantization applies to 4-bit scales only")
        q = with_double_quant(q)

    acc = CorrAccumulator(dim=spec.n)
    for batch in batches:
        accumulate(acc, batch)
    h = finalize_guarded(acc)

    delta = quant_error(w, q)
    if method == "quailora":
        pair, _ = quailora_init(w, q, h, r=r, iters=iters)
    else:
        seed = int(_rng(spec.seed, "baseline").integers(2**31))
        pair = baseline_init(spec.m, spec.n, r, seed=seed)

    config_id = (
        f"{spec.weight_dist}_{spec.m}x{spec.n}_{spec.act_dist}"
        f"_rho{spec.rho:g}_s{spec.s}_seed{spec.seed}"
    )
    return ExperimentRow(
        config_id=config_id,
        bits=bits,
        method=method,
        rank=r,
        calibrated_error=calibrated_objective(delta, pair, h),
        uncalibrated_error=uncalibrated_objective(delta, pair),
        proxy_loss_curve=None,
    )


def rank_sweep(
    spec: SynthSpec,
    bits: int,
    ranks=DEFAULT_RANKS,
    iters: int = DEFAULT_ITERS,
) -> ExperimentReport:
    """One pipeline row per (rank, method) over an ascending rank grid."""
    ranks = list(ranks)
    if ranks != sorted(ranks) or len(set(ranks)) != len(ranks):
        raise ShapeError(f"ranks must be strictly ascending, got {ranks}")
    report = ExperimentReport()
    for r in ranks:
        for method in ("baseline", "quailora"):
            report.rows.append(run_pipeline(spec, bits, r, iters=iters, method=method))
    return report


def marginal_gains_per_rank(ranks, errors) -> list:
    """Error reduction per unit of added rank between consecutive grid points."""
    return [
        (errors[i] - errors[i + 1]) / (ranks[i + 1] - ranks[i])
        for i in range(len(ranks) - 1)
    ]


def gap_closed(
    metric_4bit_base: float,
    metric_4bit_ours: float,
    metric_8bit_base: "float | None",
    lower_is_better: bool = True,
) -> "float | None":
    """Fraction of the 4-bit -> 8-bit quality gap recovered, capped into [0, 1].

    Returns None (not applicable) when no 8-bit metric is available or
    the 8-bit baseline is not strictly better than the 4-bit baseline.
    """
    if metric_8bit_base is None:
        return None
    if lower_is_better:
        num = metric_4bit_base - metric_4bit_ours
        denom = metric_4bit_base - metric_8bit_base
    else:
        num = metric_4bit_ours - metric_4bit_base
        denom = metric_8bit_base - metric_4bit_base
    if denom <= 0.0:
        return None
    return min(1.0, max(0.0, num / denom))


def table_gap_report(rows, lower_is_better: bool = True):
    """Apply the gap metric to (base4, ours4, base8) rows and average it.

    Rows where the metric is not applicable are skipped; they appear as
    None in the per-row list.  Raises if no row is applicable.
    """
    gaps = [gap_closed(b4, o4, b8, lower_is_better) for b4, o4, b8 in rows]
    valid = [g for g in gaps if g is not None]
    if not valid:
        raise DegenerateStatisticsError("no applicable rows in gap report")
    return gaps, sum(valid) / len(valid)


# Bundled reference dataset for the gap-closed metric: per-model validation
# perplexities (4-bit baseline, 4-bit ours, 8-bit baseline; two-decimal
# precision) together with the gap-closed percentage reported for each model.
# Recomputing the metric from the two-decimal inputs reproduces some rows
# exactly and deviates on others, so rows are flagged rather than asserted.
REFERENCE_PERPLEXITY_ROWS = (
    ("LLaMA-7b", 3.51, 3.49, 3.49, 100.0),
    ("LLaMA-13b", 3.33, 3.32, 3.32, 61.0),
    ("LLaMA-30b", 3.30, 3.30, 3.31, None),  # 8-bit baseline underperforms 4-bit
    ("OPT-13b", 3.77, 3.71, None, None),  # no 8-bit baseline available
    ("OPT-30b", 3.66, 3.60, None, None),
    ("BLOOM-560m", 6.84, 6.73, 6.73, 96.0),
    ("BLOOM-3b", 4.82, 4.75, 4.78, 100.0),
    ("Pythia-70m", 10.98, 10.80, 10.72, 69.0),
    ("Pythia-410m", 6.73, 6.67, 6.57, 37.0),
    ("Pythia-12b", 5.14, 5.11, 5.09, 64.0),
)


@dataclass(frozen=True)
class GapRow:
    model: str
    base4: float
    ours4: float
    base8: "float | None"
    computed: "float | None"
    published: "float | None"
    rounding_mismatch: bool


def reference_gap_report():
    """Gap-closed rows for the bundled dataset plus both averages.

    Returns (rows, computed_average, published_average).  The computed
    average re-derives every row from the two-decimal metric values; the
    published average is the mean of the per-model percentages shipped
    with the dataset.  Rows whose recomputation differs from the shipped
    percentage by a full point or more are flagged as rounding
    mismatches.
    """
    rows = []
    for model, base4, ours4, base8, published in REFERENCE_PERPLEXITY_ROWS:
        computed = gap_closed(base4, ours4, base8)
        mismatch = (
            computed is not None
            and published is not None
            and abs(computed * 100.0 - published) >= 1.0
        )
        rows.append(GapRow(model, base4, ours4, base8, computed, published, mismatch))
    computed_vals = [r.computed for r in rows if r.computed is not None]
    published_vals = [r.published / 100.0 for r in rows if r.published is not None]
    return rows, sum(computed_vals) / len(computed_vals), sum(published_vals) / len(published_vals)


@dataclass(frozen=True)
class TinyModel:
    """Two dense layers with a tanh between: out = w2 @ tanh(w1 @ x)."""

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        if self.w1.shape[0] != self.w2.shape[1]:
            raise ShapeError(
                f"layer shapes do not chain: {self.w1.shape} then {self.w2.shape}"
            )
        if max(self.w1.shape + self.w2.shape) > 256:
            raise ShapeError("tiny model dims must stay <= 256")
        if not (np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.w2))):
            raise NumericError("tiny model weights must be finite")

    def hidden(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(self.w1 @ x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.w2 @ self.hidden(x)


def make_tiny_model(n_in: int, n_hidden: int, n_out: int, seed: int) -> TinyModel:
    rng = _rng(seed, "tiny-model")
    w1 = rng.standard_normal((n_hidden, n_in)) / np.sqrt(n_in)
    w2 = rng.standard_normal((n_out, n_hidden)) / np.sqrt(n_hidden)
    return TinyModel(w1=w1, w2=w2)


def finetune_proxy(
    model: TinyModel,
    quantized,
    inits,
    x_eval: np.ndarray,
    steps: int,
    lr: float = DEFAULT_LR,
    eval_every: int = 25,
) -> list:
    """Match the full-precision teacher with frozen quantized layers plus
    trainable low-rank factors, by plain gradient descent.

    ``quantized`` and ``inits`` hold the two frozen quantized layers and
    their low-rank pairs.  Returns the regression loss at step 0, every
    ``eval_every`` steps, and the final step.
    """
    if steps < 0:
        raise ShapeError(f"steps must be >= 0, got {steps}")
    if eval_every < 1:
        raise ShapeError(f"eval_every must be >= 1, got {eval_every}")
    q1, q2 = (dequantize(q) for q in quantized)
    p1, p2 = inits
    a1, b1 = p1.a.copy(), p1.b.copy()
    a2, b2 = p2.a.copy(), p2.b.copy()
    targets = model.forward(x_eval)
    ncols = x_eval.shape[1]

    curve = []
    for step in range(steps + 1):
        w1_hat = q1 + a1 @ b1.T
        w2_hat = q2 + a2 @ b2.T
        hid = np.tanh(w1_hat @ x_eval)
        out = w2_hat @ hid
        err = out - targets
        loss = 0.5 * float(np.sum(err * err)) / ncols
        if not np.isfinite(loss) or loss > _DIVERGENCE_LIMIT:
            raise NumericError(f"proxy fine-tuning diverged at step {step} (loss={loss})")
        if step % eval_every == 0 or step == steps:
            curve.append(loss)
        if step == steps:
            break
        g_out = err / ncols
        g_w2 = g_out @ hid.T
        g_hid = w2_hat.T @ g_out
        g_w1 = (g_hid * (1.0 - hid * hid)) @ x_eval.T
        # simultaneous update of all four factors at the current point
        a1, b1 = a1 - lr * (g_w1 @ b1), b1 - lr * (g_w1.T @ a1)
        a2, b2 = a2 - lr * (g_w2 @ b2), b2 - lr * (g_w2.T @ a2)
    return curve


def proxy_experiment(
    seed: int,
    method: str,
    bits: int = 4,
    n_in: int = 64,
    n_hidden: int = 48,
    n_out: int = 32,
    r: int = 8,
    steps: int = 500,
    lr: float = DEFAULT_LR,
    eval_every: int = 25,
    iters: int = DEFAULT_ITERS,
    calib_cols: int = 2000,
    eval_cols: int = 256,
) -> list:
    """Build a seed-fixed tiny-model instance and run the proxy for one method.

    The teacher, calibration set and evaluation set depend only on the
    seed, so both methods see the identical instance.
    """
    if method not in ("baseline", "quailora"):
        raise ShapeError(f"method must be 'baseline' or 'quailora', got {method!r}")
    model = make_tiny_model(n_in, n_hidden, n_out, seed)
    x_calib = _rng(seed, "proxy-calib").standard_normal((n_in, calib_cols))
    x_eval = _rng(seed, "proxy-eval").standard_normal((n_in, eval_cols))

    quantized = []
    for w in (model.w1, model.w2):
        q = quantize_blockwise(w, bits)
        quantized.append(with_double_quant(q) if bits == 4 else q)

    if method == "quailora":
        inputs = (x_calib, model.hidden(x_calib))
        inits = []
        for w, q, x in zip((model.w1, model.w2), quantized, inputs):
            acc = accumulate(CorrAccumulator(dim=w.shape[1]), x)
            pair, _ = quailora_init(w, q, finalize_guarded(acc), r=r, iters=iters)
            inits.append(pair)
    else:
        inits = [
            baseline_init(w.shape[0], w.shape[1], r, seed=int(_rng(seed, f"proxy-base{i}").integers(2**31)))
            for i, w in enumerate((model.w1, model.w2))
        ]
    return finetune_proxy(model, quantized, inits, x_eval, steps, lr, eval_every)


def report_to_csv(report: ExperimentReport, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["config_id", "bits", "method", "rank", "calibrated_error",
             "uncalibrated_error", "proxy_loss_curve"]
        )
        for row in report.rows:
            curve = ";".join(repr(v) for v in row.proxy_loss_curve) if row.proxy_loss_curve else ""
            writer.writerow(
                [row.config_id, row.bits, row.method, row.rank,
                 repr(row.calibrated_error), repr(row.uncalibrated_error), curve]
            )


def report_to_json(report: ExperimentReport, path):
    with open(path, "w") as f:
        json.dump({"rows": [asdict(row) for row in report.rows]}, f, indent=2, sort_keys=True)
        f.write("\n")


def svg_line_chart(path, series, title="", xlabel="", ylabel="", width=640, height=420):
    """Write a minimal SVG line chart: one polyline per (label, xs, ys) series."""
    margin = 60
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise ShapeError("svg chart needs at least one non-empty series")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def px(x):
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="15" y="{height / 2:.1f}" font-size="12" '
        f'transform="rotate(-90 15 {height / 2:.1f})" text-anchor="middle">{ylabel}</text>',
        f'<text x="{margin}" y="{height - margin + 15}" font-size="10">{x_lo:.6g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 15}" font-size="10" '
        f'text-anchor="end">{x_hi:.6g}</text>',
        f'<text x="{margin - 5}" y="{height - margin}" font-size="10" text-anchor="end">{y_lo:.6g}</text>',
        f'<text x="{margin - 5}" y="{margin}" font-size="10" text-anchor="end">{y_hi:.6g}</text>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        color = palette[i % len(palette)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        lines.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        lines.append(
            f'<text x="{width - margin + 5}" y="{margin + 16 * i}" font-size="11" '
            f'fill="{color}">{label}</text>'
        )
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
