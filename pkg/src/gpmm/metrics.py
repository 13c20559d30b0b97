"""Model quality metrics: generalization, specificity, compactness.

All three are computed per channel (shape in millimeters, albedo in linear
RGB units) against a dataset of meshes in model topology. Distances between
corresponding vertices are averaged per mesh (per-vertex mean Euclidean
distance). Reconstructions stay linear: albedo is not clamped here, so the
metric laws (monotonicity, exact endpoints) hold exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .lowrank import MorphableModel
from .rng import substream

CHANNELS = ("shape", "albedo")


@dataclass
class MetricCurve:
    metric: str
    channel: str
    counts: list
    values: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.counts) != len(self.values):
            raise DataError("metric curve counts and values must pair up")


def _channel_arrays(meshes, channel):
    if channel not in CHANNELS:
        raise DataError(f"unknown channel {channel!r}; expected one of {CHANNELS}")
    attr = "vertices" if channel == "shape" else "albedo"
    return np.stack([getattr(m, attr).reshape(-1) for m in meshes])


def _model_parts(model: MorphableModel, channel):
    if channel == "shape":
        return model.mean.vertices.reshape(-1), model.shape
    return model.mean.albedo.reshape(-1), model.albedo


def _validate_dataset(model, dataset):
    if not dataset:
        raise DataError("metrics need a non-empty dataset")
    for i, m in enumerate(dataset):
        if m.n_vertices != model.mean.n_vertices:
            raise DataError(
                f"dataset mesh {i} has {m.n_vertices} vertices, model domain "
                f"has {model.mean.n_vertices}"
            )


def _validate_counts(counts, rank):
    counts = [int(c) for c in counts]
    if not counts:
        raise DataError("metrics need at least one component count")
    for c in counts:
        if not 0 <= c <= rank:
            raise DataError(f"component count {c} outside [0, {rank}]")
    return counts


def _vertex_mean_distance(flat_a, flat_b):
    d = (flat_a - flat_b).reshape(flat_a.shape[0], -1, 3) if flat_a.ndim == 2 \
        else (flat_a - flat_b).reshape(1, -1, 3)
    return np.linalg.norm(d, axis=2).mean(axis=1)


def generalization(model: MorphableModel, dataset, counts, channel="shape") -> MetricCurve:
    """Mean reconstruction error of the dataset at each component count.

    Nonincreasing in the count: each added component only refines the
    least-squares reconstruction.
    """
    _validate_dataset(model, dataset)
    mean_flat, basis = _model_parts(model, channel)
    counts = _validate_counts(counts, basis.rank)
    data = _channel_arrays(dataset, channel)
    deltas = data - mean_flat
    coeffs = deltas @ basis.components  # (N, r), orthonormal basis
    values = []
    for k in counts:
        recon = coeffs[:, :k] @ basis.components[:, :k].T
        err = _vertex_mean_distance(deltas - recon, 0.0 * mean_flat)
        values.append(float(err.mean()))
    return MetricCurve("generalization", channel, counts, values,
                       {"dataset_size": len(dataset)})


def specificity(model: MorphableModel, dataset, counts, samples: int = 1000,
                seed: int = 0, channel="shape") -> MetricCurve:
    """Mean distance from truncated model samples to their nearest dataset mesh.

    Coefficients are drawn once at full rank and truncated per count, so the
    curve varies only through the truncation.
    """
    _validate_dataset(model, dataset)
    if samples < 1:
        raise DataError("specificity needs at least one sample")
    mean_flat, basis = _model_parts(model, channel)
    counts = _validate_counts(counts, basis.rank)
    data = _channel_arrays(dataset, channel)
    rng = substream(seed, f"specificity.{channel}")
    codes = rng.standard_normal((samples, basis.rank))
    scaled = basis.components * np.sqrt(basis.eigenvalues)  # (3n, r)
    values = []
    for k in counts:
        recon = mean_flat + codes[:, :k] @ scaled[:, :k].T  # (S, 3n)
        best = np.full(samples, np.inf)
        for d in data:
            best = np.minimum(best, _vertex_mean_distance(recon, d))
        values.append(float(best.mean()))
    return MetricCurve("specificity", channel, counts, values,
                       {"samples": samples, "seed": int(seed),
                        "dataset_size": len(dataset)})


def compactness(model: MorphableModel, counts, channel="shape") -> MetricCurve:
    """Cumulative eigenvalue fraction at each component count."""
    _, basis = _model_parts(model, channel)
    counts = _validate_counts(counts, basis.rank)
    csum = np.cumsum(basis.eigenvalues)
    total = csum[-1] if basis.rank else 1.0
    values = [float(csum[k - 1] / total) if k else 0.0 for k in counts]
    return MetricCurve("compactness", channel, counts, values, {})


def curve_to_csv(curve: MetricCurve) -> str:
    lines = ["component_count,value"]
    for c, v in zip(curve.counts, curve.values):
        lines.append(f"{c},{v!r}")
    return "\n".join(lines) + "\n"


def curves_to_svg(curves, title: str = "model metrics") -> str:
    """Small standalone SVG line plot of one or more metric curves."""
    if not curves:
        raise DataError("nothing to plot")
    width, height, pad = 640, 400, 54
    xs = sorted({c for curve in curves for c in curve.counts})
    ymax = max(max(curve.values) for curve in curves) or 1.0
    xmax = max(xs) or 1

    def px(x):
        return pad + (width - 2 * pad) * (x / xmax)

    def py(y):
        return height - pad - (height - 2 * pad) * (y / (ymax * 1.05))

    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">components</text>',
    ]
    for tick in (0.0, 0.5 * ymax, ymax):
        parts.append(
            f'<text x="{pad - 6}" y="{py(tick) + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="10">{tick:.4g}</text>'
        )
    for i, curve in enumerate(curves):
        color = palette[i % len(palette)]
        pts = " ".join(f"{px(c):.2f},{py(v):.2f}"
                       for c, v in zip(curve.counts, curve.values))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11" fill="{color}">'
            f"{curve.metric}/{curve.channel}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
