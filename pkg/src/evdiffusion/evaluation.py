"""Quality metrics and curve analyses for generated charging scenarios.

Time-dependent parameters (moving-average windows, duration bins) are given
in minutes and converted with ``step_minutes``, the sampling period of the
curves being analysed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .clustering import assign_to_centroids, kmeans

LN2 = math.log(2.0)


# -- marginal score -------------------------------------------------------------

def marginal_score(real, gen, bins: int = 50) -> float:
    """Total variation distance between pooled value histograms.

    Both sets are pooled over all samples and time steps and binned on
    their shared min..max range; returns ``0.5 * sum |p - q|`` in [0, 1].
    """
    a = np.asarray(real, dtype=np.float64).ravel()
    b = np.asarray(gen, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("marginal score needs non-empty inputs")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if not hi > lo:
        raise ValueError("degenerate pooled range")
    p, _ = np.histogram(a, bins, (lo, hi))
    q, _ = np.histogram(b, bins, (lo, hi))
    return histogram_tv(p, q)


def histogram_tv(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(0.5 * np.abs(p / p.sum() - q / q.sum()).sum())


# -- discriminative score -----------------------------------------------------------

class _RecurrentClassifier(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.rnn = nn.LSTM(1, hidden, num_layers=2, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x):
        out, _ = self.rnn(x.unsqueeze(-1))
        return self.head(out[:, -1]).squeeze(-1)


def discriminative_score(
    real,
    gen,
    repeats: int = 5,
    seed: int = 0,
    hidden: int = 32,
    epochs: int = 30,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
) -> tuple[float, float]:
    """Held-out binary cross-entropy of a post-hoc real-vs-generated classifier.

    Each repeat shuffles the labelled pool, trains a two-layer LSTM with a
    linear head on 80 % and scores the remaining 20 %. Returns the mean and
    standard deviation over repeats. ``ln 2`` means the two sets could not
    be told apart; values near zero mean they were trivially separable.
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    if len(real) < 20 or len(gen) < 20:
        raise ValueError("discriminative score needs at least 20 samples per side")
    if real.shape[1] != gen.shape[1]:
        raise ValueError("real and generated sequences differ in length")
    pooled = np.concatenate([real, gen])
    lo, hi = pooled.min(), pooled.max()
    x_all = (pooled - lo) / (hi - lo) if hi > lo else np.zeros_like(pooled)
    y_all = np.concatenate([np.ones(len(real)), np.zeros(len(gen))])
    x_all = torch.tensor(x_all, dtype=torch.float32)
    y_all = torch.tensor(y_all, dtype=torch.float32)

    scores = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        torch.manual_seed(int(rng.integers(2**31)))
        order = rng.permutation(len(x_all))
        n_test = max(1, int(round(0.2 * len(order))))
        test, train_idx = order[:n_test], order[n_test:]

        clf = _RecurrentClassifier(hidden)
        opt = torch.optim.Adam(clf.parameters(), lr=learning_rate)
        loss_fn = nn.BCEWithLogitsLoss()
        clf.train()
        for _ in range(epochs):
            perm = rng.permutation(train_idx)
            for s in range(0, len(perm), batch_size):
                idx = torch.as_tensor(perm[s:s + batch_size])
                loss = loss_fn(clf(x_all[idx]), y_all[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        clf.eval()
        with torch.no_grad():
            idx = torch.as_tensor(test)
            scores.append(float(loss_fn(clf(x_all[idx]), y_all[idx])))
    return float(np.mean(scores)), float(np.std(scores))


# -- curve segmentation and durations ------------------------------------------------

@dataclass
class CurveSegmentation:
    bulk: tuple[int, int]
    absorption: tuple[int, int]
    plateau_level: float
    bulk_only: bool = False


def moving_average(x, window: int) -> np.ndarray:
    """Centred moving average with edge-shrunk windows (no zero padding bias)."""
    x = np.asarray(x, dtype=np.float64)
    window = max(1, int(window))
    if window == 1:
        return x.copy()
    kernel = np.ones(window)
    num = np.convolve(x, kernel, mode="same")
    den = np.convolve(np.ones_like(x), kernel, mode="same")
    return num / den


def segment_curve(
    curve,
    valid_len: int | None = None,
    theta: float = 0.9,
    window_minutes: float = 5.0,
    step_minutes: float = 1.0,
    plateau_tol: float = 0.02,
) -> CurveSegmentation:
    """Split a charging curve into bulk and absorption stages.

    The plateau level is first estimated as the 90th percentile of the
    smoothed curve. The decline point is the earliest index from which the
    smoothed curve stays strictly below ``theta * level`` up to
    ``valid_len``. The level is then re-estimated as the median before that
    point and the boundary is moved back to just after the last index still
    within ``plateau_tol`` of the level, i.e. the end of the last sustained
    plateau. Curves that never decline are returned ``bulk_only``.
    """
    curve = np.asarray(curve, dtype=np.float64)
    n = len(curve) if valid_len is None else int(valid_len)
    if n < 10:
        raise ValueError(f"curve too short to segment (valid length {n} < 10)")
    seg = curve[:n]
    ma = moving_average(seg, round(window_minutes / step_minutes))
    level = float(np.quantile(ma, 0.9))
    if level <= 0:
        return CurveSegmentation((0, n), (n, n), level, bulk_only=True)

    above = ma >= theta * level
    if above[-1]:
        return CurveSegmentation((0, n), (n, n), level, bulk_only=True)
    cross = int(np.flatnonzero(above)[-1]) + 1 if above.any() else 0
    if cross == 0:
        return CurveSegmentation((0, n), (n, n), level, bulk_only=True)

    level = float(np.median(ma[:cross]))
    near = np.flatnonzero(ma[:cross] >= (1.0 - plateau_tol) * level)
    start = int(near[-1]) + 1 if len(near) else cross
    start = min(start, cross)
    return CurveSegmentation((0, start), (start, n), level)


def recover_valid_length(
    curves,
    step_minutes: float = 1.0,
    window_minutes: float = 15.0,
    threshold_frac: float = 0.02,
    reference_max: float | None = None,
) -> np.ndarray:
    """Valid duration (in steps) of zero-padded or generated curves.

    A curve's duration is the prefix ending at the last index where its
    moving average exceeds ``threshold_frac`` of the corpus maximum rate.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    peak = float(curves.max()) if reference_max is None else float(reference_max)
    thr = threshold_frac * peak
    window = round(window_minutes / step_minutes)
    out = np.zeros(len(curves), dtype=np.int64)
    for i, c in enumerate(curves):
        idx = np.flatnonzero(moving_average(c, window) > thr)
        out[i] = idx[-1] + 1 if len(idx) else 0
    return out


def duration_pdf(
    valid_lens,
    step_minutes: float = 1.0,
    bin_minutes: float = 30.0,
    max_hours: float = 12.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Probability mass of valid durations in ``bin_minutes`` bins over (0, max_hours].

    Returns ``(edges_hours, mass)``; ``mass`` sums to one.
    """
    minutes = np.asarray(valid_lens, dtype=np.float64) * step_minutes
    if minutes.size == 0:
        raise ValueError("empty corpus")
    n_bins = int(round(max_hours * 60.0 / bin_minutes))
    edges = np.linspace(0.0, max_hours * 60.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(minutes, 0.0, max_hours * 60.0), edges)
    return edges / 60.0, counts / counts.sum()


# -- tail score --------------------------------------------------------------------

@dataclass
class TailFeatures:
    features: np.ndarray
    index: np.ndarray  # source row of each feature


def tail_features(
    curves,
    valid_lens,
    n_points: int = 64,
    normalize: bool = True,
    step_minutes: float = 1.0,
) -> TailFeatures:
    """Absorption segments resampled to ``n_points`` (optionally / plateau level).

    Curves that are too short or have no decline are skipped.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    feats, rows = [], []
    for i, (c, n) in enumerate(zip(curves, valid_lens)):
        if n < 10:
            continue
        seg = segment_curve(c, int(n), step_minutes=step_minutes)
        a, b = seg.absorption
        if seg.bulk_only or b - a < 2 or seg.plateau_level <= 0:
            continue
        tail = c[a:b]
        grid = np.linspace(0.0, len(tail) - 1.0, n_points)
        f = np.interp(grid, np.arange(len(tail)), tail)
        feats.append(f / seg.plateau_level if normalize else f)
        rows.append(i)
    feats = np.array(feats).reshape(-1, n_points)
    return TailFeatures(feats, np.array(rows, dtype=np.int64))


def cdf_l1_distance(a, b, grid_points: int = 100) -> float:
    """Mean absolute gap between two empirical CDFs on a shared grid."""
    a = np.sort(np.ravel(a))
    b = np.sort(np.ravel(b))
    lo = min(a[0], b[0])
    hi = max(a[-1], b[-1])
    grid = np.linspace(lo, hi, grid_points)
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(fa - fb).mean())


@dataclass
class TailScore:
    mean: float
    std: float
    per_cluster: list[float]
    flagged: list[int] = field(default_factory=list)
    medoids: np.ndarray | None = None


def tail_score(
    real_curves,
    gen_curves,
    k: int = 7,
    seed: int = 0,
    real_valid=None,
    gen_valid=None,
    step_minutes: float = 1.0,
    normalize: bool = True,
    gen_scale: float = 1.0,
) -> TailScore:
    """Cluster-averaged CDF distance between real and generated absorption tails.

    Real tail features are clustered with K-means; every generated feature
    joins its nearest real centroid. Per cluster, the pooled feature values
    of both sides are compared through their empirical CDFs. A cluster with
    no generated member scores 1 and is flagged. Valid lengths default to
    :func:`recover_valid_length`; ``gen_scale`` multiplies generated
    features after extraction (a hook for shift-detection tests).
    """
    real_curves = np.atleast_2d(np.asarray(real_curves, dtype=np.float64))
    gen_curves = np.atleast_2d(np.asarray(gen_curves, dtype=np.float64))
    if real_valid is None:
        real_valid = recover_valid_length(real_curves, step_minutes)
    if gen_valid is None:
        gen_valid = recover_valid_length(gen_curves, step_minutes)
    fr = tail_features(real_curves, real_valid, normalize=normalize, step_minutes=step_minutes)
    fg = tail_features(gen_curves, gen_valid, normalize=normalize, step_minutes=step_minutes)
    if len(fr.features) < k or len(fg.features) < 1:
        raise ValueError("not enough curves with an absorption stage for tail scoring")
    gen_feats = fg.features * gen_scale

    km = kmeans(fr.features, k, np.random.default_rng(seed))
    gen_assign = assign_to_centroids(gen_feats, km.centroids)
    dists, flagged = [], []
    for j in range(k):
        r = fr.features[km.assignments == j]
        g = gen_feats[gen_assign == j]
        if len(r) == 0:
            continue
        if len(g) == 0:
            dists.append(1.0)
            flagged.append(j)
            continue
        dists.append(cdf_l1_distance(r, g))
    return TailScore(float(np.mean(dists)), float(np.std(dists)), dists, flagged, fr.index[km.medoids])


# -- temporal and bulk-stage analyses ------------------------------------------------

def autocorrelation(curve, max_lag: int = 48, valid_len: int | None = None) -> np.ndarray:
    """Sample autocorrelation of the unpadded segment; index ``k`` is lag ``k``."""
    x = np.asarray(curve, dtype=np.float64)
    if valid_len is not None:
        x = x[:int(valid_len)]
    if len(x) <= max_lag:
        raise ValueError(f"curve of length {len(x)} too short for max_lag={max_lag}")
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0:
        raise ValueError("constant segment has no autocorrelation")
    return np.array([float(x[: len(x) - k] @ x[k:]) / denom for k in range(max_lag + 1)])


def silverman_bandwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    iqr = np.subtract(*np.quantile(v, [0.75, 0.25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * v.size ** (-0.2)


@dataclass
class BulkDensity:
    edges: np.ndarray
    hist: np.ndarray  # density, integrates to 1 over edges
    grid: np.ndarray
    kde: np.ndarray
    bandwidth: float

    def modes(self, min_rel_height: float = 0.05) -> np.ndarray:
        """Grid positions of local maxima above ``min_rel_height`` of the peak."""
        d = self.kde
        inner = (d[1:-1] > d[:-2]) & (d[1:-1] >= d[2:]) & (d[1:-1] >= min_rel_height * d.max())
        return self.grid[1:-1][inner]


def bulk_rate_density(
    curves,
    valid_lens=None,
    bins: int = 50,
    step_minutes: float = 1.0,
    grid_points: int = 1024,
    max_values: int = 20000,
    seed: int = 0,
) -> BulkDensity:
    """Histogram and Gaussian KDE (Silverman bandwidth) of bulk-stage rates."""
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    if valid_lens is None:
        valid_lens = recover_valid_length(curves, step_minutes)
    pooled = []
    for c, n in zip(curves, valid_lens):
        if n < 10:
            continue
        a, b = segment_curve(c, int(n), step_minutes=step_minutes).bulk
        pooled.append(c[a:b])
    values = np.concatenate(pooled) if pooled else np.zeros(0)
    if values.size == 0:
        raise ValueError("no bulk-stage values")

    lo, hi = values.min(), values.max()
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    hist, edges = np.histogram(values, bins, (lo, hi), density=True)
    bw = silverman_bandwidth(values)
    if not bw > 0:
        bw = (hi - lo) / bins
    sub = values
    if values.size > max_values:
        sub = np.random.default_rng(seed).choice(values, max_values, replace=False)
    grid = np.linspace(lo - 5 * bw, hi + 5 * bw, grid_points)
    kde = np.zeros_like(grid)
    for chunk in np.array_split(sub, max(1, sub.size // 2000)):
        kde += np.exp(-0.5 * ((grid[:, None] - chunk[None, :]) / bw) ** 2).sum(1)
    kde /= sub.size * bw * math.sqrt(2 * math.pi)
    return BulkDensity(edges, hist, grid, kde, bw)


# -- export and reporting ----------------------------------------------------------------

def export_projection_input(real, gen, path) -> None:
    """Labelled matrix for an external 2-D embedding tool (``source`` column first)."""
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    if real.size == 0 or gen.size == 0:
        raise ValueError("projection export needs both sources")
    L = real.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + [f"t{i:04d}" for i in range(1, L + 1)])
        for name, block in (("real", real), ("gen", gen)):
            for row in block:
                w.writerow([name] + [repr(float(v)) for v in row])


def read_projection_input(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([r[0] for r in rows]), np.array([[float(v) for v in r[1:]] for r in rows])


@dataclass
class MetricReport:
    marginal_score: float
    discriminative_mean: float
    discriminative_std: float
    tail_mean: float | None = None
    tail_std: float | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    def items(self) -> list[tuple[str, object]]:
        out = [
            ("marginal_score", self.marginal_score),
            ("discriminative_score_mean", self.discriminative_mean),
            ("discriminative_score_std", self.discriminative_std),
            ("discriminative_score_ideal", LN2),
        ]
        if self.tail_mean is not None:
            out += [("tail_score_mean", self.tail_mean), ("tail_score_std", self.tail_std)]
        out += sorted(self.extra.items())
        out += [(f"artifact.{k}", v) for k, v in sorted(self.artifacts.items())]
        return out

    def write(self, path) -> None:
        lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in self.items()]
        Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_table(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
