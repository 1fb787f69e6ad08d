"""Quantitative evaluation: SSIM, PSNR, paired Wilcoxon signed-rank tests,
histogram matching, and contrast-code cluster separation.

All functions are pure; the evaluation sweep over a dataset is deterministic
given its seed.
"""

import math
from dataclasses import dataclass

import numpy as np

from .harmonize import harmonize, site_theta


@dataclass
class MetricRecord:
    subject_id: str
    slice_index: int
    direction: str
    method: str
    ssim: float
    psnr: float


@dataclass
class TestResult:
    """Wilcoxon signed-rank outcome: W = min(W+, W-), sample size after
    zero removal, and both the one-sided (greater) and two-sided p-values."""

    statistic: float
    n: int
    p_greater: float
    p_two_sided: float
    pair: str = ""


def ssim(x, y, window=8, stride=4, dynamic_range=1.5):
    """Mean local structural similarity over sliding windows.

    Standard luminance/contrast/structure form with uniform windows,
    c1 = (0.01 L)^2 and c2 = (0.03 L)^2 where L is the dynamic range.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if dynamic_range <= 0:
        raise ValueError("ssim: dynamic range must be > 0")
    if min(x.shape) < window:
        raise ValueError(f"ssim: window {window} larger than image {x.shape}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    wx = np.lib.stride_tricks.sliding_window_view(x, (window, window))[::stride, ::stride]
    wy = np.lib.stride_tricks.sliding_window_view(y, (window, window))[::stride, ::stride]
    mx = wx.mean(axis=(-1, -2))
    my = wy.mean(axis=(-1, -2))
    vx = (wx * wx).mean(axis=(-1, -2)) - mx * mx
    vy = (wy * wy).mean(axis=(-1, -2)) - my * my
    cxy = (wx * wy).mean(axis=(-1, -2)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / \
        ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def psnr(x, y, peak=1.5):
    """10 log10(peak^2 / MSE) in dB, capped at the 99 dB identity sentinel."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be > 0")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(peak * peak / mse))


def _rank_abs(values):
    """Average ranks of |values| (1-based, ties averaged)."""
    a = np.abs(values)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_wplus_counts(double_ranks):
    """Distribution of 2*W+ over all sign assignments, by subset-sum DP."""
    total = int(double_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in double_ranks:
        r = int(r)
        nxt = counts.copy()
        nxt[r:] += counts[:total + 1 - r]
        counts = nxt
    return counts


def _norm_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(differences, alternative="greater", exact_limit=12):
    """Paired Wilcoxon signed-rank test.

    Zero differences are dropped, ties get average ranks. For n <= 12 the
    null distribution of W+ is enumerated exactly (conditional on the
    observed tie pattern); beyond that a normal approximation with
    continuity and tie corrections is used. The reported statistic is
    W = min(W+, W-).

    Parameters
    ----------
    differences : array_like
        Paired differences (method A - method B per item).
    alternative : {"greater", "two-sided"}
        "greater" tests a positive median shift.
    """
    if alternative not in ("greater", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n < 5:
        raise ValueError(f"wilcoxon: need >= 5 nonzero differences, got {n}")
    ranks = _rank_abs(d)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= exact_limit:
        dr = np.rint(2.0 * ranks).astype(np.int64)
        counts = _exact_wplus_counts(dr)
        total = int(dr.sum())
        denom = 2.0 ** n
        w2p = int(round(2.0 * w_plus))
        p_greater = counts[w2p:].sum() / denom
        m = int(round(2.0 * w))
        p_two = counts[:m + 1].sum() + counts[total - m:].sum()
        if total - m == m:
            p_two -= counts[m]
        p_two /= denom
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var -= (tie_counts ** 3 - tie_counts).sum() / 48.0
        sd = math.sqrt(var)
        p_greater = _norm_sf((w_plus - mu - 0.5) / sd)
        p_two = min(1.0, 2.0 * (1.0 - _norm_sf((w - mu + 0.5) / sd)))
    return TestResult(statistic=w, n=n,
                      p_greater=min(max(p_greater, 0.0), 1.0),
                      p_two_sided=min(max(p_two, 0.0), 1.0))


def histogram_match(source, reference, bins=256):
    """Monotone intensity remap so the source's empirical CDF matches the
    reference's.

    Source quantiles are exact (per unique value); the reference quantile
    function is summarized at ``bins`` + 1 anchors, which bounds the
    quantization error at one (local) bin width. Matching is idempotent:
    the output's quantiles equal the source's, so re-matching reproduces
    the same image.
    """
    src = np.asarray(source, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if src.min() == src.max():
        raise ValueError("histogram_match: constant source image")
    s_vals, s_inv, s_counts = np.unique(src.ravel(), return_inverse=True,
                                        return_counts=True)
    csum = np.cumsum(s_counts)
    s_quantiles = (csum - 0.5 * s_counts) / src.size  # midpoint convention
    anchor_q = np.linspace(0.0, 1.0, bins + 1)
    anchor_v = np.quantile(ref.ravel(), anchor_q)
    matched_vals = np.interp(s_quantiles, anchor_q, anchor_v)
    return matched_vals[s_inv].reshape(src.shape)


def silhouette(points_by_label):
    """Mean silhouette score of labeled 2-d (or k-d) points, Euclidean.

    Points with a zero max(a, b) contribute 0. Needs >= 2 groups with
    >= 2 points each.
    """
    labels = sorted(points_by_label)
    if len(labels) < 2:
        raise ValueError("silhouette: need at least two groups")
    arrays = []
    owners = []
    for li, lab in enumerate(labels):
        pts = np.atleast_2d(np.asarray(points_by_label[lab], dtype=np.float64))
        if pts.shape[0] < 2:
            raise ValueError(f"silhouette: group {lab!r} has < 2 points")
        arrays.append(pts)
        owners += [li] * pts.shape[0]
    allpts = np.concatenate(arrays, axis=0)
    owners = np.asarray(owners)
    diff = allpts[:, None, :] - allpts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    scores = []
    for i in range(len(allpts)):
        own = owners == owners[i]
        own[i] = False
        a = dist[i][own].mean()
        b = min(dist[i][owners == lj].mean()
                for lj in range(len(labels)) if lj != owners[i])
        denom = max(a, b)
        scores.append(0.0 if denom == 0.0 else (b - a) / denom)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# harmonization evaluation sweep

METHODS = ("none", "histmatch", "harmonized")


def _travel_pairs(dataset, src, dst, contrast_id):
    by_key = {}
    for rec in dataset.test:
        if rec.traveling and rec.contrast_id == contrast_id:
            by_key[(rec.site_id, rec.subject_id, rec.slice_index)] = rec
    pairs = []
    for (site, subj, k), rec in sorted(by_key.items()):
        if site != src:
            continue
        partner = by_key.get((dst, subj, k))
        if partner is not None:
            pairs.append((rec, partner))
    return pairs


def evaluate_harmonization(model, dataset, directions, contrast_id=1,
                           seed=0, dynamic_range=1.5, peak=1.5):
    """Score each direction and method against the true target-site renders.

    For every traveling slice of each direction src->dst, compares the raw
    source image, the histogram-matched image (reference: seeded random
    target-site training subject, same slice index), and the model's
    harmonized image against the true render at the destination. Emits one
    MetricRecord per (slice, method) and paired Wilcoxon results comparing
    the harmonized method against each baseline.
    """
    rng = np.random.default_rng(seed)
    records = []
    tests = []
    for src, dst in directions:
        pairs = _travel_pairs(dataset, src, dst, contrast_id)
        if not pairs:
            raise ValueError(
                f"no traveling subjects between {src} and {dst} "
                f"(contrast {contrast_id})")
        dst_test = dataset.records(split="test", site_id=dst,
                                   contrast_id=contrast_id)
        profile = site_theta(model, dst_test, site_id=dst,
                             contrast_id=contrast_id)
        ref_pool = {}
        for rec in dataset.records(split="train", site_id=dst,
                                   contrast_id=contrast_id):
            ref_pool.setdefault(rec.slice_index, []).append(rec)
        direction = f"{src}->{dst}"
        values = {m: {"ssim": [], "psnr": []} for m in METHODS}
        for src_rec, dst_rec in pairs:
            truth = dst_rec.pixels
            outputs = {"none": src_rec.pixels}
            pool = ref_pool.get(src_rec.slice_index)
            if pool:
                ref = pool[rng.integers(0, len(pool))]
                outputs["histmatch"] = histogram_match(src_rec.pixels, ref.pixels)
            else:
                outputs["histmatch"] = src_rec.pixels
            outputs["harmonized"] = harmonize(model, src_rec, profile).pixels
            for method in METHODS:
                s = ssim(outputs[method], truth, dynamic_range=dynamic_range)
                p = psnr(outputs[method], truth, peak=peak)
                values[method]["ssim"].append(s)
                values[method]["psnr"].append(p)
                records.append(MetricRecord(
                    subject_id=src_rec.subject_id,
                    slice_index=src_rec.slice_index,
                    direction=direction, method=method, ssim=s, psnr=p))
        for metric in ("ssim", "psnr"):
            for baseline in ("none", "histmatch"):
                diffs = np.array(values["harmonized"][metric]) - \
                    np.array(values[baseline][metric])
                try:
                    res = wilcoxon_signed_rank(diffs, "greater")
                except ValueError:
                    res = TestResult(statistic=0.0, n=0, p_greater=1.0,
                                     p_two_sided=1.0)
                res.pair = f"{direction} {metric} harmonized-vs-{baseline}"
                tests.append(res)
    return records, tests


def records_to_csv(records):
    lines = ["subject_id,slice_index,direction,method,ssim,psnr"]
    for r in records:
        lines.append(f"{r.subject_id},{r.slice_index},{r.direction},"
                     f"{r.method},{r.ssim:.10g},{r.psnr:.10g}")
    return "\n".join(lines) + "\n"


def tests_to_csv(tests):
    lines = ["pair,statistic,n,p_greater,p_two_sided"]
    for t in tests:
        lines.append(f"{t.pair},{t.statistic:.10g},{t.n},"
                     f"{t.p_greater:.6g},{t.p_two_sided:.6g}")
    return "\n".join(lines) + "\n"


def summary_table(records):
    """Aligned text table: one row per direction and metric, one column per
    method, cells are mean +/- standard deviation."""
    cells = {}
    directions = []
    for r in records:
        if r.direction not in directions:
            directions.append(r.direction)
        cells.setdefault((r.direction, r.method, "ssim"), []).append(r.ssim)
        cells.setdefault((r.direction, r.method, "psnr"), []).append(r.psnr)
    colw = 18
    header = "direction    metric" + "".join(
        f"{m:>{colw}}" for m in METHODS)
    lines = [header, "-" * len(header)]
    for d in directions:
        for metric in ("ssim", "psnr"):
            row = f"{d:<12} {metric:>6}"
            for m in METHODS:
                vals = np.array(cells.get((d, m, metric), [np.nan]))
                row += f"{vals.mean():>10.4f}+/-{vals.std():<6.4f}"
            lines.append(row)
    return "\n".join(lines) + "\n"
