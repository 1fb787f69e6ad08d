"""Synthetic multi-site MR data from parametric imaging equations.

A phantom is a tissue label map plus per-tissue (T1, T2, PD); an image is
produced by evaluating a closed-form signal equation per pixel, modulated by
a smooth multiplicative bias field and additive Gaussian noise. Because the
same anatomy can be rendered under any site configuration, the simulator
provides exact traveling subjects for quantitative harmonization scoring.
"""

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .seeds import stream, stream_seed

BACKGROUND, CSF, GM, WM, LESION = 0, 1, 2, 3, 4

# canonical (T1 ms, T2 ms, PD) per tissue label; simulator constants
CANONICAL_TISSUES = {
    BACKGROUND: (1000.0, 100.0, 0.0),
    CSF: (4000.0, 2000.0, 1.0),
    GM: (1300.0, 110.0, 0.85),
    WM: (850.0, 80.0, 0.75),
    LESION: (1100.0, 120.0, 0.80),
}

T1W, T2W = 1, 2


class ContrastMismatchError(ValueError):
    """Site/contrast pairing is inconsistent (wrong sequence, missing data)."""


@dataclass
class SiteConfig:
    """One acquisition configuration: a (site, contrast) domain.

    ``sequence`` is "ir" (inversion-recovery, the T1-weighted analogue) or
    "se" (spin-echo, the T2-weighted analogue). Times are in ms.
    """

    site_id: str
    sequence: str
    te: float
    tr: float
    ti: float = None
    gain: float = 1.0
    noise_sigma: float = 0.0
    bias_amplitude: float = 0.0

    def __post_init__(self):
        if self.sequence not in ("ir", "se"):
            raise ValueError(f"unknown sequence {self.sequence!r}")
        if self.sequence == "ir" and self.ti is None:
            raise ContrastMismatchError(
                f"site {self.site_id}: inversion-recovery needs a TI")
        if not self.te < self.tr:
            raise ValueError(f"site {self.site_id}: TE must be < TR")
        if self.ti is not None and not self.ti < self.tr:
            raise ValueError(f"site {self.site_id}: TI must be < TR")
        if self.gain <= 0:
            raise ValueError(f"site {self.site_id}: gain must be > 0")
        if self.noise_sigma < 0:
            raise ValueError(f"site {self.site_id}: noise_sigma must be >= 0")

    @property
    def contrast_id(self):
        return T1W if self.sequence == "ir" else T2W


@dataclass
class Phantom:
    """Tissue label map plus per-tissue physical parameters."""

    labels: np.ndarray
    tissue_params: dict
    subject_id: str = "s0"
    slice_index: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.isin(labels, list(CANONICAL_TISSUES)).all():
            raise ValueError("phantom labels outside the known tissue set")
        if not (labels == WM).any():
            raise ValueError("phantom has no white-matter pixels")
        for lab, (t1, t2, pd) in self.tissue_params.items():
            if t1 <= 0 or t2 <= 0:
                raise ValueError(f"tissue {lab}: T1/T2 must be positive")
            if not 0.0 <= pd <= 1.0:
                raise ValueError(f"tissue {lab}: PD must be in [0, 1]")
        self.labels = labels


@dataclass
class ImageSlice:
    """One rendered 2-d image, identified by (site, contrast, subject, slice)."""

    pixels: np.ndarray
    site_id: str
    contrast_id: int
    subject_id: str
    slice_index: int
    traveling: bool = False


@dataclass
class Dataset:
    """Train/test partitions plus the traveling-subject registry."""

    train: list
    test: list
    traveling: dict = field(default_factory=dict)
    sites: list = field(default_factory=list)

    def site_ids(self):
        seen = []
        for cfg in self.sites:
            if cfg.site_id not in seen:
                seen.append(cfg.site_id)
        return seen

    def records(self, split=None, site_id=None, contrast_id=None,
                subject_id=None, traveling=None):
        pools = {"train": self.train, "test": self.test}
        recs = pools[split] if split else self.train + self.test
        out = []
        for r in recs:
            if site_id is not None and r.site_id != site_id:
                continue
            if contrast_id is not None and r.contrast_id != contrast_id:
                continue
            if subject_id is not None and r.subject_id != subject_id:
                continue
            if traveling is not None and r.traveling != traveling:
                continue
            out.append(r)
        return out


def generate_phantom(rng_seed, size=(64, 64), slice_index=0, subject_id="s0"):
    """Build a brain-like nested-ellipse phantom slice.

    Geometry from outside in: background, CSF rim, GM ribbon, WM core, and
    (for ~30% of subjects) lesion blobs inside the WM. Subject-level draws
    (ellipse axes, rotation, tissue jitter, lesion layout) depend only on
    ``rng_seed``; the slice index modulates the geometry the way neighboring
    slices of one head do, so the same seed with two slice indices gives the
    same "subject" with different anatomy.
    """
    h, w = size
    if min(h, w) < 32:
        raise ValueError(f"phantom size {size} too small, need >= 32 per axis")

    ss = np.random.SeedSequence(rng_seed)
    subj = np.random.default_rng(ss)

    # subject-level parameters; wide jitter so anatomy is not predictable
    # from pixel position alone (the bottleneck must carry it)
    cy = h / 2.0 + subj.uniform(-0.05, 0.05) * h
    cx = w / 2.0 + subj.uniform(-0.05, 0.05) * w
    ay = 0.40 * h * (1.0 + subj.uniform(-0.12, 0.12))
    ax = 0.35 * w * (1.0 + subj.uniform(-0.12, 0.12))
    phi = subj.uniform(-np.pi / 4, np.pi / 4)
    gm_frac = 0.86 + subj.uniform(-0.02, 0.02)
    wm_frac = 0.68 + subj.uniform(-0.03, 0.03)
    params = {}
    for lab, (t1, t2, pd) in CANONICAL_TISSUES.items():
        if lab == BACKGROUND:
            params[lab] = (t1, t2, pd)
            continue
        jt = 1.0 + subj.uniform(-0.10, 0.10, size=3)
        params[lab] = (t1 * jt[0], t2 * jt[1], min(1.0, pd * jt[2]))
    has_lesion = subj.random() < 0.30
    lesions = []
    if has_lesion:
        for _ in range(subj.integers(1, 4)):
            rho = subj.uniform(0.15, 0.75)       # radial pos, fraction of WM radius
            ang = subj.uniform(0, 2 * np.pi)
            rad = subj.uniform(0.05, 0.11)       # radius, fraction of min axis
            lesions.append((rho, ang, rad))

    # slice-level modulation: axes shrink along the stack plus small jitter
    srng = np.random.default_rng(
        np.random.SeedSequence(entropy=ss.entropy, spawn_key=(int(slice_index),)))
    scale = (1.0 - 0.030 * slice_index) * (1.0 + srng.uniform(-0.05, 0.05))
    if scale <= 0.3:
        raise ValueError(f"slice_index {slice_index} collapses the geometry")
    ay_s, ax_s = ay * scale, ax * scale
    cy_s = cy + srng.uniform(-0.04, 0.04) * h
    cx_s = cx + srng.uniform(-0.04, 0.04) * w
    phi_s = phi + srng.uniform(-0.15, 0.15)

    yy, xx = np.mgrid[0:h, 0:w]
    u = (yy - cy_s) * np.cos(phi_s) + (xx - cx_s) * np.sin(phi_s)
    v = -(yy - cy_s) * np.sin(phi_s) + (xx - cx_s) * np.cos(phi_s)
    r = np.sqrt((u / ay_s) ** 2 + (v / ax_s) ** 2)

    labels = np.full((h, w), BACKGROUND, dtype=np.int64)
    labels[r <= 1.0] = CSF
    labels[r <= gm_frac] = GM
    labels[r <= wm_frac] = WM
    for rho, ang, rad in lesions:
        ly = cy_s + rho * wm_frac * ay_s * np.cos(ang + phi_s) * 0.9
        lx = cx_s + rho * wm_frac * ax_s * np.sin(ang + phi_s) * 0.9
        d = np.sqrt((yy - ly) ** 2 + (xx - lx) ** 2)
        inside = (d <= rad * min(ay_s, ax_s)) & (labels == WM)
        labels[inside] = LESION

    return Phantom(labels=labels, tissue_params=params,
                   subject_id=subject_id, slice_index=slice_index)


def signal_value(t1, t2, pd, site):
    """Closed-form pixel signal for a single tissue under ``site``.

    Inversion recovery: gain * PD * |1 - 2 exp(-TI/T1) + exp(-TR/T1)| * exp(-TE/T2)
    Spin echo:          gain * PD * (1 - exp(-TR/T1)) * exp(-TE/T2)
    """
    if site.sequence == "ir":
        rec = np.abs(1.0 - 2.0 * np.exp(-site.ti / t1) + np.exp(-site.tr / t1))
    else:
        rec = 1.0 - np.exp(-site.tr / t1)
    return site.gain * pd * rec * np.exp(-site.te / t2)


def render_image(phantom, site, contrast_id, rng_seed):
    """Render a phantom under one site configuration.

    Applies the sequence's signal equation per pixel, multiplies by a smooth
    bias field 1 + amplitude * p(x, y) (p a random quadratic normalized to
    peak magnitude 1), then adds Gaussian noise. Deterministic given the seed.
    """
    if site.contrast_id != contrast_id:
        raise ContrastMismatchError(
            f"site {site.site_id} config is {site.sequence!r} "
            f"(contrast {site.contrast_id}), asked for contrast {contrast_id}")
    if site.sequence == "ir" and site.ti is None:
        raise ContrastMismatchError(
            f"site {site.site_id}: inversion-recovery render without TI")

    labels = phantom.labels
    t1 = np.empty(labels.shape)
    t2 = np.empty(labels.shape)
    pd = np.empty(labels.shape)
    for lab, (a, b, c) in phantom.tissue_params.items():
        m = labels == lab
        t1[m], t2[m], pd[m] = a, b, c
    sig = signal_value(t1, t2, pd, site)

    rng = np.random.default_rng(rng_seed)
    h, w = labels.shape
    vv, uu = np.mgrid[0:h, 0:w]
    uu = 2.0 * uu / (w - 1) - 1.0
    vv = 2.0 * vv / (h - 1) - 1.0
    c = rng.uniform(-1.0, 1.0, size=5)
    p = c[0] * uu + c[1] * vv + c[2] * uu * vv + c[3] * uu ** 2 + c[4] * vv ** 2
    peak = np.abs(p).max()
    if peak > 0:
        p = p / peak
    sig = sig * (1.0 + site.bias_amplitude * p)
    if site.noise_sigma > 0:
        sig = sig + rng.normal(0.0, site.noise_sigma, size=labels.shape)

    return ImageSlice(pixels=sig, site_id=site.site_id, contrast_id=contrast_id,
                      subject_id=phantom.subject_id,
                      slice_index=phantom.slice_index)


def wm_peak_normalize(image, bins=64, foreground_frac=0.05):
    """Divide by the detected bright-tissue histogram peak.

    The peak estimate is the mode of the non-background intensity histogram
    restricted to the upper half of the intensity range, refined by a
    3-bin centroid. Working in intensities relative to the image maximum
    makes the result invariant to positive rescaling of the input.
    Accepts an ImageSlice or a bare array and returns the same kind.
    """
    arr = image.pixels if isinstance(image, ImageSlice) else np.asarray(image)
    if not np.isfinite(arr).all():
        raise ValueError("wm_peak_normalize: non-finite pixel values")
    mx = float(arr.max())
    if mx <= 0 or arr.min() == mx:
        raise ValueError("wm_peak_normalize: degenerate (constant) image")
    rel = arr / mx
    fg = rel[rel > foreground_frac]
    if fg.size < 2 or fg.min() == fg.max():
        raise ValueError("wm_peak_normalize: no usable foreground histogram")
    counts, edges = np.histogram(fg, bins=bins, range=(0.0, 1.0))
    counts = counts.astype(np.float64)
    smooth = counts.copy()
    smooth[1:-1] = 0.25 * counts[:-2] + 0.5 * counts[1:-1] + 0.25 * counts[2:]
    centers = 0.5 * (edges[:-1] + edges[1:])
    upper = np.where(centers > 0.5, smooth, -1.0)
    k = int(np.argmax(upper))
    lo, hi = max(k - 1, 0), min(k + 2, bins)
    mass = smooth[lo:hi].sum()
    peak_rel = float((smooth[lo:hi] * centers[lo:hi]).sum() / mass) if mass > 0 \
        else float(centers[k])
    out = arr / (peak_rel * mx)
    if isinstance(image, ImageSlice):
        return ImageSlice(pixels=out, site_id=image.site_id,
                          contrast_id=image.contrast_id,
                          subject_id=image.subject_id,
                          slice_index=image.slice_index,
                          traveling=image.traveling)
    return out


def _wm_signal(site):
    t1, t2, pd = CANONICAL_TISSUES[WM]
    return signal_value(t1, t2, pd, site)


def default_roster(noise_rel=0.01, bias_amplitude=0.1):
    """The default 4-site synthetic roster (two scanner families, one
    deliberately duplicated parameter set so two sites share a contrast).

    Returns a flat list of SiteConfig, one "ir" and one "se" entry per site.
    Sites differ in sequence timing, gain, noise level, and bias-field
    strength, like scanners do; ``noise_rel`` and ``bias_amplitude`` set the
    roster-wide base levels, with per-site multipliers. Noise sigma is
    relative to the canonical WM signal of each config.
    """
    raw = [
        # site, T1w (IR) params, T2w (SE) params, gain, noise x, bias x
        ("siteA", dict(ti=900.0, tr=2200.0, te=6.0),
         dict(te=165.0, tr=4200.0), 1.0, 0.6, 0.6),
        ("siteB", dict(ti=1700.0, tr=5000.0, te=12.0),
         dict(te=150.0, tr=5000.0), 1.2, 1.2, 1.0),
        ("siteC", dict(ti=1150.0, tr=2700.0, te=8.0),
         dict(te=170.0, tr=3400.0), 0.85, 2.0, 1.4),
        ("siteD", dict(ti=1150.0, tr=2700.0, te=8.0),
         dict(te=170.0, tr=3400.0), 0.85, 2.0, 1.4),
    ]
    roster = []
    for sid, ir, se, gain, noise_mult, bias_mult in raw:
        for seq, kw in (("ir", ir), ("se", se)):
            cfg = SiteConfig(site_id=sid, sequence=seq, gain=gain,
                             bias_amplitude=bias_amplitude * bias_mult, **kw)
            cfg.noise_sigma = noise_rel * noise_mult * _wm_signal(cfg)
            roster.append(cfg)
    return roster


def _group_sites(sites):
    grouped = {}
    for cfg in sites:
        grouped.setdefault(cfg.site_id, {})[cfg.contrast_id] = cfg
    for sid, by_contrast in grouped.items():
        if set(by_contrast) != {T1W, T2W}:
            raise ContrastMismatchError(
                f"site {sid} must define both a T1-w and a T2-w config, "
                f"has contrasts {sorted(by_contrast)}")
    return grouped


def make_dataset(sites, n_train_subjects, n_slices, n_traveling, rng_seed,
                 size=(64, 64), travel_pairs=None, n_travel_slices=None):
    """Render a full multi-site dataset with exact traveling subjects.

    Every training subject is rendered at its home site under both contrasts
    and ``n_slices`` slices, giving the intra-site paired data the training
    loop needs. Traveling subjects are rendered under both sites of each
    designated pair with identical phantoms and appear in the test partition
    only (with ``n_travel_slices`` slices, default ``n_slices``). All images
    are WM-peak normalized.
    """
    grouped = _group_sites(sites)
    site_ids = list(grouped)
    if len(site_ids) < 2:
        raise ValueError("make_dataset needs at least 2 sites")
    if n_slices < 2:
        raise ValueError("need >= 2 slices per subject for x' pairing")
    if n_traveling > n_train_subjects:
        raise ValueError(
            f"n_traveling={n_traveling} exceeds available subjects per site "
            f"({n_train_subjects})")
    if travel_pairs is None:
        travel_pairs = [(site_ids[i], site_ids[i + 1])
                        for i in range(0, len(site_ids) - 1, 2)]
    for a, b in travel_pairs:
        if a not in grouped or b not in grouped:
            raise ValueError(f"travel pair ({a}, {b}) references unknown site")

    train, test = [], []
    traveling = {}

    for sid in site_ids:
        for i in range(n_train_subjects):
            subject = f"{sid}_s{i:02d}"
            pseed = stream_seed(rng_seed, "phantom", subject)
            for k in range(n_slices):
                ph = generate_phantom(pseed, size, slice_index=k,
                                      subject_id=subject)
                for contrast in (T1W, T2W):
                    img = render_image(
                        ph, grouped[sid][contrast], contrast,
                        stream_seed(rng_seed, "render", subject, sid, contrast, k))
                    train.append(wm_peak_normalize(img))

    if n_travel_slices is None:
        n_travel_slices = n_slices
    for pi, (sa, sb) in enumerate(travel_pairs):
        for i in range(n_traveling):
            subject = f"tv{pi}_{i:02d}"
            traveling[subject] = [sa, sb]
            pseed = stream_seed(rng_seed, "phantom", subject)
            for k in range(n_travel_slices):
                ph = generate_phantom(pseed, size, slice_index=k,
                                      subject_id=subject)
                for sid in (sa, sb):
                    for contrast in (T1W, T2W):
                        img = render_image(
                            ph, grouped[sid][contrast], contrast,
                            stream_seed(rng_seed, "render", subject, sid,
                                        contrast, k))
                        img.traveling = True
                        test.append(wm_peak_normalize(img))

    return Dataset(train=train, test=test, traveling=traveling,
                   sites=list(sites))


# ---------------------------------------------------------------------------
# on-disk format: raw little-endian float64 grids + a csv manifest

_MANIFEST_FIELDS = ["path", "site_id", "contrast_id", "subject_id",
                    "slice_index", "traveling", "split", "height", "width"]


def _record_path(rec):
    return os.path.join(
        rec.site_id, f"{rec.subject_id}_k{rec.slice_index:02d}_c{rec.contrast_id}.f64")


def save_dataset(dataset, out_dir):
    """Write images as flat binary float64 grids plus manifest.csv.

    The manifest is the single source of truth for pairing; sites.json keeps
    the acquisition configs for provenance.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split, recs in (("train", dataset.train), ("test", dataset.test)):
        for rec in recs:
            rel = _record_path(rec)
            full = os.path.join(out_dir, rel)
            os.makedirs(os.path.dirname(full), exist_ok=True)
            arr = np.ascontiguousarray(rec.pixels, dtype="<f8")
            with open(full, "wb") as fh:
                fh.write(arr.tobytes())
            rows.append({
                "path": rel.replace(os.sep, "/"), "site_id": rec.site_id,
                "contrast_id": rec.contrast_id, "subject_id": rec.subject_id,
                "slice_index": rec.slice_index,
                "traveling": int(rec.traveling), "split": split,
                "height": rec.pixels.shape[0], "width": rec.pixels.shape[1],
            })
    rows.sort(key=lambda r: (r["split"], r["path"]))
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    sites_payload = [asdict(cfg) for cfg in dataset.sites]
    with open(os.path.join(out_dir, "sites.json"), "w") as fh:
        json.dump({"sites": sites_payload, "traveling": dataset.traveling},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(data_dir):
    manifest = os.path.join(data_dir, "manifest.csv")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.csv under {data_dir}")
    train, test = [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            h, w = int(row["height"]), int(row["width"])
            raw = np.fromfile(os.path.join(data_dir, row["path"]), dtype="<f8")
            if raw.size != h * w:
                raise ValueError(
                    f"{row['path']}: expected {h * w} values, found {raw.size}")
            rec = ImageSlice(pixels=raw.reshape(h, w),
                             site_id=row["site_id"],
                             contrast_id=int(row["contrast_id"]),
                             subject_id=row["subject_id"],
                             slice_index=int(row["slice_index"]),
                             traveling=bool(int(row["traveling"])))
            (train if row["split"] == "train" else test).append(rec)
    sites, traveling = [], {}
    sites_path = os.path.join(data_dir, "sites.json")
    if os.path.isfile(sites_path):
        with open(sites_path) as fh:
            payload = json.load(fh)
        sites = [SiteConfig(**d) for d in payload.get("sites", [])]
        traveling = payload.get("traveling", {})
    return Dataset(train=train, test=test, traveling=traveling, sites=sites)
