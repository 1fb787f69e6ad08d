"""Figure emission as 8-bit grayscale PGM files.

Images are windowed to [0, 1.5] in WM-normalized units. The scatter plot of
contrast codes renders each site's points at a distinct gray level; exact
values ship separately as CSV.
"""

import numpy as np

from . import autodiff as ad
from .harmonize import harmonize
from .networks import theta_encode


def to_gray(image, lo=0.0, hi=1.5):
    x = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        dims = fh.readline().split()
        maxval = fh.readline()
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def tile_grid(images, n_cols, pad=2, pad_value=32):
    """Stack equally sized uint8 tiles into a padded grid."""
    n = len(images)
    h, w = images[0].shape
    n_rows = (n + n_cols - 1) // n_cols
    canvas = np.full((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad),
                     pad_value, dtype=np.uint8)
    for idx, img in enumerate(images):
        r, c = divmod(idx, n_cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        canvas[y:y + h, x:x + w] = img
    return canvas


def harmonization_grid(model, dataset, target_profiles, contrast_id=1,
                       lo=0.0, hi=1.5):
    """Row 0: one source image per site; following rows: the same images
    harmonized to each target profile."""
    sources = []
    for sid in dataset.site_ids():
        recs = (dataset.records(split="test", site_id=sid,
                                contrast_id=contrast_id)
                or dataset.records(split="train", site_id=sid,
                                   contrast_id=contrast_id))
        if recs:
            sources.append(recs[0])
    if not sources:
        raise ValueError("no images to render")
    tiles = [to_gray(rec.pixels, lo, hi) for rec in sources]
    for prof in target_profiles:
        for rec in sources:
            out = harmonize(model, rec, prof, allow_untrained=True)
            tiles.append(to_gray(out.pixels, lo, hi))
    return tile_grid(tiles, n_cols=len(sources))


def theta_scatter(model, dataset, contrast_id=1, size=400, margin=0.1):
    """Scatter of per-image contrast codes over the test split, one gray
    level per site, as a uint8 canvas."""
    by_site = {}
    for rec in dataset.records(split="test", contrast_id=contrast_id):
        by_site.setdefault(rec.site_id, []).append(rec.pixels)
    if not by_site:
        raise ValueError("no test images for the scatter")
    points = {}
    for sid, imgs in sorted(by_site.items()):
        with ad.no_grad():
            code = theta_encode(model, np.stack(imgs)[:, None])
        points[sid] = code.mean.data
    allpts = np.concatenate(list(points.values()), axis=0)
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo = lo - margin * span
    hi = hi + margin * span
    span = hi - lo
    canvas = np.full((size, size), 255, dtype=np.uint8)
    levels = np.linspace(0, 200, len(points)).astype(np.uint8)
    for level, (sid, pts) in zip(levels, sorted(points.items())):
        xy = (pts - lo) / span
        cols = np.clip((xy[:, 0] * (size - 1)).astype(int), 0, size - 1)
        rows = np.clip(((1.0 - xy[:, 1]) * (size - 1)).astype(int), 0, size - 1)
        for r, c in zip(rows, cols):
            canvas[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = level
    return canvas


def theta_csv(model, dataset, contrast_id=1):
    lines = ["site_id,theta1,theta2"]
    for rec in dataset.records(split="test", contrast_id=contrast_id):
        with ad.no_grad():
            code = theta_encode(model, rec.pixels[None, None])
        t = code.mean.data[0]
        lines.append(f"{rec.site_id},{t[0]:.10g},{t[1]:.10g}")
    return "\n".join(lines) + "\n"
