"""Image/mask I/O, manifests, synthetic shapes, augmentation and mask statistics.

Only binary PPM (P6) and PGM (P5) are read and written. Images become
H×W×3 float arrays in [0, 1]; masks become H×W arrays of 0/1.
"""

from __future__ import annotations

import csv
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ImageFormatError
from .metrics import boundary_map
from .tensor import resize_array

MASK_THRESHOLD = 128
DIFFICULTIES = ("blob", "thin", "mixed")

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


# ---------------------------------------------------------------- PNM


def read_pnm(path):
    """Return (array, maxval); P5 gives H×W, P6 gives H×W×3 (uint8 or uint16)."""
    path = Path(path)
    buf = path.read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise ImageFormatError(f"{path}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} (need P5 or P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ImageFormatError(f"{path}: non-numeric header field") from e
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad header values {w}×{h} maxval {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header")
    pos += 1
    chans = 3 if magic == b"P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * chans
    payload = buf[pos : pos + n * dt.itemsize]
    if len(payload) != n * dt.itemsize:
        raise ImageFormatError(f"{path}: payload has {len(payload)} bytes, expected {n * dt.itemsize}")
    arr = np.frombuffer(payload, dtype=dt).astype(np.uint16 if maxval > 255 else np.uint8)
    arr = arr.reshape((h, w, 3) if chans == 3 else (h, w))
    return arr, maxval


def write_pnm(path, arr, maxval=255):
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise DimensionError(f"cannot write array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def to_u8(x):
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- samples


@dataclass
class Sample:
    image: np.ndarray  # H×W×3 in [0, 1]
    mask: np.ndarray  # H×W of {0, 1}
    id: str = ""
    original_dims: tuple = (0, 0)

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DimensionError(f"sample {self.id}: image {self.image.shape[:2]} vs mask {self.mask.shape}")
        if not self.original_dims or self.original_dims == (0, 0):
            self.original_dims = tuple(self.mask.shape)


def load_image(path):
    arr, maxval = read_pnm(path)
    img = arr.astype(np.float32) / np.float32(maxval)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img


def load_mask(path):
    arr, maxval = read_pnm(path)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: mask must be a PGM (P5) file")
    # threshold at 128 on the 8-bit scale
    return (arr.astype(np.float64) * (255.0 / maxval) >= MASK_THRESHOLD).astype(np.float32)


def load_sample(image_path, mask_path, sample_id=None) -> Sample:
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if image.shape[:2] != mask.shape:
        raise DimensionError(f"{image_path} is {image.shape[:2]} but {mask_path} is {mask.shape}")
    return Sample(image, mask, sample_id or Path(image_path).stem, tuple(mask.shape))


def save_sample(sample: Sample, image_path, mask_path):
    write_pnm(image_path, to_u8(sample.image))
    write_pnm(mask_path, (sample.mask > 0.5).astype(np.uint8) * 255)


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)  # (id, image_path, mask_path)
    split: str = ""

    def __len__(self):
        return len(self.entries)

    def subset(self, idx, split=None):
        return DatasetManifest(self.root, [self.entries[i] for i in idx], split or self.split)


def read_manifest(path, split="") -> DatasetManifest:
    """Read ``id<TAB>image<TAB>mask`` lines; relative paths resolve against the manifest's directory."""
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        sid, img, msk = parts
        img, msk = root / img, root / msk
        for f in (img, msk):
            if not f.exists():
                raise FileNotFoundError(f"{path}:{lineno}: {f} does not exist")
        entries.append((sid, img, msk))
    entries.sort(key=lambda e: e[0])
    return DatasetManifest(root, entries, split)


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    lines = []
    for sid, img, msk in manifest.entries:
        lines.append(f"{sid}\t{os.path.relpath(img, path.parent)}\t{os.path.relpath(msk, path.parent)}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def worker_count():
    try:
        return max(1, int(os.environ.get("GRAFTNET_THREADS", "1")))
    except ValueError:
        return 1


def load_all(manifest: DatasetManifest):
    """Load every sample; results are in manifest order whatever the worker count."""
    jobs = [(img, msk, sid) for sid, img, msk in manifest.entries]
    workers = worker_count()
    if workers == 1:
        return [load_sample(*j) for j in jobs]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(lambda j: load_sample(*j), jobs))


def resize_sample(sample: Sample, h, w) -> Sample:
    if sample.mask.shape == (h, w):
        return sample
    img = resize_array(sample.image.transpose(2, 0, 1).astype(np.float64), h, w).transpose(1, 2, 0)
    msk = resize_array(sample.mask.astype(np.float64), h, w) >= 0.5
    return Sample(np.clip(img, 0, 1).astype(np.float32), msk.astype(np.float32), sample.id, sample.original_dims)


# ---------------------------------------------------------------- synthetic data


def _smooth_noise(rng, hw, cells):
    coarse = rng.random((cells, cells))
    return resize_array(coarse, hw, hw)


def _ellipse(yy, xx, rng, hw):
    cy, cx = rng.uniform(0.25, 0.75, 2) * hw
    ry, rx = rng.uniform(0.1, 0.3, 2) * hw
    th = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _polygon(yy, xx, rng, hw):
    k = int(rng.integers(3, 7))
    cy, cx = rng.uniform(0.3, 0.7, 2) * hw
    r = rng.uniform(0.12, 0.3) * hw
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    py, px = cy + r * np.sin(ang), cx + r * np.cos(ang)
    inside = np.ones_like(yy, dtype=bool)
    for i in range(k):
        j = (i + 1) % k
        cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
        inside &= cross >= 0
    return inside


def _thin(yy, xx, rng, hw):
    """Polyline of a few segments, 1-2.5 px wide."""
    k = int(rng.integers(2, 5))
    pts = rng.uniform(0.1, 0.9, (k + 1, 2)) * hw
    half = rng.uniform(0.5, 1.25)
    out = np.zeros_like(yy, dtype=bool)
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        dy, dx = y1 - y0, x1 - x0
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
        d2 = (yy - y0 - t * dy) ** 2 + (xx - x0 - t * dx) ** 2
        out |= d2 <= half * half
    return out


def synth_sample(hw, rng, difficulty="mixed"):
    """One image/mask pair of composited shapes over a textured background."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    if difficulty == "mixed":
        difficulty = "thin" if rng.random() < 0.3 else "blob"
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64) + 0.5
    mask = np.zeros((hw, hw), dtype=bool)
    if difficulty == "blob":
        for _ in range(int(rng.integers(1, 3))):
            shape = _ellipse if rng.random() < 0.5 else _polygon
            mask |= shape(yy, xx, rng, hw)
    else:
        for _ in range(int(rng.integers(1, 3))):
            mask |= _thin(yy, xx, rng, hw)
    if not mask.any():
        mask |= _ellipse(yy, xx, rng, hw)

    bg_col = rng.uniform(0.1, 0.9, 3)
    fg_col = rng.uniform(0.1, 0.9, 3)
    while np.abs(fg_col - bg_col).sum() < 0.6:
        fg_col = rng.uniform(0.0, 1.0, 3)
    bg_tex = _smooth_noise(rng, hw, max(2, hw // 8)) - 0.5
    fg_tex = _smooth_noise(rng, hw, max(2, hw // 16)) - 0.5
    img = np.where(mask[:, :, None], fg_col + 0.25 * fg_tex[:, :, None], bg_col + 0.35 * bg_tex[:, :, None])
    img = img + rng.normal(0, 0.03, img.shape)
    return to_u8(np.clip(img, 0, 1)), mask.astype(np.uint8) * 255


def synth_generate(n, hw, seed, out_dir, difficulty="mixed", split="") -> DatasetManifest:
    """Write n synthetic samples plus ``manifest.tsv`` under out_dir; deterministic in seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, msk = synth_sample(hw, rng, difficulty)
        sid = f"s{i:05d}"
        ip, mp = out / f"{sid}.ppm", out / f"{sid}.pgm"
        write_pnm(ip, img)
        write_pnm(mp, msk)
        entries.append((sid, ip, mp))
    manifest = DatasetManifest(out, entries, split)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------- augmentation


def snap_size(size, multiple):
    return max(multiple, int(round(size / multiple)) * multiple)


def augment(sample: Sample, rng, target_hw=None, scales=(0.75, 1.0, 1.25), min_area=0.7, multiple=32) -> Sample:
    """Random flip, crop (>= min_area of the frame) and scale jitter, applied identically to image and mask."""
    img, msk = sample.image, sample.mask
    if rng.random() < 0.5:
        img, msk = img[:, ::-1], msk[:, ::-1]
    h, w = msk.shape
    frac = math.sqrt(rng.uniform(min_area, 1.0))
    ch, cw = min(h, math.ceil(h * frac)), min(w, math.ceil(w * frac))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img, msk = img[top : top + ch, left : left + cw], msk[top : top + ch, left : left + cw]
    base = target_hw or h
    s = scales[int(rng.integers(len(scales)))] if len(scales) > 1 else scales[0]
    side = snap_size(base * s, multiple)
    cropped = Sample(np.ascontiguousarray(img), np.ascontiguousarray(msk), sample.id, sample.original_dims)
    return resize_sample(cropped, side, side)


# ---------------------------------------------------------------- statistics


def edge_pixel_count(mask):
    return int(boundary_map(np.asarray(mask) > 0.5).sum())


def dataset_stats(manifest: DatasetManifest):
    rows = []
    for sid, img, msk in manifest.entries:
        mask = load_mask(msk)
        arr, _ = read_pnm(img)
        h, w = arr.shape[:2]
        edges = edge_pixel_count(mask)
        rows.append(
            {
                "id": sid,
                "edge_pixels": edges,
                "log10_edge_pixels": math.log10(edges) if edges > 0 else float("nan"),
                "diag": math.hypot(h, w),
            }
        )
    return rows


def write_stats_csv(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["id", "edge_pixels", "log10_edge_pixels", "diag"])
        wr.writeheader()
        for r in rows:
            wr.writerow({**r, "log10_edge_pixels": f"{r['log10_edge_pixels']:.6f}", "diag": f"{r['diag']:.6f}"})


def write_histogram_csv(values, path, bins=20):
    vals = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    counts, edges = np.histogram(vals, bins=bins) if vals.size else (np.zeros(0, int), np.zeros(1))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bin_lo", "bin_hi", "count"])
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            wr.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])
