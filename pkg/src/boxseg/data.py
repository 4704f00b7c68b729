"""Synthetic low-contrast blob data and on-disk dataset handling.

Samples imitate the regime the trainer targets: smooth textured
backgrounds with 1-3 star-convex blobs at 0.05-0.25 intensity contrast,
so that box-shaped over-segmentation is measurably wrong. Images are
quantized to 8-bit levels at generation time, which makes the PPM round
trip bit-exact. All randomness is Philox counter-based keyed by the
sample seed.

File formats: binary PPM (P6) images, binary PGM (P5) masks, one
"x0 y0 x1 y1" line per box, and tab-separated manifests
"image<TAB>mask|-<TAB>boxes|-".
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DataError
from .rng import STREAM_DATA, rng_for

EIGHT_CONN = np.ones((3, 3), dtype=int)


@dataclass
class SyntheticSample:
    image: np.ndarray    # (3,S,S) floats in [0,1], 8-bit quantized
    gt_mask: np.ndarray  # (S,S) 0/1
    gt_boxes: list       # [(x0,y0,x1,y1)] inclusive corners
    seed: int


def _smooth_field(rng, size, cells=8, amplitude=0.03):
    coarse = rng.uniform(-1.0, 1.0, size=(3, cells, cells))
    return amplitude * kernels.bilinear_forward(coarse, size, size)


def _blob_mask(size, cx, cy, radius, wobble_amp, wobble_phase):
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - cx
    dy = yy - cy
    theta = np.arctan2(dy, dx)
    r = np.full_like(theta, 1.0)
    for k, (a, ph) in enumerate(zip(wobble_amp, wobble_phase), start=2):
        r += a * np.cos(k * theta + ph)
    r = radius * np.clip(r, 0.6, 1.45)
    return (dx * dx + dy * dy) < r * r


def gen_sample(seed, size=64, n_blobs=None):
    """Deterministic synthetic sample; see module docstring for the recipe."""
    if size < 32:
        raise DataError(f"gen_sample: size {size} < 32")
    rng = rng_for(STREAM_DATA, seed)
    n = int(n_blobs) if n_blobs else int(rng.integers(1, 4))

    base = rng.uniform(0.35, 0.55, size=3)
    image = base[:, None, None] + _smooth_field(rng, size)

    mask = np.zeros((size, size), dtype=bool)
    placed = []
    for _ in range(n):
        for _attempt in range(40):
            radius = rng.uniform(0.11, 0.20) * size
            margin = 1.5 * radius + 2
            cx = rng.uniform(margin, size - margin)
            cy = rng.uniform(margin, size - margin)
            # keep blobs pairwise separated so components stay distinct
            if all(np.hypot(cx - px, cy - py) > 1.5 * (radius + pr) + 3
                   for px, py, pr in placed):
                break
        else:
            continue
        wob = rng.uniform(0.04, 0.16, size=4)
        phase = rng.uniform(0.0, 2 * np.pi, size=4)
        blob = _blob_mask(size, cx, cy, radius, wob, phase)
        contrast = rng.uniform(0.08, 0.22)
        tint = 1.0 + 0.15 * rng.uniform(-1.0, 1.0, size=3)
        image += contrast * tint[:, None, None] * blob[None, :, :]
        mask |= blob
        placed.append((cx, cy, radius))

    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0
    gt_mask = mask.astype(np.float64)
    return SyntheticSample(image=image, gt_mask=gt_mask,
                           gt_boxes=mask_to_boxes(gt_mask), seed=seed)


def mask_to_boxes(mask):
    """Tight inclusive bounding boxes of the 8-connected components."""
    labeled, count = ndimage.label(np.asarray(mask) > 0.5, structure=EIGHT_CONN)
    boxes = []
    for sl in ndimage.find_objects(labeled):
        if sl is None:
            continue
        ys, xs = sl
        boxes.append((xs.start, ys.start, xs.stop - 1, ys.stop - 1))
    return boxes


# --- image / annotation files ----------------------------------------------

def save_ppm(path, image):
    """(3,H,W) floats in [0,1] -> binary P6, 8-bit."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def save_pgm(path, gray):
    """(H,W) floats in [0,1] -> binary P5, 8-bit."""
    arr = np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _read_pnm_tokens(fh, n):
    # whitespace/comment-tolerant header tokens
    tokens = []
    while len(tokens) < n:
        line = fh.readline()
        if not line:
            raise DataError("unexpected end of PNM header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens[:n]


def load_pnm(path):
    """P6 -> (3,H,W), P5 -> (H,W); floats in [0,1]."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open image {path}: {e}") from e
    with fh:
        magic = fh.read(2)
        if magic not in (b"P5", b"P6"):
            raise DataError(f"{path}: not a binary PGM/PPM file")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(fh, 3))
        if maxval != 255:
            raise DataError(f"{path}: only 8-bit PNM supported, maxval={maxval}")
        channels = 3 if magic == b"P6" else 1
        raw = fh.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise DataError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        return arr.reshape(h, w, 3).transpose(2, 0, 1)
    return arr.reshape(h, w)


def save_boxes(path, boxes):
    with open(path, "w", encoding="ascii") as fh:
        for x0, y0, x1, y1 in boxes:
            fh.write(f"{x0} {y0} {x1} {y1}\n")


def load_boxes(path):
    """Parse a box file; malformed or negative entries name the line."""
    try:
        fh = open(path, "r", encoding="ascii")
    except OSError as e:
        raise DataError(f"cannot open box file {path}: {e}") from e
    boxes = []
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 integers, got {line!r}")
            try:
                x0, y0, x1, y1 = (int(p) for p in parts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer coordinate in {line!r}")
            if min(x0, y0, x1, y1) < 0 or x1 < x0 or y1 < y0:
                raise DataError(f"{path}:{lineno}: invalid box {line!r}")
            boxes.append((x0, y0, x1, y1))
    return boxes


# --- manifests ---------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    mask: str | None
    boxes: str | None


@dataclass
class LoadedSample:
    image: np.ndarray
    mask: np.ndarray | None
    boxes: list | None
    name: str


def read_manifest(path):
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot open manifest {path}: {e}") from e
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            img, mask, boxes = parts
            mask = None if mask == "-" else mask
            boxes = None if boxes == "-" else boxes
            if mask is None and boxes is None:
                raise DataError(f"{path}:{lineno}: entry needs a mask or a box file")
            resolve = lambda p: p if p is None or os.path.isabs(p) else os.path.join(root, p)
            entries.append(ManifestEntry(resolve(img), resolve(mask), resolve(boxes)))
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return entries


def load_entry(entry):
    image = load_pnm(entry.image)
    if image.ndim != 3:
        raise DataError(f"{entry.image}: expected a color PPM image")
    mask = None
    if entry.mask:
        mask = (load_pnm(entry.mask) >= 0.5).astype(np.float64)
        if mask.ndim != 2 or mask.shape != image.shape[1:]:
            raise DataError(f"{entry.mask}: mask shape {mask.shape} does not match "
                            f"image {image.shape[1:]}")
    boxes = None
    if entry.boxes:
        boxes = load_boxes(entry.boxes)
        h, w = image.shape[1], image.shape[2]
        for i, (x0, y0, x1, y1) in enumerate(boxes):
            if x1 >= w or y1 >= h:
                raise DataError(f"{entry.boxes}: box {i} exceeds image {w}x{h}")
    return LoadedSample(image=image, mask=mask, boxes=boxes,
                        name=os.path.splitext(os.path.basename(entry.image))[0])


def load_dataset(manifest_path):
    """Load every manifest entry up front (desk-scale datasets are small)."""
    return [load_entry(e) for e in read_manifest(manifest_path)]


def write_dataset(out_dir, seed, count, size=64, with_masks=True):
    """Generate `count` samples and a manifest; returns the manifest path.

    Masks are always written to disk; with_masks controls whether the
    manifest references them (a box-only manifest trains weakly even
    though masks exist for evaluation).
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i in range(count):
        sample = gen_sample(int(seed) + i, size=size)
        stem = f"sample_{i:05d}"
        save_ppm(os.path.join(out_dir, stem + ".ppm"), sample.image)
        save_pgm(os.path.join(out_dir, stem + ".mask.pgm"), sample.gt_mask)
        save_boxes(os.path.join(out_dir, stem + ".boxes.txt"), sample.gt_boxes)
        mask_field = stem + ".mask.pgm" if with_masks else "-"
        lines.append(f"{stem}.ppm\t{mask_field}\t{stem}.boxes.txt")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest
