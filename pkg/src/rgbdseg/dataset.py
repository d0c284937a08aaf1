"""Sample container, PPM/PGM file formats, manifests, crops and splits.

On disk a sample is three files: RGB as binary PPM (P6, maxval 255), depth as
binary PGM (P5, maxval 65535) holding millimeters in the PGM 16-bit
convention (most significant byte first), and labels as binary PGM (P5,
maxval 255) with 255 reserved as the ignore index. Depth files carry a
``# intrinsics fx fy cx cy`` comment so samples stay self-contained; foreign
files without one get 60-degree-FOV defaults.

Manifest format: line 1 ``classes: name0,name1,...`` then one
``id<TAB>rgb<TAB>depth<TAB>labels`` line per sample, paths relative to the
manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hha import DepthImage, default_intrinsics

IGNORE_LABEL = 255


@dataclass
class RgbdSample:
    """Aligned RGB (3,h,w) in [0,1], metric depth, and a per-pixel label map."""

    id: str
    rgb: np.ndarray
    depth: DepthImage
    labels: np.ndarray

    def __post_init__(self):
        h, w = self.labels.shape
        if self.rgb.shape != (3, h, w) or self.depth.depth.shape != (h, w):
            raise ValueError(
                f"sample {self.id}: maps disagree, rgb {self.rgb.shape}, "
                f"depth {self.depth.depth.shape}, labels {self.labels.shape}")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


# ---------------------------------------------------------------------------
# PNM primitives

def _read_pnm(path):
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    comments = []
    while len(tokens) < 4:
        if pos >= len(raw):
            raise ValueError(f"{path}: truncated PNM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            end = raw.find(b"\n", pos)
            end = len(raw) if end < 0 else end
            comments.append(raw[pos + 1:end].decode("ascii", "replace").strip())
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    pos += 1  # single whitespace after maxval
    magic = tokens[0].decode("ascii")
    if magic not in ("P5", "P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PNM header") from exc
    if w < 1 or h < 1 or maxval < 1:
        raise ValueError(f"{path}: bad PNM dimensions {w}x{h} maxval {maxval}")
    channels = 3 if magic == "P6" else 1
    itemsize = 2 if maxval > 255 else 1
    need = w * h * channels * itemsize
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ValueError(f"{path}: expected {need} payload bytes, found {len(body)}")
    dtype = ">u2" if itemsize == 2 else np.uint8
    data = np.frombuffer(body, dtype=dtype).reshape(
        (h, w, 3) if channels == 3 else (h, w))
    return magic, maxval, data, comments


def write_ppm(path, rgb_bytes):
    """rgb_bytes: (h, w, 3) uint8."""
    h, w, _ = rgb_bytes.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb_bytes, dtype=np.uint8).tobytes())


def read_ppm(path):
    magic, maxval, data, _ = _read_pnm(path)
    if magic != "P6" or maxval != 255:
        raise ValueError(f"{path}: expected P6 maxval 255")
    return np.array(data)


def write_depth_pgm(path, depth_m, intrinsics):
    """Depth in meters -> 16-bit millimeter PGM with an intrinsics comment."""
    h, w = depth_m.shape
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n# intrinsics {fx!r} {fy!r} {cx!r} {cy!r}\n{w} {h}\n65535\n".encode("ascii"))
        f.write(mm.tobytes())


def read_depth_pgm(path):
    magic, maxval, data, comments = _read_pnm(path)
    if magic != "P5":
        raise ValueError(f"{path}: depth must be a P5 PGM")
    if maxval != 65535:
        raise ValueError(f"{path}: depth requires 16-bit samples (maxval 65535), got {maxval}")
    depth_m = data.astype(np.float64) / 1000.0
    intr = None
    for c in comments:
        parts = c.split()
        if len(parts) == 5 and parts[0] == "intrinsics":
            intr = tuple(float(p) for p in parts[1:])
    if intr is None:
        intr = default_intrinsics(*depth_m.shape)
    return DepthImage(depth_m, *intr)


def write_label_pgm(path, labels):
    h, w = labels.shape
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("labels must fit in a byte")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.astype(np.uint8).tobytes())


def read_label_pgm(path):
    magic, maxval, data, _ = _read_pnm(path)
    if magic != "P5" or maxval != 255:
        raise ValueError(f"{path}: labels must be a P5 PGM with maxval 255")
    return np.array(data)


# ---------------------------------------------------------------------------
# samples on disk

def rgb_to_bytes(rgb):
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def rgb_from_bytes(arr):
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_sample(root, sample):
    """Write the three maps under root/{rgb,depth,labels}/: returns relative paths."""
    root = Path(root)
    rel = {}
    for sub in ("rgb", "depth", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rel["rgb"] = f"rgb/{sample.id}.ppm"
    write_ppm(root / rel["rgb"], rgb_to_bytes(sample.rgb))
    rel["depth"] = f"depth/{sample.id}.pgm"
    d = sample.depth
    write_depth_pgm(root / rel["depth"], d.depth, (d.fx, d.fy, d.cx, d.cy))
    rel["labels"] = f"labels/{sample.id}.pgm"
    write_label_pgm(root / rel["labels"], sample.labels)
    return rel


def read_sample(root, sample_id, rgb_rel, depth_rel, labels_rel):
    root = Path(root)
    rgb = rgb_from_bytes(read_ppm(root / rgb_rel))
    depth = read_depth_pgm(root / depth_rel)
    labels = read_label_pgm(root / labels_rel)
    return RgbdSample(sample_id, rgb, depth, labels)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class Manifest:
    root: Path
    classes: list
    entries: list  # (id, rgb_rel, depth_rel, labels_rel)

    def __len__(self):
        return len(self.entries)

    @property
    def num_classes(self):
        return len(self.classes)

    def load(self, index):
        sid, rgb_rel, depth_rel, labels_rel = self.entries[index]
        return read_sample(self.root, sid, rgb_rel, depth_rel, labels_rel)

    def validate(self):
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest has duplicate sample ids")
        for sid, *paths in self.entries:
            for p in paths:
                if not (self.root / p).exists():
                    raise FileNotFoundError(f"manifest entry {sid}: missing file {p}")


def write_manifest(path, manifest):
    path = Path(path)
    lines = ["classes: " + ",".join(manifest.classes)]
    for sid, rgb_rel, depth_rel, labels_rel in manifest.entries:
        lines.append(f"{sid}\t{rgb_rel}\t{depth_rel}\t{labels_rel}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path):
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("classes:"):
        raise ValueError(f"{path}: first manifest line must be 'classes: ...'")
    classes = [c.strip() for c in lines[0].split(":", 1)[1].split(",") if c.strip()]
    entries = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}: bad manifest line {ln!r}")
        entries.append(tuple(parts))
    m = Manifest(path.parent, classes, entries)
    m.validate()
    return m


# ---------------------------------------------------------------------------
# crops and splits

def crop(sample, size, policy="center", seed=0):
    """Crop the same window out of all three maps."""
    h, w = sample.labels.shape
    if size > min(h, w):
        raise ValueError(f"crop {size} exceeds sample {h}x{w}")
    if policy == "center":
        top, left = (h - size) // 2, (w - size) // 2
    elif policy == "random":
        r = np.random.Generator(np.random.PCG64(seed))
        top = int(r.integers(0, h - size + 1))
        left = int(r.integers(0, w - size + 1))
    else:
        raise ValueError(f"unknown crop policy {policy!r}")
    d = sample.depth
    win = (slice(top, top + size), slice(left, left + size))
    # principal point shifts with the window so backprojection stays valid
    depth = DepthImage(d.depth[win], d.fx, d.fy, d.cx - left, d.cy - top)
    return RgbdSample(sample.id, sample.rgb[:, win[0], win[1]], depth, sample.labels[win])


def make_split(manifest, train_fraction, seed):
    """Disjoint, exhaustive, seeded shuffle split into (train, test) manifests."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(manifest.entries)
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} samples at {train_fraction} leaves one side empty")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    train = [manifest.entries[i] for i in sorted(order[:n_train])]
    test = [manifest.entries[i] for i in sorted(order[n_train:])]
    return (Manifest(manifest.root, list(manifest.classes), train),
            Manifest(manifest.root, list(manifest.classes), test))


def class_pixel_frequencies(manifest):
    """Fraction of non-ignored pixels per class across the whole manifest."""
    counts = np.zeros(manifest.num_classes, dtype=np.int64)
    for i in range(len(manifest)):
        labels = manifest.load(i).labels
        valid = labels != IGNORE_LABEL
        counts += np.bincount(labels[valid].ravel(), minlength=manifest.num_classes)
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)
