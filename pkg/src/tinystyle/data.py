"""Dataset preparation: detection sidecars, margin crops, shard storage, and
a procedural toy-face corpus so the whole pipeline is testable offline.

Detections arrive as JSON lines (one object per image); images with a
qualifying detection are cropped around the box with a pixel margin,
resized, and packed into fixed-shape binary shards. Rejections are counted
by reason so a run's bookkeeping always satisfies kept + rejected == total.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    CropError,
    DetectionParseError,
    DetectionValidationError,
    ShardCorruptionError,
    ShardFormatError,
)

REJECT_REASONS = ("no_detection", "decode_error", "undersized")


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------

@dataclass
class DetectionRecord:
    image_id: str
    box: tuple[float, float, float, float]  # x, y, width, height; top-left origin
    confidence: float
    landmarks: tuple | None = None

    def __post_init__(self):
        x, y, w, h = self.box
        if w <= 0:
            raise DetectionValidationError(
                f"detection {self.image_id!r}: box width must be > 0, got {w}")
        if h <= 0:
            raise DetectionValidationError(
                f"detection {self.image_id!r}: box height must be > 0, got {h}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectionValidationError(
                f"detection {self.image_id!r}: confidence {self.confidence} "
                f"outside [0, 1]")
        if self.landmarks is not None and len(self.landmarks) != 5:
            raise DetectionValidationError(
                f"detection {self.image_id!r}: expected 5 landmarks, "
                f"got {len(self.landmarks)}")


def load_detections(path) -> list[DetectionRecord]:
    """Parse a JSON-lines detection file; images absent from the file are
    later treated as no_detection by the filter."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DetectionParseError(f"{path}: line {lineno}: {exc}") from exc
            try:
                box = tuple(float(v) for v in obj["box"])
                if len(box) != 4:
                    raise DetectionParseError(
                        f"{path}: line {lineno}: box must have 4 entries")
                lm = obj.get("landmarks")
                records.append(DetectionRecord(
                    image_id=str(obj["id"]), box=box,
                    confidence=float(obj["conf"]),
                    landmarks=tuple(tuple(p) for p in lm) if lm is not None else None))
            except KeyError as exc:
                raise DetectionParseError(
                    f"{path}: line {lineno}: missing field {exc}") from exc
            except (TypeError, ValueError) as exc:
                raise DetectionParseError(f"{path}: line {lineno}: {exc}") from exc
    return records


def group_detections(records) -> dict[str, list[DetectionRecord]]:
    table: dict[str, list[DetectionRecord]] = {}
    for rec in records:
        table.setdefault(rec.image_id, []).append(rec)
    return table


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

def expanded_region(box, margin: float, image_w: int, image_h: int):
    """Box grown by margin/2 per side, clamped to the image.

    Returns integer (x0, y0, w, h). Edges round half-up, so an unclamped
    integral box keeps width exactly box_w + margin. Raises CropError when
    the clamped region is empty.
    """
    x, y, w, h = box
    half = margin / 2.0

    def edge(v):  # round half up: floor differences stay exact
        return int(np.floor(v + 0.5))

    x0 = max(0, edge(x - half))
    y0 = max(0, edge(y - half))
    x1 = min(int(image_w), edge(x + w + half))
    y1 = min(int(image_h), edge(y + h + half))
    if x1 <= x0 or y1 <= y0:
        raise CropError(f"box {box} with margin {margin} does not intersect "
                        f"a {image_w}x{image_h} image")
    return x0, y0, x1 - x0, y1 - y0


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resampling, no antialias filter.

    Sample coordinates follow src = (dst + 0.5) * scale - 0.5, clamped to
    the source grid; this convention is pinned so stored crops are stable.
    """
    img = np.asarray(image)
    was_uint8 = img.dtype == np.uint8
    src = img.astype(np.float32)
    if src.ndim == 2:
        src = src[:, :, None]
    h, w = src.shape[:2]

    def axis_coords(n_out, n_src):
        c = (np.arange(n_out, dtype=np.float32) + 0.5) * (n_src / n_out) - 0.5
        c = np.clip(c, 0.0, n_src - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, (c - lo).astype(np.float32)

    y0, y1, wy = axis_coords(out_h, h)
    x0, x1, wx = axis_coords(out_w, w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0[:, None], x0[None, :], :] * (1 - wx) + src[y0[:, None], x1[None, :], :] * wx
    bot = src[y1[:, None], x0[None, :], :] * (1 - wx) + src[y1[:, None], x1[None, :], :] * wx
    out = top * (1 - wy) + bot * wy
    if image.ndim == 2:
        out = out[:, :, 0]
    if was_uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def crop_with_margin(image: np.ndarray, box, margin: float = 50,
                     out_size: int = 256) -> np.ndarray:
    """Crop the margin-expanded box (clamped to the image) and resize."""
    h, w = image.shape[:2]
    x0, y0, rw, rh = expanded_region(box, margin, w, h)
    region = image[y0:y0 + rh, x0:x0 + rw]
    return bilinear_resize(region, out_size, out_size)


# ---------------------------------------------------------------------------
# corpus filtering
# ---------------------------------------------------------------------------

@dataclass
class FilterPolicy:
    min_confidence: float = 0.0  # 0: any detection counts, as in plain detect/no-detect
    min_box_size: int = 0
    margin: float = 50
    out_size: int = 256


@dataclass
class FilterReport:
    total: int = 0
    kept: int = 0
    rejected: int = 0
    reasons: dict = field(default_factory=lambda: {r: 0 for r in REJECT_REASONS})

    def reject(self, reason: str):
        self.total += 1
        self.rejected += 1
        self.reasons[reason] += 1

    def accept(self):
        self.total += 1
        self.kept += 1

    def as_dict(self) -> dict:
        return {"total": self.total, "kept": self.kept,
                "rejected": self.rejected, "reasons": dict(self.reasons)}

    def render(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


def _load_image(source):
    if isinstance(source, np.ndarray):
        img = source
    else:
        from PIL import Image

        with Image.open(source) as im:
            img = np.asarray(im.convert("RGB"))
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {img.shape}")
    return img


def filter_corpus(corpus, detections: dict, policy: FilterPolicy | None = None):
    """Crop every image with a qualifying detection; count the rest.

    ``corpus`` is an iterable of (image_id, source) pairs processed in the
    given order, where source is an RGB array or a path. ``detections`` maps
    image id to its DetectionRecord list. Returns (crops, FilterReport);
    out-of-bounds or too-small boxes count as ``undersized``, unreadable
    sources as ``decode_error``, and they never abort the batch.
    """
    policy = policy or FilterPolicy()
    report = FilterReport()
    crops = []
    for image_id, source in corpus:
        recs = [r for r in detections.get(image_id, ())
                if r.confidence >= policy.min_confidence]
        if not recs:
            report.reject("no_detection")
            continue
        best = max(recs, key=lambda r: r.confidence)
        if min(best.box[2], best.box[3]) < policy.min_box_size:
            report.reject("undersized")
            continue
        try:
            img = _load_image(source)
        except Exception:
            report.reject("decode_error")
            continue
        try:
            crop = crop_with_margin(img, best.box, policy.margin, policy.out_size)
        except CropError:
            report.reject("undersized")
            continue
        crops.append(crop)
        report.accept()
    return crops, report


# ---------------------------------------------------------------------------
# SGSHARD1 storage
# ---------------------------------------------------------------------------

SHARD_MAGIC = b"SGSHARD1"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<8sHHHBQ")  # magic, version, width, height, channels, count


def _write_one_shard(path: Path, images, width, height, channels):
    with open(path, "wb") as fh:
        fh.write(_SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION,
                                    width, height, channels, len(images)))
        for img in images:
            fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def write_shards(images, out_dir, shard_capacity: int = 1024) -> list[Path]:
    """Pack uint8 RGB images of one shape into numbered shard files.

    An empty input still produces one (zero-record) shard so readers have
    a well-formed target.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = list(images)
    if images:
        height, width, channels = images[0].shape
        for img in images:
            if img.shape != (height, width, channels):
                raise ShardFormatError(
                    f"shard records must share one shape; got {img.shape} "
                    f"after {(height, width, channels)}")
    else:
        height = width = 0
        channels = 3
    paths = []
    chunks = [images[i:i + shard_capacity]
              for i in range(0, len(images), shard_capacity)] or [[]]
    for i, chunk in enumerate(chunks):
        path = out_dir / f"shard-{i:05d}.sgshard"
        _write_one_shard(path, chunk, width, height, channels)
        paths.append(path)
    return paths


class ShardReader:
    """Sequential reader over one shard file or a directory of them.

    Each ``iter()`` opens an independent cursor; concurrent cursors do not
    share state.
    """

    def __init__(self, path):
        path = Path(path)
        if path.is_dir():
            self.files = sorted(path.glob("*.sgshard"))
            if not self.files:
                raise ShardFormatError(f"{path}: no .sgshard files")
        else:
            self.files = [path]
        self.headers = [self._read_header(p) for p in self.files]
        shapes = {(h["width"], h["height"], h["channels"]) for h in self.headers
                  if h["count"] > 0}
        if len(shapes) > 1:
            raise ShardFormatError(f"{path}: shards disagree on record shape: {shapes}")
        self.count = sum(h["count"] for h in self.headers)
        if shapes:
            self.width, self.height, self.channels = shapes.pop()
        else:
            first = self.headers[0]
            self.width, self.height, self.channels = (
                first["width"], first["height"], first["channels"])

    @staticmethod
    def _read_header(path: Path) -> dict:
        size = path.stat().st_size
        if size < _SHARD_HEADER.size:
            raise ShardFormatError(f"{path}: too short for a shard header")
        with open(path, "rb") as fh:
            magic, version, width, height, channels, count = _SHARD_HEADER.unpack(
                fh.read(_SHARD_HEADER.size))
        if magic != SHARD_MAGIC:
            raise ShardFormatError(f"{path}: bad magic {magic!r}")
        if version != SHARD_VERSION:
            raise ShardFormatError(f"{path}: unsupported version {version}")
        expected = _SHARD_HEADER.size + count * width * height * channels
        if size != expected:
            raise ShardCorruptionError(
                f"{path}: file length {size} != header-implied {expected}")
        return {"path": path, "width": width, "height": height,
                "channels": channels, "count": count}

    @property
    def record_shape(self):
        return (self.height, self.width, self.channels)

    def __len__(self):
        return self.count

    def __iter__(self):
        record = self.height * self.width * self.channels
        for head in self.headers:
            with open(head["path"], "rb") as fh:
                fh.seek(_SHARD_HEADER.size)
                for _ in range(head["count"]):
                    buf = fh.read(record)
                    yield np.frombuffer(buf, np.uint8).reshape(self.record_shape)


def read_shards(path) -> ShardReader:
    return ShardReader(path)


# ---------------------------------------------------------------------------
# toy corpus
# ---------------------------------------------------------------------------

TOY_ATTRIBUTES = ("face_large", "eyes_wide")

# all geometry is relative to the resolution; tests and attribute oracles
# read these numbers instead of hardcoding their own
TOY_GEOMETRY = {
    "head_rx_large": 0.40,
    "head_rx_small": 0.26,
    "head_ry_factor": 1.12,
    "eye_dx_wide": 0.55,     # times head rx
    "eye_dx_narrow": 0.26,
    "eye_dy": -0.35,         # times head ry
    "eye_r": 0.10,
    "mouth_dy": 0.42,        # times head ry
    "mouth_half_w": 0.45,    # times head rx
    "head_fill": 0.84,
    "dark_fill": 0.10,
    "bg_low": 0.38,
    "bg_high": 0.52,
}


@dataclass
class ToyDatasetSpec:
    resolution: int = 16
    count: int = 512
    seed: int = 0
    p_face_large: float = 0.5
    p_eyes_wide: float = 0.5

    def __post_init__(self):
        r = self.resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ValueError(f"toy resolution must be a power of two >= 8, got {r}")
        if self.count < 0:
            raise ValueError(f"toy count must be >= 0, got {self.count}")


def _draw_toy_face(rng, resolution: int, face_large: bool, eyes_wide: bool) -> np.ndarray:
    g = TOY_GEOMETRY
    r = resolution
    canvas = rng.uniform(g["bg_low"], g["bg_high"], (r, r, 1)).astype(np.float32)
    canvas = np.repeat(canvas, 3, axis=2)

    cy = cx = (r - 1) / 2.0
    rx = (g["head_rx_large"] if face_large else g["head_rx_small"]) * r
    ry = min(rx * g["head_ry_factor"], 0.46 * r)
    yy, xx = np.mgrid[0:r, 0:r]
    head = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    tint = rng.uniform(-0.04, 0.04, 3).astype(np.float32)
    canvas[head] = np.float32(g["head_fill"]) + tint

    eye_dx = (g["eye_dx_wide"] if eyes_wide else g["eye_dx_narrow"]) * rx
    eye_y = cy + g["eye_dy"] * ry
    eye_r = max(1.0, g["eye_r"] * r)
    for sx in (-1.0, 1.0):
        ex = cx + sx * eye_dx
        eye = (xx - ex) ** 2 + (yy - eye_y) ** 2 <= eye_r ** 2
        canvas[eye] = g["dark_fill"]

    mouth_y = cy + g["mouth_dy"] * ry
    half_w = g["mouth_half_w"] * rx
    mouth = (np.abs(xx - cx) <= half_w) & (np.abs(yy - mouth_y) <= max(0.5, r / 32))
    canvas[mouth] = g["dark_fill"] * 2.0

    return np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)


def toy_faces(spec: ToyDatasetSpec):
    """Generate the toy corpus in memory: (images (n,r,r,3) uint8, labels (n,2))."""
    rng = np.random.default_rng(spec.seed)
    images = np.empty((spec.count, spec.resolution, spec.resolution, 3), np.uint8)
    labels = np.empty((spec.count, 2), np.int64)
    for i in range(spec.count):
        face_large = rng.random() < spec.p_face_large
        eyes_wide = rng.random() < spec.p_eyes_wide
        images[i] = _draw_toy_face(rng, spec.resolution, face_large, eyes_wide)
        labels[i] = (int(face_large), int(eyes_wide))
    return images, labels


def write_labels(path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_index,attr_name,value\n")
        for i, row in enumerate(labels):
            for name, value in zip(TOY_ATTRIBUTES, row):
                fh.write(f"{i},{name},{int(value)}\n")


def read_labels(path) -> np.ndarray:
    table: dict[int, dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "sample_index,attr_name,value":
            raise ValueError(f"{path}: unexpected label header {header!r}")
        for line in fh:
            idx, name, value = line.strip().split(",")
            table.setdefault(int(idx), {})[name] = int(value)
    out = np.zeros((len(table), len(TOY_ATTRIBUTES)), np.int64)
    for i in range(len(table)):
        for j, name in enumerate(TOY_ATTRIBUTES):
            out[i, j] = table[i][name]
    return out


def synth_toy_dataset(spec: ToyDatasetSpec, out_dir, shard_capacity: int = 1024):
    """Write the toy corpus as shards plus a label CSV; fully seed-driven."""
    out_dir = Path(out_dir)
    images, labels = toy_faces(spec)
    shard_paths = write_shards(list(images), out_dir, shard_capacity)
    labels_path = out_dir / "labels.csv"
    write_labels(labels_path, labels)
    return shard_paths, labels_path


# ---------------------------------------------------------------------------
# built-in detector (reference stand-in for an external face detector)
# ---------------------------------------------------------------------------

DETECTOR_CONTRAST_MIN = 0.12
DETECTOR_MIN_AREA = 9


def heuristic_detector(image: np.ndarray, image_id: str = "") -> list[DetectionRecord]:
    """Detect the largest high-contrast connected blob.

    Returns one DetectionRecord whose box bounds the blob and whose
    confidence is the blob's fill ratio inside that box; blank or
    noise-only images yield no detections.
    """
    img = np.asarray(image)
    lum = img.astype(np.float32).mean(axis=2) / 255.0 if img.ndim == 3 \
        else img.astype(np.float32) / 255.0
    smooth = ndimage.uniform_filter(lum, size=3, mode="nearest")
    dev = np.abs(smooth - np.median(smooth))
    if dev.max() < DETECTOR_CONTRAST_MIN:
        return []
    mask = dev > DETECTOR_CONTRAST_MIN
    labeled, n = ndimage.label(mask, structure=np.ones((3, 3), np.int32))
    if n == 0:
        return []
    areas = ndimage.sum_labels(np.ones_like(labeled), labeled, range(1, n + 1))
    best = int(np.argmax(areas)) + 1
    if areas[best - 1] < DETECTOR_MIN_AREA:
        return []
    ys, xs = np.nonzero(labeled == best)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    w, h = x1 - x0 + 1, y1 - y0 + 1
    fill = float(areas[best - 1]) / float(w * h)
    return [DetectionRecord(image_id=image_id, box=(float(x0), float(y0), float(w), float(h)),
                            confidence=min(1.0, fill))]


def detect_corpus(corpus) -> dict[str, list[DetectionRecord]]:
    """Run the built-in detector over (image_id, source) pairs."""
    out: dict[str, list[DetectionRecord]] = {}
    for image_id, source in corpus:
        try:
            img = _load_image(source)
        except Exception:
            continue  # the filter will count it as no_detection/decode_error
        recs = heuristic_detector(img, image_id)
        if recs:
            out[image_id] = recs
    return out


# ---------------------------------------------------------------------------
# attribute measurement (the toy stand-in for annotated attributes)
# ---------------------------------------------------------------------------

def measure_head_radius(image01: np.ndarray) -> float:
    """Horizontal half-extent of the bright head blob, relative to width."""
    lum = image01.mean(axis=2) if image01.ndim == 3 else image01
    r = lum.shape[1]
    cols = np.nonzero((lum > 0.65).any(axis=0))[0]
    if cols.size == 0:
        return 0.0
    return float(cols.max() - cols.min() + 1) / (2.0 * r)


def measure_eye_spread(image01: np.ndarray) -> float:
    """Half-distance between the outer edges of dark pixels in the upper
    half of the image (where the eye dots sit), relative to width."""
    lum = image01.mean(axis=2) if image01.ndim == 3 else image01
    r = lum.shape[1]
    upper = lum[: r // 2]
    cols = np.nonzero((upper < 0.3).any(axis=0))[0]
    if cols.size == 0:
        return 0.0
    return float(cols.max() - cols.min() + 1) / (2.0 * r)


def _chw_to_unit01(images: np.ndarray) -> np.ndarray:
    """(n,3,h,w) in [-1,1] -> (n,h,w,3) in [0,1]."""
    x = (np.asarray(images, np.float32).transpose(0, 2, 3, 1) + 1.0) / 2.0
    return np.clip(x, 0.0, 1.0)


class ToyAttributeOracle:
    """Label generated images by measured geometry, with a confidence that
    grows with the distance from the decision threshold."""

    def __init__(self, name: str, measure, threshold: float, gap: float):
        self.name = name
        self.measure = measure
        self.threshold = threshold
        self.gap = gap

    def __call__(self, images: np.ndarray):
        unit = _chw_to_unit01(images)
        values = np.array([self.measure(img) for img in unit])
        labels = (values > self.threshold).astype(np.int64)
        conf = np.clip(np.abs(values - self.threshold) / self.gap, 0.0, 1.0)
        return labels, conf


def toy_attribute_oracles() -> list[ToyAttributeOracle]:
    g = TOY_GEOMETRY
    head_thr = (g["head_rx_large"] + g["head_rx_small"]) / 2.0
    head_gap = (g["head_rx_large"] - g["head_rx_small"]) / 2.0
    # eye spread includes the eye dot radius on both sides
    spread_wide = g["eye_dx_wide"] * g["head_rx_small"] + g["eye_r"]
    spread_narrow = g["eye_dx_narrow"] * g["head_rx_large"] + g["eye_r"]
    eye_thr = (spread_wide + spread_narrow) / 2.0
    eye_gap = max(1e-3, (spread_wide - spread_narrow) / 2.0)
    return [
        ToyAttributeOracle("face_large", measure_head_radius, head_thr, head_gap),
        ToyAttributeOracle("eyes_wide", measure_eye_spread, eye_thr, eye_gap),
    ]
