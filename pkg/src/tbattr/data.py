"""Mixed-supervision chest X-ray data model and synthetic stand-in generator.

A manifest is line-delimited JSON, one record per line, with keys exactly
`image_path`, `width`, `height`, `split`, `label`, `attributes`, `boxes`.
Coordinates are pixels, origin top-left, x rightward, y downward, corner
boxes [x_min, y_min, x_max, y_max] end-exclusive.

Records mix two kinds of supervision: image-level attribute bit vectors and
lesion bounding boxes.  Either may be null; healthy / sick-but-non-TB records
with an empty (non-null) box list act as detection negatives.

Synthetic generator rule
------------------------
Each attribute index ``i`` owns one lesion appearance, a fixed combination of
radius class, peak intensity class, and disc-vs-ring shape (see
:func:`lesion_kind`).  A ``tb`` image contains one bright lesion per active
attribute bit, placed without overlap on a dim noisy background, and each box
is the exact bounding box of that lesion's rendered support.  ``healthy``
images are pure background; ``sick_non_tb`` images carry a dark smudge and no
boxes.  Generation is a pure function of the arguments: identical inputs
produce byte-identical images and manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import EmptyManifest, InvalidSize, MalformedRecord, MissingFile

LABELS = ("healthy", "sick_non_tb", "tb")
SPLITS = ("train", "val")

MANIFEST_KEYS = ("image_path", "width", "height", "split", "label", "attributes", "boxes")


@dataclass
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    category: str = "tb"

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return max(0.0, self.width) * max(0.0, self.height)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class XrayRecord:
    image_path: str
    width: int
    height: int
    split: str
    label: str
    attributes: list | None = None
    boxes: list | None = None

    @property
    def has_attributes(self):
        return self.attributes is not None

    @property
    def det_supervised(self):
        """True when the record supervises the detection branch."""
        return self.boxes is not None or self.label != "tb"


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    n_attributes: int = 7

    def split_counts(self):
        counts = {split: 0 for split in SPLITS}
        for record in self.records:
            counts[record.split] += 1
        return counts

    def records_in(self, split):
        return [r for r in self.records if r.split == split]


def validate_record(record, n_attributes):
    """Return the list of violated invariants (empty means the record is ok)."""
    violations = []
    if record.width <= 0 or record.height <= 0:
        violations.append("non-positive image dimensions")
    if record.split not in SPLITS:
        violations.append(f"unknown split {record.split!r}")
    if record.label not in LABELS:
        violations.append(f"unknown label {record.label!r}")
    if record.attributes is not None:
        if len(record.attributes) != n_attributes:
            violations.append(
                f"attributes length {len(record.attributes)} != {n_attributes}"
            )
        if any(v not in (0, 1) for v in record.attributes):
            violations.append("attribute entries must be 0 or 1")
    if record.boxes is not None:
        for i, box in enumerate(record.boxes):
            if box.x_min >= box.x_max or box.y_min >= box.y_max:
                violations.append(f"degenerate box {i}")
            if (
                box.x_min < 0
                or box.y_min < 0
                or box.x_max > record.width
                or box.y_max > record.height
            ):
                violations.append(f"box {i} outside image extent")
            if box.category != "tb":
                violations.append(f"box {i} has unknown category {box.category!r}")
        if record.label in ("healthy", "sick_non_tb") and record.boxes:
            violations.append(f"{record.label} record has boxes")
    if record.label == "tb" and record.attributes is None and record.boxes is None:
        violations.append("record provides no supervision")
    return violations


def _record_to_json(record):
    return {
        "image_path": record.image_path,
        "width": record.width,
        "height": record.height,
        "split": record.split,
        "label": record.label,
        "attributes": None if record.attributes is None else list(record.attributes),
        "boxes": None if record.boxes is None else [b.as_list() for b in record.boxes],
    }


def _record_from_json(obj, lineno):
    if not isinstance(obj, dict):
        raise MalformedRecord("record is not a JSON object", lineno)
    if set(obj.keys()) != set(MANIFEST_KEYS):
        raise MalformedRecord(
            f"keys {sorted(obj.keys())} != expected {sorted(MANIFEST_KEYS)}", lineno
        )
    boxes = obj["boxes"]
    if boxes is not None:
        try:
            boxes = [BoundingBox(*[float(v) for v in box]) for box in boxes]
        except (TypeError, ValueError) as exc:
            raise MalformedRecord(f"bad box entry: {exc}", lineno) from None
    attributes = obj["attributes"]
    if attributes is not None:
        attributes = list(attributes)
    try:
        return XrayRecord(
            image_path=str(obj["image_path"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            split=str(obj["split"]),
            label=str(obj["label"]),
            attributes=attributes,
            boxes=boxes,
        )
    except (TypeError, ValueError) as exc:
        raise MalformedRecord(f"bad field: {exc}", lineno) from None


def save_manifest(manifest, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in manifest.records:
            fh.write(json.dumps(_record_to_json(record)) + "\n")


def load_manifest(path, n_attributes=None, require_both_splits=True):
    """Load and validate a line-delimited JSON manifest.

    `n_attributes` defaults to the length of the first non-null attribute
    vector encountered.
    """
    if not os.path.exists(path):
        raise MissingFile(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"invalid JSON: {exc}", lineno) from None
            records.append((lineno, _record_from_json(obj, lineno)))
    if not records:
        raise EmptyManifest(f"no records in {path}")
    if n_attributes is None:
        n_attributes = next(
            (len(r.attributes) for _, r in records if r.attributes is not None), 7
        )
    for lineno, record in records:
        violations = validate_record(record, n_attributes)
        if violations:
            raise MalformedRecord("; ".join(violations), lineno)
    manifest = DatasetManifest(records=[r for _, r in records], n_attributes=n_attributes)
    if require_both_splits:
        counts = manifest.split_counts()
        for split in SPLITS:
            if counts[split] == 0:
                raise EmptyManifest(f"manifest has no records in split {split!r}")
    return manifest


def load_image(path):
    """Read a single-channel PNG as float32 in [0, 1], shape (H, W)."""
    if not os.path.exists(path):
        raise MissingFile(f"image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


# --- synthetic generator ---------------------------------------------------

_RADIUS_FRACS = (0.07, 0.10, 0.14)
_INTENSITIES = (150, 195, 240)


def lesion_kind(index):
    """Appearance signature owned by attribute `index`.

    Returns (radius_class, intensity_class, ring); distinct for index < 18.
    """
    return index % 3, (index // 3) % 3, index % 2 == 1


def _render_lesion(image, cy, cx, radius, intensity, ring):
    """Draw one lesion; return its support bounding box [x0, y0, x1, y1]."""
    h, w = image.shape
    yy, xx = np.ogrid[:h, :w]
    rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if ring:
        support = (rr <= radius) & (rr >= 0.45 * radius)
    else:
        support = rr <= radius
    shade = np.clip(1.0 - 0.4 * (rr / max(radius, 1.0)) ** 2, 0.0, 1.0)
    image[support] = np.maximum(image[support], intensity * shade[support])
    ys, xs = np.nonzero(support)
    return [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]


def _render_smudge(image, rng, size):
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    sigma = rng.uniform(0.08, 0.15) * size
    yy, xx = np.ogrid[: size, : size]
    dip = 14.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    np.clip(image - dip, 0, 255, out=image)


def synthesize_dataset(
    out_dir,
    seed=0,
    n_records=16,
    image_size=64,
    n_attributes=7,
    attr_only_fraction=0.3,
    box_only_fraction=0.3,
):
    """Generate a deterministic synthetic corpus under `out_dir`.

    Writes 8-bit single-channel PNGs under `out_dir/images/` and the manifest
    to `out_dir/manifest.jsonl`.  Supervision masking (attribute-only /
    box-only) applies to train records; val records keep both label kinds so
    every metric stays computable.
    """
    if image_size % 32 != 0 or image_size <= 0:
        raise InvalidSize(f"image_size must be a positive multiple of 32, got {image_size}")
    if n_records < 2:
        raise ValueError("n_records must be at least 2")
    if attr_only_fraction + box_only_fraction > 1.0:
        raise ValueError("masking fractions must sum to at most 1")

    rng = np.random.default_rng(seed)
    size = image_size

    # Label composition: half tb, remainder split between the negatives.
    n_tb = max(1, int(round(0.5 * n_records)))
    n_healthy = (n_records - n_tb + 1) // 2
    labels = ["tb"] * n_tb + ["healthy"] * n_healthy
    labels += ["sick_non_tb"] * (n_records - len(labels))
    labels = [labels[i] for i in rng.permutation(n_records)]

    # Stratified split with a fix-up so both splits are nonempty.
    splits = ["train"] * n_records
    for label in LABELS:
        idxs = [i for i, lab in enumerate(labels) if lab == label]
        if len(idxs) >= 2:
            n_val = max(1, int(round(0.2 * len(idxs))))
            chosen = rng.permutation(len(idxs))[:n_val]
            for j in chosen:
                splits[idxs[j]] = "val"
    if "val" not in splits:
        splits[int(rng.integers(n_records))] = "val"
    if "train" not in splits:
        splits[int(rng.integers(n_records))] = "train"

    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    records = []
    for idx in range(n_records):
        label, split = labels[idx], splits[idx]
        image = np.clip(rng.normal(20.0, 5.0, size=(size, size)), 0, 48)
        boxes = []
        attributes = [0] * n_attributes
        if label == "tb":
            n_lesions = int(rng.integers(1, min(3, n_attributes) + 1))
            kinds = rng.permutation(n_attributes)[:n_lesions]
            placed = []
            for kind in kinds:
                radius_class, intensity_class, ring = lesion_kind(int(kind))
                radius = _RADIUS_FRACS[radius_class] * size
                for _ in range(60):
                    cy = rng.uniform(radius + 2, size - radius - 2)
                    cx = rng.uniform(radius + 2, size - radius - 2)
                    if all(
                        np.hypot(cy - py, cx - px) >= radius + pr + 3
                        for py, px, pr in placed
                    ):
                        box = _render_lesion(
                            image, cy, cx, radius, _INTENSITIES[intensity_class], ring
                        )
                        boxes.append(BoundingBox(*box))
                        placed.append((cy, cx, radius))
                        attributes[int(kind)] = 1
                        break
            if not boxes:  # pathological size/attribute combo; keep one lesion
                radius = _RADIUS_FRACS[0] * size
                box = _render_lesion(
                    image, size / 2, size / 2, radius, _INTENSITIES[0], False
                )
                boxes.append(BoundingBox(*box))
                attributes[0] = 1
        elif label == "sick_non_tb":
            _render_smudge(image, rng, size)

        rel_path = os.path.join("images", f"img_{idx:05d}.png")
        Image.fromarray(image.astype(np.uint8), mode="L").save(
            os.path.join(out_dir, rel_path), format="PNG"
        )

        attrs, box_list = attributes, boxes
        if split == "train":
            draw = rng.random()
            if draw < attr_only_fraction:
                box_list = None
            elif draw < attr_only_fraction + box_only_fraction:
                attrs = None
        records.append(
            XrayRecord(
                image_path=rel_path,
                width=size,
                height=size,
                split=split,
                label=label,
                attributes=attrs,
                boxes=box_list,
            )
        )

    manifest = DatasetManifest(records=records, n_attributes=n_attributes)
    save_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest


def dataset_digest(out_dir):
    """SHA-256 over the manifest and every image, in sorted path order."""
    digest = hashlib.sha256()
    paths = [os.path.join(out_dir, "manifest.jsonl")]
    image_dir = os.path.join(out_dir, "images")
    if os.path.isdir(image_dir):
        paths += sorted(
            os.path.join(image_dir, name) for name in os.listdir(image_dir)
        )
    for path in paths:
        with open(path, "rb") as fh:
            digest.update(os.path.basename(path).encode())
            digest.update(fh.read())
    return digest.hexdigest()
