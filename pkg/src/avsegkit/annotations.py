"""COCO-style annotation parsing and mask rasterization.

Masks arrive either as uncompressed run-length counts or as polygon vertex
lists. Run-length counts are interpreted row-major and always start with a
background run (a mask whose first pixel is foreground starts with a zero
count). Polygon interiors are resolved at pixel centers, i.e. pixel (i, j)
is foreground when the point (j + 0.5, i + 0.5) lies inside the polygon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

BACKGROUND_ID = 0


class AnnotationError(ValueError):
    """Raised for malformed documents, encodings, or unknown ids.

    ``offset`` carries the byte offset for document-level parse failures.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# ---------------------------------------------------------------------------
# class table


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    visual_label: str
    audio_tags: tuple[str, ...]


class ClassTable:
    """Visual classes with their associated audio tag vocabulary.

    Class ids are unique and contiguous starting at 1; id 0 is reserved for
    background and never appears as an entry. Every entry carries at least
    one audio tag.
    """

    def __init__(self, entries: Iterable[ClassEntry]):
        entries = tuple(sorted(entries, key=lambda e: e.class_id))
        ids = [e.class_id for e in entries]
        if not entries:
            raise AnnotationError("class table is empty")
        if ids != list(range(1, len(entries) + 1)):
            raise AnnotationError(
                f"class ids must be unique and contiguous from 1, got {ids}"
            )
        labels = [e.visual_label for e in entries]
        if len(set(labels)) != len(labels):
            raise AnnotationError("duplicate visual labels in class table")
        for e in entries:
            if not e.audio_tags:
                raise AnnotationError(
                    f"class {e.class_id} ({e.visual_label}) has no audio tags"
                )
        self.entries = entries
        self._by_id = {e.class_id: e for e in entries}
        self._by_label = {e.visual_label: e for e in entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._by_id

    def __getitem__(self, class_id: int) -> ClassEntry:
        try:
            return self._by_id[class_id]
        except KeyError:
            raise AnnotationError(f"unknown class id {class_id}") from None

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries)

    @property
    def num_classes_with_background(self) -> int:
        return len(self.entries) + 1

    def by_label(self, label: str) -> ClassEntry:
        try:
            return self._by_label[label]
        except KeyError:
            raise AnnotationError(f"unknown visual label {label!r}") from None

    def audio_tags(self, class_id: int) -> tuple[str, ...]:
        return self[class_id].audio_tags

    def all_audio_tags(self) -> frozenset[str]:
        return frozenset(t for e in self.entries for t in e.audio_tags)

    # tabular form: one row per class, audio tags joined with ';'
    # (tags may contain commas, so the join character is a semicolon)
    @classmethod
    def from_table_text(cls, text: str) -> "ClassTable":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise AnnotationError(
                    f"class table line {lineno}: expected 3 tab-separated "
                    f"fields, got {len(parts)}"
                )
            id_text, label, tags_text = parts
            try:
                class_id = int(id_text)
            except ValueError:
                raise AnnotationError(
                    f"class table line {lineno}: bad class id {id_text!r}"
                ) from None
            tags = tuple(t.strip() for t in tags_text.split(";") if t.strip())
            entries.append(ClassEntry(class_id, label.strip(), tags))
        return cls(entries)

    def to_table_text(self) -> str:
        lines = ["# class_id\tvisual_label\taudio_tags (';'-joined)"]
        for e in self.entries:
            lines.append(f"{e.class_id}\t{e.visual_label}\t{';'.join(e.audio_tags)}")
        return "\n".join(lines) + "\n"


_DEFAULT_TABLE_ROWS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("bird", ("mynah bird singing",)),
    ("keyboard", ("typing on computer keyboard",)),
    ("bus", ("driving buses",)),
    ("cat", ("cat purring", "cat meowing", "cat caterwauling")),
    (
        "dog",
        (
            "dog growling",
            "dog bow-wow",
            "dog whimpering",
            "dog howling",
            "dog barking",
            "dog baying",
        ),
    ),
    ("horse", ("horse neighing", "horse clip-clop")),
    (
        "car",
        (
            "car passing by",
            "car engine idling",
            "car engine starting",
            "race car, auto racing",
            "car engine knocking",
        ),
    ),
    ("sports ball", ("shot football",)),
    ("airplane", ("airplane", "airplane flyby")),
    ("sheep", ("sheep bleating",)),
    ("cow", ("cow lowing",)),
    ("motorcycle", ("driving motorcycle",)),
    ("mouse", ("mouse clicking",)),
    ("cell phone", ("cell phone buzzing",)),
    ("elephant", ("elephant trumpeting",)),
    ("zebra", ("zebra braying",)),
    ("tennis racket", ("playing tennis",)),
    ("skateboard", ("skateboarding",)),
    ("male", ("male speech, man speaking", "male singing")),
    ("female", ("female speech, woman speaking",)),
    ("baby", ("baby babbling", "baby crying", "baby laughter")),
)


def default_class_table() -> ClassTable:
    """The built-in 21-class table mapping visual labels to audio tags."""
    return ClassTable(
        ClassEntry(i, label, tags)
        for i, (label, tags) in enumerate(_DEFAULT_TABLE_ROWS, start=1)
    )


# ---------------------------------------------------------------------------
# mask encodings


def decode_rle(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    """Decode row-major run-length counts into a boolean raster.

    Counts alternate background/foreground and start with background; they
    must sum to exactly height * width.
    """
    total = height * width
    counts = list(counts)
    if any((not isinstance(c, int)) or c < 0 for c in counts):
        raise AnnotationError(f"run lengths must be non-negative integers: {counts}")
    if sum(counts) != total:
        raise AnnotationError(
            f"run lengths sum to {sum(counts)}, expected {total} for "
            f"{height}x{width}"
        )
    flat = np.zeros(total, dtype=bool)
    pos = 0
    for i, run in enumerate(counts):
        if i % 2 == 1:
            flat[pos : pos + run] = True
        pos += run
    raster = flat.reshape(height, width)
    raster.flags.writeable = False
    return raster


def encode_rle(raster: np.ndarray) -> tuple[int, ...]:
    """Inverse of :func:`decode_rle` (row-major, background first)."""
    flat = np.asarray(raster, dtype=bool).ravel()
    counts: list[int] = []
    current = False  # encoding starts with a background run
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = v
            run = 1
    counts.append(run)
    return tuple(counts)


def _fill_ring(ring: Sequence[float], height: int, width: int) -> np.ndarray:
    xs = np.asarray(ring[0::2], dtype=np.float64)
    ys = np.asarray(ring[1::2], dtype=np.float64)
    if xs.size < 3:
        raise AnnotationError(f"polygon ring needs >= 3 vertices, got {xs.size}")
    x1, y1 = xs, ys
    x2, y2 = np.roll(xs, -1), np.roll(ys, -1)
    raster = np.zeros((height, width), dtype=bool)
    col_centers = np.arange(width) + 0.5
    for i in range(height):
        yc = i + 0.5
        # half-open vertical span avoids double counting shared vertices
        active = ((y1 <= yc) & (yc < y2)) | ((y2 <= yc) & (yc < y1))
        if not active.any():
            continue
        t = (yc - y1[active]) / (y2[active] - y1[active])
        crossings = np.sort(x1[active] + t * (x2[active] - x1[active]))
        for a, b in zip(crossings[0::2], crossings[1::2]):
            raster[i] |= (col_centers >= a) & (col_centers < b)
    return raster


def decode_polygon(
    rings: Sequence[Sequence[float]], height: int, width: int
) -> np.ndarray:
    """Rasterize a union of polygon rings at pixel centers (even-odd per ring)."""
    raster = np.zeros((height, width), dtype=bool)
    for ring in rings:
        if len(ring) % 2 != 0:
            raise AnnotationError(
                f"polygon ring has odd coordinate count {len(ring)}"
            )
        raster |= _fill_ring(ring, height, width)
    if not raster.any():
        raise AnnotationError("polygon rasterizes to an empty mask")
    raster.flags.writeable = False
    return raster


def center_of_mass(raster: np.ndarray) -> tuple[float, float]:
    """Mean foreground coordinate (row, col) using pixel centers (+0.5).

    Under horizontal flip the column component maps to ``width - col``.
    """
    rows, cols = np.nonzero(raster)
    if rows.size == 0:
        raise AnnotationError("center of mass of an empty mask is undefined")
    return float(rows.mean() + 0.5), float(cols.mean() + 0.5)


# ---------------------------------------------------------------------------
# samples


@dataclass
class InstanceMask:
    """One annotated object: class plus a lazily decoded mask encoding."""

    instance_id: int
    class_id: int
    kind: str  # 'rle' | 'polygon'
    encoding: tuple
    _decoded: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("rle", "polygon"):
            raise AnnotationError(f"unknown mask encoding kind {self.kind!r}")

    def decode(self, height: int, width: int) -> np.ndarray:
        if self._decoded is None:
            if self.kind == "rle":
                self._decoded = decode_rle(self.encoding, height, width)
            else:
                self._decoded = decode_polygon(self.encoding, height, width)
        if self._decoded.shape != (height, width):
            raise AnnotationError(
                f"instance {self.instance_id}: decode shape {self._decoded.shape} "
                f"does not match requested {(height, width)}"
            )
        return self._decoded


@dataclass
class SceneSample:
    """One image with its instances, ordered by instance id."""

    image_id: int
    width: int
    height: int
    instances: tuple[InstanceMask, ...]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(
                f"image {self.image_id}: non-positive size "
                f"{self.width}x{self.height}"
            )
        self.instances = tuple(
            sorted(self.instances, key=lambda m: m.instance_id)
        )
        for m in self.instances:
            if m.kind == "rle":
                counts = m.encoding
                if sum(counts) != self.height * self.width:
                    raise AnnotationError(
                        f"instance {m.instance_id}: run lengths sum to "
                        f"{sum(counts)}, expected {self.height * self.width}"
                    )
                # odd-position runs are foreground; all-off masks are invalid
                if sum(counts[1::2]) == 0:
                    raise AnnotationError(
                        f"instance {m.instance_id}: mask has no foreground pixels"
                    )

    @property
    def distinct_classes(self) -> frozenset[int]:
        return frozenset(m.class_id for m in self.instances)

    @property
    def single_class(self) -> bool:
        """True when all instances share one class (needed for priority scoring)."""
        return len(self.distinct_classes) == 1 and len(self.instances) >= 1

    @property
    def has_duplicate_class(self) -> bool:
        return len(self.instances) > len(self.distinct_classes)

    def class_count(self, class_id: int) -> int:
        return sum(1 for m in self.instances if m.class_id == class_id)


# ---------------------------------------------------------------------------
# document io


def _segmentation_fields(seg) -> tuple[str, tuple]:
    if isinstance(seg, Mapping):
        counts = seg.get("counts")
        if not isinstance(counts, list):
            raise AnnotationError(
                "run-length segmentation must carry an uncompressed counts list"
            )
        return "rle", tuple(counts)
    if isinstance(seg, list):
        return "polygon", tuple(tuple(ring) for ring in seg)
    raise AnnotationError(f"unsupported segmentation payload {type(seg).__name__}")


def parse_annotations(
    data: bytes,
    table: ClassTable | None = None,
    counters: dict | None = None,
) -> list[SceneSample]:
    """Parse a COCO-style document into scene samples sorted by image id.

    Crowd-flagged annotations are skipped; the skip count is recorded under
    ``counters['crowd_skipped']`` when a counters dict is supplied. Images
    with an empty annotation list are retained with zero instances.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise AnnotationError("document is not valid UTF-8", offset=exc.start)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed document: {exc.msg}", offset=exc.pos)

    if not isinstance(doc, dict):
        raise AnnotationError("top-level document must be an object")
    for key in ("images", "annotations"):
        if key not in doc:
            raise AnnotationError(f"document missing {key!r} section")

    doc_categories = doc.get("categories")
    if doc_categories is not None:
        known_ids = {c["id"] for c in doc_categories}
        if table is not None:
            foreign = sorted(known_ids - set(table.class_ids))
            if foreign:
                raise AnnotationError(
                    f"category ids not present in class table: {foreign}"
                )
    elif table is not None:
        known_ids = set(table.class_ids)
    else:
        known_ids = None

    images: dict[int, tuple[int, int]] = {}
    for img in doc["images"]:
        try:
            images[int(img["id"])] = (int(img["width"]), int(img["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"bad image record {img!r}: {exc}") from None

    crowd_skipped = 0
    per_image: dict[int, list[InstanceMask]] = {i: [] for i in images}
    for ann in doc["annotations"]:
        image_id = int(ann["image_id"])
        if image_id not in images:
            raise AnnotationError(
                f"annotation {ann.get('id')} references unknown image {image_id}"
            )
        if ann.get("iscrowd", 0):
            crowd_skipped += 1
            continue
        class_id = int(ann["category_id"])
        if known_ids is not None and class_id not in known_ids:
            raise AnnotationError(f"unknown category id {class_id}")
        kind, encoding = _segmentation_fields(ann["segmentation"])
        per_image[image_id].append(
            InstanceMask(int(ann["id"]), class_id, kind, encoding)
        )

    if counters is not None:
        counters["crowd_skipped"] = counters.get("crowd_skipped", 0) + crowd_skipped

    samples = []
    for image_id in sorted(images):
        width, height = images[image_id]
        samples.append(
            SceneSample(image_id, width, height, tuple(per_image[image_id]))
        )
    return samples


def serialize_annotations(
    samples: Sequence[SceneSample], table: ClassTable | None = None
) -> bytes:
    """Canonical COCO-style serialization; mask encodings survive byte-exactly."""
    images = [
        {"id": s.image_id, "width": s.width, "height": s.height} for s in samples
    ]
    annotations = []
    for s in samples:
        for m in s.instances:
            if m.kind == "rle":
                seg = {"size": [s.height, s.width], "counts": list(m.encoding)}
            else:
                seg = [list(ring) for ring in m.encoding]
            annotations.append(
                {
                    "id": m.instance_id,
                    "image_id": s.image_id,
                    "category_id": m.class_id,
                    "iscrowd": 0,
                    "segmentation": seg,
                }
            )
    doc: dict = {"images": images, "annotations": annotations}
    if table is not None:
        doc["categories"] = [
            {"id": e.class_id, "name": e.visual_label} for e in table.entries
        ]
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
