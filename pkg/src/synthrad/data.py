"""ChestX-ray14 style metadata parsing, prompt construction, splits and a toy dataset.

Supported CSV layouts (UTF-8, comma separated, quoted fields allowed):

* metadata: columns ``Image Index`` and ``Finding Labels``; labels are
  ``|``-delimited, e.g. ``Cardiomegaly|Edema``.  Other columns are ignored.
* bounding boxes: ``Image Index``, ``Finding Label`` followed by four numeric
  columns ``x, y, w, h`` in source pixels (the NIH file names the first of
  them ``Bbox [x`` and leaves the rest unnamed).

On-disk images are 8-bit grayscale; value 0 maps to -1 and 255 to +1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from synthrad.rng import Rng

DISEASES: tuple[str, ...] = (
    "No Finding",
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural Thickening",
    "Pneumonia",
    "Pneumothorax",
)
NO_FINDING = "No Finding"

# spellings used by the NIH release files
ALIASES = {"Pleural_Thickening": "Pleural Thickening", "Infiltrate": "Infiltration"}

ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
POSITIONS: tuple[str, ...] = tuple(
    "center" if (r, c) == ("middle", "center") else f"{r} {c}" for r in ROWS for c in COLS
)

DISEASE_TOKENS: tuple[str, ...] = tuple(d.lower() for d in DISEASES)


class DataError(ValueError):
    """Malformed or invalid input data."""


def canonical_disease(label: str) -> str | None:
    label = label.strip()
    label = ALIASES.get(label, label)
    for d in DISEASES:
        if label.lower() == d.lower():
            return d
    return None


@dataclass(frozen=True)
class MetadataRecord:
    image_id: str
    findings: tuple[str, ...]

    def __post_init__(self):
        if not self.findings:
            raise DataError(f"{self.image_id}: no findings")
        if NO_FINDING in self.findings and len(self.findings) > 1:
            raise DataError(f"{self.image_id}: 'No Finding' combined with other findings")


@dataclass(frozen=True)
class BBoxRecord:
    image_id: str
    finding: str
    x: float
    y: float
    w: float
    h: float
    width: int = 1024
    height: int = 1024

    def validate(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise DataError(f"{self.image_id}: box size must be positive, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > self.width or self.y + self.h > self.height:
            raise DataError(
                f"{self.image_id}: box ({self.x}, {self.y}, {self.w}, {self.h}) "
                f"outside a {self.width}x{self.height} image"
            )


@dataclass(frozen=True, eq=False)
class PromptedExample:
    image_id: str
    image: np.ndarray = field(repr=False)  # (H, W) float32 in [-1, 1]
    prompt: tuple[str, ...]

    @property
    def disease(self) -> str:
        """The first disease token of the prompt."""
        return next(t for t in self.prompt if t in DISEASE_TOKENS)


# ---------------------------------------------------------------------------
# CSV parsing


def _reader(stream: TextIO) -> tuple[csv.reader, list[str]]:
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty CSV: header row missing") from None
    return reader, header


def _column(header: list[str], name: str) -> int:
    try:
        return header.index(name)
    except ValueError:
        raise DataError(f"header lacks column {name!r}; found {header}") from None


def parse_metadata(stream: TextIO) -> list[MetadataRecord]:
    """Read ``Image Index`` / ``Finding Labels`` rows in file order."""
    reader, header = _reader(stream)
    id_col = _column(header, "Image Index")
    lab_col = _column(header, "Finding Labels")
    records = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) <= max(id_col, lab_col):
            raise DataError(f"line {line}: expected at least {max(id_col, lab_col) + 1} fields, got {len(row)}")
        image_id = row[id_col].strip()
        if not image_id:
            raise DataError(f"line {line}: empty image id")
        findings = []
        for raw in row[lab_col].split("|"):
            d = canonical_disease(raw)
            if d is None:
                raise DataError(f"line {line}: unknown finding {raw.strip()!r} for {image_id}")
            findings.append(d)
        try:
            records.append(MetadataRecord(image_id, tuple(findings)))
        except DataError as e:
            raise DataError(f"line {line}: {e}") from None
    return records


def write_metadata(records: Iterable[MetadataRecord], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["Image Index", "Finding Labels"])
    for r in records:
        w.writerow([r.image_id, "|".join(r.findings)])


def parse_bboxes(
    stream: TextIO, image_sizes: dict[str, tuple[int, int]] | None = None, default_size=(1024, 1024)
) -> list[BBoxRecord]:
    """Read bounding boxes; image (width, height) comes from ``image_sizes`` or ``default_size``."""
    reader, header = _reader(stream)
    id_col = _column(header, "Image Index")
    lab_col = _column(header, "Finding Label")
    first = max(id_col, lab_col) + 1
    out = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        try:
            x, y, w, h = (float(v) for v in row[first:first + 4])
        except ValueError:
            raise DataError(f"line {line}: expected four numeric box fields after the label") from None
        image_id = row[id_col].strip()
        finding = canonical_disease(row[lab_col])
        if finding is None:
            raise DataError(f"line {line}: unknown finding {row[lab_col].strip()!r}")
        width, height = (image_sizes or {}).get(image_id, default_size)
        box = BBoxRecord(image_id, finding, x, y, w, h, int(width), int(height))
        try:
            box.validate()
        except DataError as e:
            raise DataError(f"line {line}: {e}") from None
        out.append(box)
    return out


def write_bboxes(boxes: Iterable[BBoxRecord], stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["Image Index", "Finding Label", "x", "y", "w", "h"])
    for b in boxes:
        w.writerow([b.image_id, b.finding, repr(b.x), repr(b.y), repr(b.w), repr(b.h)])


# ---------------------------------------------------------------------------
# prompts


def prompt_from_findings(findings: Sequence[str], position: str | None = None) -> list[str]:
    """Canonical prompt: lowercase findings sorted, then the optional position token."""
    tokens = []
    for f in findings:
        d = canonical_disease(f)
        if d is None:
            raise DataError(f"unknown finding {f!r}")
        tokens.append(d.lower())
    if NO_FINDING.lower() in tokens and len(tokens) > 1:
        raise DataError("'No Finding' combined with other findings")
    tokens.sort()
    if position is not None:
        if position not in POSITIONS:
            raise DataError(f"unknown position {position!r}")
        tokens.append(position)
    return tokens


def _cell(coord2: Fraction, extent: int) -> int:
    # coord2 is twice the center coordinate; a center exactly on a third-line goes to the lower cell
    if coord2 * 3 <= 2 * extent:
        return 0
    if coord2 * 3 <= 4 * extent:
        return 1
    return 2


def position_phrase(box: BBoxRecord) -> str:
    """Name the 3x3 grid cell that holds the box center, e.g. ``"top left"``."""
    box.validate()
    cx2 = 2 * Fraction(box.x) + Fraction(box.w)
    cy2 = 2 * Fraction(box.y) + Fraction(box.h)
    return POSITIONS[3 * _cell(cy2, box.height) + _cell(cx2, box.width)]


def prompt_filename(image_id: str, prompt: Sequence[str], ext: str = "pgm") -> str:
    """``<id>__<tokens>.<ext>`` with tokens joined by ``_`` and inner spaces as ``-``."""
    return f"{image_id}__{'_'.join(t.replace(' ', '-') for t in prompt)}.{ext}"


def prompt_from_filename(name: str) -> tuple[str, list[str]]:
    stem = Path(name).stem
    image_id, sep, tail = stem.rpartition("__")
    if not sep:
        raise DataError(f"{name}: no '__' separator between id and prompt")
    return image_id, [t.replace("-", " ") for t in tail.split("_")]


# ---------------------------------------------------------------------------
# splits


class Partition(Sequence):
    """Read-only list of items tagged as the train or test side of a split."""

    def __init__(self, items: Iterable, role: str):
        if role not in ("train", "test"):
            raise ValueError(f"unknown partition role {role!r}")
        self._items = tuple(items)
        self.role = role

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"Partition({self.role}, n={len(self)})"

    def ids(self) -> set[str]:
        return {item.image_id for item in self._items}


def require_train(data) -> Partition:
    """Training code calls this so test partitions can never reach an optimiser."""
    if not isinstance(data, Partition):
        raise TypeError(f"training data must be a train Partition, got {type(data).__name__}")
    if data.role != "train":
        raise ValueError("refusing to train on the test partition")
    return data


def split_train_test(
    records: Sequence, ratio: float = 0.8, seed: int = 0, test_ids: Iterable[str] | None = None
) -> tuple[Partition, Partition]:
    """Split by a test-id manifest when given, else by a seeded shuffle keeping ``ratio`` for training."""
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate image ids in records")
    if test_ids is not None:
        wanted = list(dict.fromkeys(test_ids))
        missing = sorted(set(wanted) - set(ids))
        if missing:
            raise DataError(f"split manifest lists unknown ids: {missing[:5]}")
        held = set(wanted)
        train = [r for r in records if r.image_id not in held]
        test = [r for r in records if r.image_id in held]
    else:
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"train ratio must be in [0, 1], got {ratio}")
        perm = Rng(seed, 0x5A17).permutation(len(records))
        n_train = int(round(ratio * len(records)))
        keep = set(perm[:n_train].tolist())
        train = [r for i, r in enumerate(records) if i in keep]
        test = [r for i, r in enumerate(records) if i not in keep]
    tr, te = Partition(train, "train"), Partition(test, "test")
    if tr.ids() & te.ids():
        raise DataError("train and test partitions overlap")
    return tr, te


def read_manifest(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


# ---------------------------------------------------------------------------
# images


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(px: np.ndarray) -> np.ndarray:
    return (px.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def write_pgm(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {px.shape}")
    h, w = px.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_png(path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def load_prepared(directory) -> list[PromptedExample]:
    """Load a directory written by ``prepare-data``, sorted by image id."""
    directory = Path(directory)
    out = []
    for path in sorted(directory.glob("*.pgm")) + sorted(directory.glob("*.png")):
        image_id, prompt = prompt_from_filename(path.name)
        out.append(PromptedExample(image_id, from_uint8(read_image(path)), tuple(prompt)))
    if not out:
        raise DataError(f"{directory}: no .pgm or .png images found")
    return sorted(out, key=lambda e: e.image_id)


# ---------------------------------------------------------------------------
# procedural toy dataset

SHAPES = ("disk", "bar", "ring")


@dataclass(frozen=True)
class ToyDatasetSpec:
    resolution: int = 28
    classes: tuple[str, ...] = ("no finding", "edema", "cardiomegaly", "nodule")
    samples_per_class: int = 64
    positions: bool = True
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.resolution not in (16, 28, 32, 64):
            raise DataError(f"toy resolution must be 16, 28, 32 or 64, got {self.resolution}")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be >= 1")
        for c in self.classes:
            if c not in DISEASE_TOKENS:
                raise DataError(f"toy class {c!r} is not a disease token")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("toy classes repeat")


def _shape_mask(kind: str, res: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    dy, dx = yy - cy, xx - cx
    d2 = dy * dy + dx * dx
    if kind == "disk":
        return d2 <= r * r
    if kind == "ring":
        return (d2 <= r * r) & (d2 >= (r - 1.5) ** 2)
    if kind == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= max(1, r // 3))
    raise ValueError(kind)


def _pick(rng: Rng, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1, 1)[0])


def generate_toy_dataset(spec: ToyDatasetSpec) -> tuple[list[PromptedExample], list[BBoxRecord]]:
    """Low-amplitude noise images; each disease class adds one shape (disk, bar, ring, ...).

    The shape kind cycles through ``SHAPES`` in class order, skipping "no finding".
    """
    res = spec.resolution
    r = max(2, res // 7)
    third = res / 3
    examples, boxes = [], []
    disease_classes = [c for c in spec.classes if c != "no finding"]
    idx = 0
    for ci, cls in enumerate(spec.classes):
        for k in range(spec.samples_per_class):
            rng = Rng(spec.seed, ci, k)
            image_id = f"toy{idx:05d}"
            idx += 1
            img = -0.7 + spec.noise * rng.normal((res, res), dtype=np.float64)
            if cls == "no finding":
                prompt = prompt_from_findings([cls])
            else:
                kind = SHAPES[disease_classes.index(cls) % len(SHAPES)]
                if spec.positions:
                    row, col = (int(v) for v in rng.integers(0, 3, 2))
                    cy = _pick(rng, max(r, int(np.ceil(row * third))), min(res - 1 - r, int(np.ceil((row + 1) * third)) - 1))
                    cx = _pick(rng, max(r, int(np.ceil(col * third))), min(res - 1 - r, int(np.ceil((col + 1) * third)) - 1))
                else:
                    cy, cx = _pick(rng, r, res - 1 - r), _pick(rng, r, res - 1 - r)
                mask = _shape_mask(kind, res, cy, cx, r)
                img[mask] = 0.6 + spec.noise * rng.normal(int(mask.sum()), dtype=np.float64)
                ys, xs = np.nonzero(mask)
                box = BBoxRecord(
                    image_id, canonical_disease(cls), float(xs.min()), float(ys.min()),
                    float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1), res, res,
                )
                boxes.append(box)
                prompt = prompt_from_findings([cls], position_phrase(box) if spec.positions else None)
            examples.append(PromptedExample(image_id, from_uint8(to_uint8(img)), tuple(prompt)))
    return examples, boxes


def batches(items: Sequence, size: int) -> Iterator[list]:
    for i in range(0, len(items), size):
        yield list(items[i:i + size])


def dataset_bytes(examples: Sequence[PromptedExample]) -> bytes:
    """Stable byte serialisation of a dataset, for determinism checks."""
    buf = io.BytesIO()
    for e in examples:
        buf.write(e.image_id.encode() + b"\0" + "|".join(e.prompt).encode() + b"\0")
        buf.write(to_uint8(e.image).tobytes())
    return buf.getvalue()
