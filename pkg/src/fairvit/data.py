"""Synthetic biased datasets, manifest ingestion, augmentation and splitting.

Synthetic images carry three kinds of structure:

* a local cue: a small high-frequency checkerboard patch at a random
  position whose contrast is ``u_local``;
* a global cue: an image-wide vertical luminance ramp (left/right
  symmetric) whose amplitude is ``u_global``;
* an attribute marker: a per-group background tint.

The score is ``1 + 4 * clip(w_l*u_local + w_g*u_global + offset*z + noise, 0, 1)``,
so ``group_offset > 0`` ties the score to the marker and makes a naive model
encode the attribute.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .imaging import read_image, resize_bilinear, save_image

SPLITS = ("train", "val", "test")
ATTR_PREFIX = {"A": 0, "C": 1}
PREFIX_OF_ATTR = {v: k for k, v in ATTR_PREFIX.items()}

# per-group background tints (RGB)
_TINTS = np.array([[0.38, 0.46, 0.58], [0.58, 0.46, 0.38]])
_PIXEL_NOISE = 0.02
_CUE_CONTRAST = 0.25


class DataError(ValueError):
    """Invalid dataset content or spec."""


@dataclass
class Sample:
    id: str
    image: np.ndarray
    score: float
    attr: int


@dataclass
class Dataset:
    """Column-oriented sample store; ``ds[i]`` yields a :class:`Sample`."""

    ids: list[str]
    images: np.ndarray
    scores: np.ndarray
    attrs: np.ndarray
    split: str = "train"
    class_count: int = 2
    # synthetic generator ground truth (absent for loaded data)
    cue_boxes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.images) == len(self.scores) == len(self.attrs) == n):
            raise DataError("dataset columns have different lengths")
        if len(set(self.ids)) != n:
            raise DataError("sample ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.ids[i], self.images[i], float(self.scores[i]), int(self.attrs[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx: Sequence[int], split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in idx],
            self.images[idx],
            self.scores[idx],
            self.attrs[idx],
            split or self.split,
            self.class_count,
            None if self.cue_boxes is None else self.cue_boxes[idx],
        )

    def index_of(self, sample_id: str) -> int:
        try:
            return self.ids.index(sample_id)
        except ValueError:
            raise KeyError(sample_id) from None


def concat_datasets(parts: Sequence[Dataset], split: str = "all") -> Dataset:
    if not parts:
        raise DataError("nothing to concatenate")
    boxes = None
    if all(p.cue_boxes is not None for p in parts):
        boxes = np.concatenate([p.cue_boxes for p in parts])
    return Dataset(
        [i for p in parts for i in p.ids],
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.scores for p in parts]),
        np.concatenate([p.attrs for p in parts]),
        split,
        parts[0].class_count,
        boxes,
    )


@dataclass
class SyntheticSpec:
    n: int = 2000
    image_size: int = 32
    local_cue_weight: float = 0.5
    global_cue_weight: float = 0.5
    group_offset: float = 0.0
    cue_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.n < 2:
            problems.append(f"n must be >= 2, got {self.n}")
        if self.image_size < 8:
            problems.append(f"image_size must be >= 8, got {self.image_size}")
        for name in ("local_cue_weight", "global_cue_weight", "group_offset", "cue_noise"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        if problems:
            raise DataError("; ".join(problems))


def generate(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, s = spec.n, spec.image_size
    attrs = rng.permutation(np.arange(n) % 2)
    u_local = rng.uniform(0.0, 1.0, n)
    u_global = rng.uniform(0.0, 1.0, n)
    noise = rng.normal(0.0, spec.cue_noise, n) if spec.cue_noise > 0 else np.zeros(n)
    p = max(2, s // 4)
    corners = rng.integers(0, s - p + 1, size=(n, 2))
    pixel_noise = rng.normal(0.0, _PIXEL_NOISE, (n, 3, s, s))

    images = _TINTS[attrs][:, :, None, None] + pixel_noise
    if spec.global_cue_weight > 0:
        ramp = np.linspace(-1.0, 1.0, s)[:, None] * np.ones((1, s))
        images += (_CUE_CONTRAST * u_global)[:, None, None, None] * ramp
    if spec.local_cue_weight > 0:
        checker = np.where((np.arange(p)[:, None] + np.arange(p)) % 2 == 0, 1.0, -1.0)
        for i, (r, c) in enumerate(corners):
            images[i, :, r:r + p, c:c + p] += _CUE_CONTRAST * u_local[i] * checker
    images = np.clip(images, 0.0, 1.0)

    latent = spec.local_cue_weight * u_local + spec.global_cue_weight * u_global + spec.group_offset * attrs + noise
    scores = 1.0 + 4.0 * np.clip(latent, 0.0, 1.0)
    boxes = np.column_stack([corners, corners + p])  # r0, c0, r1, c1 (exclusive)
    ids = [f"s{i:05d}" for i in range(n)]
    return Dataset(ids, images, scores, attrs.astype(np.int64), "train", 2, boxes)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip (p=0.5) and per-channel gain in [0.9, 1.1], clamped."""
    n, c = images.shape[:2]
    flips = rng.random(n) < 0.5
    gains = rng.uniform(0.9, 1.1, (n, c))
    out = np.where(flips[:, None, None, None], images[..., ::-1], images)
    return np.clip(out * gains[:, :, None, None], 0.0, 1.0)


def augment(img: np.ndarray, rng) -> np.ndarray:
    return augment_batch(img[None], rng)[0]


def split(ds: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified split by attribute; each part keeps the original sample order."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for g in range(ds.class_count):
        members = np.flatnonzero(ds.attrs == g)
        if members.size == 0:
            raise DataError(f"cannot stratify: attribute group {g} is empty")
        members = rng.permutation(members)
        counts = _apportion(members.size, ratios)
        start = 0
        for k, cnt in enumerate(counts):
            parts[k].extend(members[start:start + cnt].tolist())
            start += cnt
    return tuple(ds.subset(sorted(idx), name) for idx, name in zip(parts, SPLITS))  # type: ignore[return-value]


def _apportion(total: int, ratios) -> list[int]:
    raw = [total * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# manifest IO


def attr_from_filename(filename: str) -> int:
    name = Path(filename).name
    prefix = name[:1]
    if prefix not in ATTR_PREFIX:
        raise DataError(f"filename {name!r} does not start with a known attribute prefix {sorted(ATTR_PREFIX)}")
    return ATTR_PREFIX[prefix]


def load_manifest(path, image_size: int | None = None) -> dict[str, Dataset]:
    """Read a ``id,filename,score,split`` CSV; returns one Dataset per split present."""
    path = Path(path)
    root = path.parent
    cols: dict[str, dict[str, list]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "filename", "score", "split"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: manifest header lacks {sorted(missing)}")
        for rowno, row in enumerate(reader, start=2):
            try:
                attr = attr_from_filename(row["filename"])
            except DataError as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from None
            try:
                score = float(row["score"])
            except ValueError:
                raise DataError(f"{path}: row {rowno}: score {row['score']!r} is not a number") from None
            if not 1.0 <= score <= 5.0:
                raise DataError(f"{path}: row {rowno}: score {score} outside [1, 5]")
            if row["split"] not in SPLITS:
                raise DataError(f"{path}: row {rowno}: unknown split {row['split']!r}")
            img = read_image(root / row["filename"])
            if image_size is not None:
                img = resize_bilinear(img, image_size, image_size)
            col = cols.setdefault(row["split"], {"ids": [], "images": [], "scores": [], "attrs": []})
            col["ids"].append(row["id"])
            col["images"].append(img)
            col["scores"].append(score)
            col["attrs"].append(attr)
    out = {}
    for name, col in cols.items():
        out[name] = Dataset(col["ids"], np.stack(col["images"]), np.array(col["scores"]),
                            np.array(col["attrs"], dtype=np.int64), name)
    return out


def export_dataset(parts: dict[str, Dataset] | Sequence[Dataset], out_dir) -> Path:
    """Write ``images/*.png`` and ``manifest.csv``; filenames carry the attribute prefix."""
    if not isinstance(parts, dict):
        parts = {ds.split: ds for ds in parts}
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, ds in parts.items():
        for s in ds:
            filename = f"images/{PREFIX_OF_ATTR[s.attr]}{s.id}.png"
            save_image(s.image, out_dir / filename)
            rows.append((s.id, filename, repr(float(s.score)), name))
    rows.sort()
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "filename", "score", "split"])
        writer.writerows(rows)
    return manifest
