"""Samples, label vocabulary, and the on-disk dataset index.

A dataset directory contains RGB pedestrian crops, single-channel parsing
maps whose pixel values are label ids, a vocabulary file describing those
labels, and a tab-separated index listing every sample with its person,
clothes, and camera labels plus the split it belongs to.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import IndexParseError, ValidationError

SPLITS = ("train", "query", "gallery")

# Region flags understood by the vocabulary file. `clothes` may be combined
# with any region; the region flags themselves are mutually exclusive.
PART_NAMES = ("head", "upper", "lower", "feet")
REGION_FLAGS = PART_NAMES + ("background",)


@dataclass
class LabelVocabulary:
    """Names the parsing labels and groups them into body parts.

    part_groups maps part index (0=head, 1=upper body, 2=lower body,
    3=feet) to the label ids belonging to that part. Labels in no part
    group fall into background_labels.
    """

    names: list[str]
    clothes_labels: set[int]
    part_groups: dict[int, set[int]]
    background_labels: set[int]

    @property
    def num_labels(self):
        return len(self.names)

    @property
    def num_parts(self):
        return len(self.part_groups)

    def validate(self):
        all_ids = set(range(self.num_labels))
        seen = set()
        for k, group in self.part_groups.items():
            if not group <= all_ids:
                raise ValidationError(f"part group {k} references unknown label ids {sorted(group - all_ids)}")
            overlap = seen & group
            if overlap:
                raise ValidationError(f"label ids {sorted(overlap)} appear in more than one part group")
            seen |= group
        overlap = seen & self.background_labels
        if overlap:
            raise ValidationError(f"label ids {sorted(overlap)} are both part and background labels")
        if not self.clothes_labels:
            raise ValidationError("clothes_labels must be non-empty")
        if not self.clothes_labels <= all_ids:
            raise ValidationError("clothes_labels reference unknown label ids")
        return self

    def part_of_label(self):
        """Return an int array mapping label id -> part index, -1 for background."""
        lut = np.full(self.num_labels, -1, dtype=np.int64)
        for k, group in self.part_groups.items():
            for label in group:
                lut[label] = k
        return lut


# The common 18-label human-parsing palette. The label-to-part grouping and
# the set of labels treated as clothing are conventions, configurable
# through the vocabulary file.
DEFAULT_LABEL_NAMES = [
    "background", "hat", "hair", "sunglasses", "upper-clothes", "dress",
    "coat", "socks", "pants", "jumpsuit", "scarf", "skirt", "face",
    "left-arm", "right-arm", "left-leg", "right-leg", "shoes",
]

_DEFAULT_PARTS = {
    0: {"hat", "hair", "sunglasses", "face"},
    1: {"upper-clothes", "dress", "coat", "scarf", "left-arm", "right-arm", "jumpsuit"},
    2: {"pants", "skirt", "left-leg", "right-leg"},
    3: {"socks", "shoes"},
}
# Shoes and socks stay identity cues: only garments that change with an
# outfit are erased.
_DEFAULT_CLOTHES = {"upper-clothes", "dress", "coat", "pants", "jumpsuit", "scarf", "skirt"}


def default_vocabulary():
    name_to_id = {n: i for i, n in enumerate(DEFAULT_LABEL_NAMES)}
    vocab = LabelVocabulary(
        names=list(DEFAULT_LABEL_NAMES),
        clothes_labels={name_to_id[n] for n in _DEFAULT_CLOTHES},
        part_groups={k: {name_to_id[n] for n in names} for k, names in _DEFAULT_PARTS.items()},
        background_labels={name_to_id["background"]},
    )
    return vocab.validate()


@dataclass
class ImageSample:
    """One pedestrian observation: image, parsing map, and labels."""

    image: np.ndarray        # H x W x 3 float, values in [0, 1]
    parsing: np.ndarray      # H x W int, values in [0, num_labels)
    person_id: int
    clothes_id: int
    camera_id: int
    split: str = "train"

    def validate(self, vocab: LabelVocabulary):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be HxWx3, got shape {self.image.shape}")
        if self.parsing.shape != self.image.shape[:2]:
            raise ValidationError(
                f"parsing shape {self.parsing.shape} does not match image {self.image.shape[:2]}")
        bad = (self.parsing < 0) | (self.parsing >= vocab.num_labels)
        if bad.any():
            values = sorted(np.unique(self.parsing[bad]).tolist())
            raise ValidationError(f"parsing contains unregistered label ids {values}")
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        return self


@dataclass(frozen=True)
class IndexEntry:
    image_path: str
    parsing_path: str
    person_id: int
    clothes_id: int
    camera_id: int
    split: str


@dataclass
class DatasetIndex:
    entries: list[IndexEntry]
    vocabulary: LabelVocabulary
    root: str = "."

    def validate(self):
        if not self.entries:
            raise ValidationError("no entries in dataset index")
        seen = set()
        for e in self.entries:
            if e.image_path in seen:
                raise ValidationError(f"duplicate image path {e.image_path}")
            seen.add(e.image_path)
            if e.split not in SPLITS:
                raise ValidationError(f"unknown split {e.split!r} for {e.image_path}")
        gallery_ids = {e.person_id for e in self.entries if e.split == "gallery"}
        for e in self.entries:
            if e.split == "query" and e.person_id not in gallery_ids:
                raise ValidationError(f"query person {e.person_id} has no gallery entry")
        self.vocabulary.validate()
        return self

    def split_entries(self, split):
        return [e for e in self.entries if e.split == split]

    def person_ids(self, split="train"):
        return sorted({e.person_id for e in self.entries if e.split == split})

    def resolve(self, relpath):
        return os.path.join(self.root, relpath)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

INDEX_FILENAME = "index.tsv"
VOCAB_FILENAME = "labels.tsv"


def _parse_flags(text):
    flags = [f for f in text.strip().split(",") if f]
    for f in flags:
        if f != "clothes" and f not in REGION_FLAGS:
            raise IndexParseError(f"unknown label flag {f!r}")
    regions = [f for f in flags if f in REGION_FLAGS]
    if len(regions) > 1:
        raise IndexParseError(f"conflicting region flags {regions}")
    return flags


def load_vocabulary(path) -> LabelVocabulary:
    """Read a `label_id<TAB>name<TAB>flags` vocabulary file."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise IndexParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            try:
                label_id = int(fields[0])
            except ValueError:
                raise IndexParseError(f"{path}:{lineno}: bad label id {fields[0]!r}") from None
            if label_id in rows:
                raise IndexParseError(f"{path}:{lineno}: duplicate label id {label_id}")
            try:
                rows[label_id] = (fields[1], _parse_flags(fields[2]))
            except IndexParseError as err:
                raise IndexParseError(f"{path}:{lineno}: {err}") from None
    if sorted(rows) != list(range(len(rows))):
        raise ValidationError(f"{path}: label ids must be contiguous from 0, got {sorted(rows)}")
    names = [rows[i][0] for i in range(len(rows))]
    clothes, background = set(), set()
    part_groups: dict[int, set[int]] = {k: set() for k in range(len(PART_NAMES))}
    for label_id in range(len(rows)):
        flags = rows[label_id][1]
        if "clothes" in flags:
            clothes.add(label_id)
        region = [f for f in flags if f in REGION_FLAGS]
        if not region or region[0] == "background":
            # Labels with no region flag belong to no part.
            background.add(label_id)
        else:
            part_groups[PART_NAMES.index(region[0])].add(label_id)
    vocab = LabelVocabulary(names, clothes, part_groups, background)
    return vocab.validate()


def save_vocabulary(vocab: LabelVocabulary, path):
    lut = vocab.part_of_label()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# label_id\tname\tflags\n")
        for label_id, name in enumerate(vocab.names):
            flags = []
            if label_id in vocab.clothes_labels:
                flags.append("clothes")
            part = lut[label_id]
            flags.append(PART_NAMES[part] if part >= 0 else "background")
            fh.write(f"{label_id}\t{name}\t{','.join(flags)}\n")


def load_index(path) -> DatasetIndex:
    """Read and validate a dataset index file.

    Lines are `image_path parsing_path person_id clothes_id camera_id split`
    (tab-separated); `#` starts a comment. Paths are kept relative to the
    directory containing the index; the vocabulary is read from
    `labels.tsv` next to it.
    """
    root = os.path.dirname(os.path.abspath(path))
    vocab_path = os.path.join(root, VOCAB_FILENAME)
    vocab = load_vocabulary(vocab_path) if os.path.exists(vocab_path) else default_vocabulary()
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise IndexParseError(
                    f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
            try:
                person_id, clothes_id, camera_id = (int(fields[i]) for i in (2, 3, 4))
            except ValueError:
                raise IndexParseError(f"{path}:{lineno}: non-integer id field") from None
            if min(person_id, clothes_id, camera_id) < 0:
                raise IndexParseError(f"{path}:{lineno}: negative id field")
            split = fields[5].strip()
            if split not in SPLITS:
                raise IndexParseError(f"{path}:{lineno}: unknown split {split!r}")
            entries.append(IndexEntry(fields[0], fields[1], person_id, clothes_id, camera_id, split))
    index = DatasetIndex(entries=entries, vocabulary=vocab, root=root)
    return index.validate()


def save_index(index: DatasetIndex, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image_path\tparsing_path\tperson_id\tclothes_id\tcamera_id\tsplit\n")
        for e in index.entries:
            fh.write(f"{e.image_path}\t{e.parsing_path}\t{e.person_id}\t{e.clothes_id}"
                     f"\t{e.camera_id}\t{e.split}\n")


def load_image(index: DatasetIndex, entry: IndexEntry) -> np.ndarray:
    """Decode only the RGB image of an entry, scaled to [0, 1].

    Inference never touches the parsing map, so this must work when the
    parsing file is absent.
    """
    with Image.open(index.resolve(entry.image_path)) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return rgb / 255.0


def load_sample(index: DatasetIndex, entry: IndexEntry) -> ImageSample:
    """Decode an entry's image and parsing map into a validated ImageSample."""
    image = load_image(index, entry)
    with Image.open(index.resolve(entry.parsing_path)) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        parsing = np.asarray(im, dtype=np.int64)
    if parsing.ndim != 2:
        raise ValidationError(f"{entry.parsing_path}: parsing map must be single-channel")
    sample = ImageSample(
        image=image,
        parsing=parsing,
        person_id=entry.person_id,
        clothes_id=entry.clothes_id,
        camera_id=entry.camera_id,
        split=entry.split,
    )
    return sample.validate(index.vocabulary)
