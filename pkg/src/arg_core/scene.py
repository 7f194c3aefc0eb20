"""Sequences, frames and actors; the on-disk dataset format; frame sampling.

A dataset is a directory holding ``dataset.jsonl`` plus an ``images/``
folder of binary PPM (P6, 8-bit) files. Each JSONL line is one sequence::

    {"seq_id": str, "group_label": str,
     "frames": [{"image": "images/<file>.ppm",
                 "actors": [{"actor_id": str, "bbox": [x1, y1, x2, y2],
                             "mask": {"w": int, "h": int, "rle": [int, ...]} | null,
                             "action": str}]}]}

Masks are full-frame rasters, run-length encoded row-major as alternating
run lengths starting with a run of zeros.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

DATASET_FILE = "dataset.jsonl"
IMAGE_DIR = "images"


class MaskClipWarning(UserWarning):
    """A mask had bits outside its actor's box; they were dropped."""


# ----------------------------------------------------------------------- RLE


def rle_encode(bits: np.ndarray) -> list:
    """Alternating run lengths of a 0/1 raster, row-major, zeros first."""
    flat = np.asarray(bits).reshape(-1).astype(bool)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(rle: Sequence[int], width: int, height: int) -> np.ndarray:
    total = width * height
    runs = np.asarray(rle, dtype=np.int64)
    if runs.size and runs.min() < 0:
        raise DataError("RLE run lengths must be non-negative")
    if int(runs.sum()) != total:
        raise DataError(f"RLE covers {int(runs.sum())} pixels, mask is {width}x{height}={total}")
    values = np.zeros(runs.size, dtype=np.uint8)
    values[1::2] = 1
    return np.repeat(values, runs).reshape(height, width)


# --------------------------------------------------------------------- types


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise DataError(f"bbox field {name} is not finite: {v}")
        if not self.x1 < self.x2:
            raise DataError(f"bbox field x1 must be < x2, got x1={self.x1}, x2={self.x2}")
        if not self.y1 < self.y2:
            raise DataError(f"bbox field y1 must be < y2, got y1={self.y1}, y2={self.y2}")

    @property
    def center(self) -> tuple:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]

    def intersects_image(self, width: int, height: int) -> bool:
        return self.x2 > 0 and self.y2 > 0 and self.x1 < width and self.y1 < height

    def pixel_ranges(self, width: int, height: int) -> tuple:
        """Inclusive (col_lo, col_hi, row_lo, row_hi) of pixels whose centers lie in the box."""
        c0 = max(0, math.ceil(self.x1 - 0.5))
        c1 = min(width - 1, math.floor(self.x2 - 0.5))
        r0 = max(0, math.ceil(self.y1 - 0.5))
        r1 = min(height - 1, math.floor(self.y2 - 0.5))
        return c0, c1, r0, r1


@dataclass(frozen=True)
class BinaryMask:
    width: int
    height: int
    rle: tuple

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataError(f"mask dimensions must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "rle", tuple(int(r) for r in self.rle))
        if sum(self.rle) != self.width * self.height:
            raise DataError(
                f"RLE covers {sum(self.rle)} pixels, mask is {self.width}x{self.height}"
            )
        if any(r < 0 for r in self.rle):
            raise DataError("RLE run lengths must be non-negative")

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BinaryMask":
        bits = np.asarray(bits)
        return cls(int(bits.shape[1]), int(bits.shape[0]), tuple(rle_encode(bits)))

    @cached_property
    def bits(self) -> np.ndarray:
        out = rle_decode(self.rle, self.width, self.height)
        out.setflags(write=False)
        return out

    def outside_box(self, box: BoundingBox) -> bool:
        """True if any 1-bit has its pixel center outside ``box``. Works on runs."""
        w = self.width
        c0, c1, r0, r1 = box.pixel_ranges(self.width, self.height)
        pos = 0
        for k, run in enumerate(self.rle):
            if k % 2 == 1 and run:
                start, end = pos, pos + run - 1
                ra, rb = divmod(start, w)[0], divmod(end, w)[0]
                if ra < r0 or rb > r1:
                    return True
                if ra == rb:
                    ca, cb = start % w, end % w
                else:
                    ca, cb = (0, w - 1)
                if ca < c0 or cb > c1:
                    return True
            pos += run
        return False

    def clipped_to(self, box: BoundingBox) -> "BinaryMask":
        c0, c1, r0, r1 = box.pixel_ranges(self.width, self.height)
        keep = np.zeros((self.height, self.width), dtype=np.uint8)
        if c0 <= c1 and r0 <= r1:
            keep[r0 : r1 + 1, c0 : c1 + 1] = 1
        return BinaryMask.from_bits(self.bits & keep)


@dataclass(frozen=True)
class Actor:
    actor_id: str
    bbox: BoundingBox
    mask: BinaryMask | None
    action_label: int


@dataclass(frozen=True, eq=False)
class Frame:
    """One image (stored as 8-bit H x W x 3) and the actors visible in it."""

    pixels: np.ndarray
    actors: tuple

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"frame pixels must be HxWx3 uint8, got {px.dtype} {px.shape}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "actors", tuple(self.actors))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def image(self) -> np.ndarray:
        """C x H x W float64 in [0, 1]."""
        return self.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels) and self.actors == other.actors


@dataclass(frozen=True)
class SceneSample:
    seq_id: str
    frames: tuple
    group_label: int

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise DataError(f"sequence {self.seq_id!r} has no frames")
        shape = self.frames[0].pixels.shape
        for i, fr in enumerate(self.frames):
            if not fr.actors:
                raise DataError(f"sequence {self.seq_id!r} frame {i} has no actors")
            if fr.pixels.shape != shape:
                raise DataError(
                    f"sequence {self.seq_id!r} frame {i} is {fr.pixels.shape}, expected {shape}"
                )

    @property
    def num_actors(self) -> int:
        return sum(len(f.actors) for f in self.frames)


@dataclass(frozen=True)
class LabelVocab:
    actions: tuple = ()
    groups: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "groups", tuple(self.groups))
        for kind, names in (("action", self.actions), ("group", self.groups)):
            if len(set(names)) != len(names):
                raise DataError(f"duplicate {kind} class names in vocabulary")

    @classmethod
    def from_names(cls, actions: Iterable[str], groups: Iterable[str]) -> "LabelVocab":
        return cls(tuple(sorted(set(actions))), tuple(sorted(set(groups))))

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def action_index(self, name: str) -> int:
        try:
            return self.actions.index(name)
        except ValueError:
            raise DataError(f"unknown action label {name!r}") from None

    def group_index(self, name: str) -> int:
        try:
            return self.groups.index(name)
        except ValueError:
            raise DataError(f"unknown group label {name!r}") from None


# ----------------------------------------------------------------------- PPM


def write_ppm(path, pixels: np.ndarray) -> None:
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = px.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: bad PPM header") from None
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ParseError(f"{path}: PPM payload truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# ------------------------------------------------------------------- dataset

_SEQ_KEYS = {"seq_id", "group_label", "frames"}
_FRAME_KEYS = {"image", "actors"}
_ACTOR_KEYS = {"actor_id", "bbox", "mask", "action"}
_MASK_KEYS = {"w", "h", "rle"}


def _check_keys(obj, required: set, what: str, line: int, lenient: bool) -> None:
    if not isinstance(obj, dict):
        raise ParseError(f"{what} must be a JSON object", line)
    missing = required - obj.keys()
    if missing:
        raise ParseError(f"{what} is missing field(s) {sorted(missing)}", line)
    extra = obj.keys() - required
    if extra and not lenient:
        raise ParseError(f"{what} has unknown field(s) {sorted(extra)}", line)


def _num(v, what: str, line: int) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{what} must be a number, got {v!r}", line)
    return float(v)


def _int(v, what: str, line: int) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{what} must be an integer, got {v!r}", line)
    return v


def _parse_record(rec, line: int, lenient: bool) -> dict:
    _check_keys(rec, _SEQ_KEYS, "sequence", line, lenient)
    if not isinstance(rec["seq_id"], str) or not isinstance(rec["group_label"], str):
        raise ParseError("seq_id and group_label must be strings", line)
    if not isinstance(rec["frames"], list) or not rec["frames"]:
        raise ParseError("frames must be a non-empty list", line)
    frames = []
    for fi, fr in enumerate(rec["frames"]):
        _check_keys(fr, _FRAME_KEYS, f"frame {fi}", line, lenient)
        if not isinstance(fr["image"], str):
            raise ParseError(f"frame {fi}: image must be a path string", line)
        if not isinstance(fr["actors"], list) or not fr["actors"]:
            raise ParseError(f"frame {fi}: actors must be a non-empty list", line)
        actors = []
        for ai, ac in enumerate(fr["actors"]):
            where = f"frame {fi} actor {ai}"
            _check_keys(ac, _ACTOR_KEYS, where, line, lenient)
            if not isinstance(ac["actor_id"], str) or not isinstance(ac["action"], str):
                raise ParseError(f"{where}: actor_id and action must be strings", line)
            bb = ac["bbox"]
            if not isinstance(bb, list) or len(bb) != 4:
                raise ParseError(f"{where}: bbox must be [x1, y1, x2, y2]", line)
            coords = [_num(v, f"{where} bbox", line) for v in bb]
            try:
                box = BoundingBox(*coords)
            except DataError as exc:
                raise ParseError(f"{where}: {exc}", line) from None
            mask = None
            if ac["mask"] is not None:
                m = ac["mask"]
                _check_keys(m, _MASK_KEYS, f"{where} mask", line, lenient)
                w, h = _int(m["w"], "mask w", line), _int(m["h"], "mask h", line)
                if not isinstance(m["rle"], list):
                    raise ParseError(f"{where}: mask rle must be a list", line)
                rle = [_int(r, "mask rle entry", line) for r in m["rle"]]
                try:
                    mask = BinaryMask(w, h, tuple(rle))
                except DataError as exc:
                    raise ParseError(f"{where}: {exc}", line) from None
            actors.append((ac["actor_id"], box, mask, ac["action"]))
        frames.append((fr["image"], actors))
    return {"seq_id": rec["seq_id"], "group": rec["group_label"], "frames": frames}


def _dataset_file(path) -> Path:
    p = Path(path)
    return p / DATASET_FILE if p.is_dir() else p


def load_dataset(path, vocab: LabelVocab | None = None, lenient: bool = False):
    """Read a dataset directory (or its ``dataset.jsonl``).

    Returns ``(samples, vocab)``. When ``vocab`` is not given it is built
    from the labels present, sorted lexicographically.
    """
    jsonl = _dataset_file(path)
    if not jsonl.exists():
        raise FileNotFoundError(f"no dataset at {jsonl}")
    root = jsonl.parent
    parsed = []
    with open(jsonl, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            parsed.append((lineno, _parse_record(rec, lineno, lenient)))

    if vocab is None:
        vocab = LabelVocab.from_names(
            (a[3] for _, r in parsed for _, acts in r["frames"] for a in acts),
            (r["group"] for _, r in parsed),
        )

    samples = []
    cache: dict = {}
    for lineno, r in parsed:
        try:
            group = vocab.group_index(r["group"])
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        frames = []
        for fi, (img_rel, acts) in enumerate(r["frames"]):
            img_path = (root / img_rel).resolve()
            if img_path not in cache:
                cache = {img_path: read_ppm(img_path)}
            pixels = cache[img_path]
            h, w = pixels.shape[:2]
            actors = []
            for actor_id, box, mask, action in acts:
                if not box.intersects_image(w, h):
                    raise ParseError(f"frame {fi} actor {actor_id!r}: bbox lies outside the image", lineno)
                if mask is not None:
                    if (mask.width, mask.height) != (w, h):
                        raise ParseError(
                            f"frame {fi} actor {actor_id!r}: mask is {mask.width}x{mask.height}, image is {w}x{h}",
                            lineno,
                        )
                    if mask.outside_box(box):
                        warnings.warn(
                            f"line {lineno}: mask of actor {actor_id!r} (frame {fi}) extends outside its box; clipped",
                            MaskClipWarning,
                            stacklevel=2,
                        )
                        mask = mask.clipped_to(box)
                try:
                    label = vocab.action_index(action)
                except DataError as exc:
                    raise DataError(f"line {lineno}: {exc}") from None
                actors.append(Actor(actor_id, box, mask, label))
            frames.append(Frame(pixels, actors))
        samples.append(SceneSample(r["seq_id"], frames, group))
    return samples, vocab


def write_dataset(path, samples: Sequence[SceneSample], vocab: LabelVocab) -> Path:
    """Write ``samples`` in the dataset format. Output is byte-deterministic."""
    root = Path(path)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    lines = []
    for si, s in enumerate(samples):
        frames = []
        for fi, fr in enumerate(s.frames):
            rel = f"{IMAGE_DIR}/{si:05d}_{fi:03d}.ppm"
            write_ppm(root / rel, fr.pixels)
            actors = []
            for a in fr.actors:
                mask = None
                if a.mask is not None:
                    mask = {"w": a.mask.width, "h": a.mask.height, "rle": list(a.mask.rle)}
                actors.append(
                    {
                        "actor_id": a.actor_id,
                        "bbox": a.bbox.as_list(),
                        "mask": mask,
                        "action": vocab.actions[a.action_label],
                    }
                )
            frames.append({"image": rel, "actors": actors})
        rec = {"seq_id": s.seq_id, "group_label": vocab.groups[s.group_label], "frames": frames}
        lines.append(json.dumps(rec, separators=(",", ":")))
    text = "".join(line + "\n" for line in lines)
    with open(root / DATASET_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return root


class AnnotationConverter:
    """Base for converters from other annotation layouts into the JSONL format.

    Subclasses implement :meth:`sequences`, yielding ``SceneSample`` objects
    built from their source files; :meth:`convert` writes them out. No
    converter for a specific third-party layout ships with the package.
    """

    def __init__(self, vocab: LabelVocab):
        self.vocab = vocab

    def sequences(self):
        raise NotImplementedError("subclasses yield SceneSample objects from their source")

    def convert(self, out_dir) -> Path:
        return write_dataset(out_dir, list(self.sequences()), self.vocab)


# ---------------------------------------------------------------- sampling


def segment_bounds(num_frames: int, k: int) -> list:
    """[start, end) of K contiguous segments covering ``num_frames`` frames."""
    return [((s * num_frames) // k, ((s + 1) * num_frames) // k) for s in range(k)]


def sample_frames(sample: SceneSample, k: int, seed: int) -> SceneSample:
    """Pick K frames: one uniformly from each of K equal contiguous segments.

    Sequences shorter than K are repeated cyclically.
    """
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    n = len(sample.frames)
    if n < k:
        picks = [i % n for i in range(k)]
    else:
        rng = np.random.default_rng(seed)
        picks = [int(rng.integers(lo, hi)) for lo, hi in segment_bounds(n, k)]
    return SceneSample(sample.seq_id, [sample.frames[i] for i in picks], sample.group_label)
