"""Deterministic synthetic scenes whose group label needs relational reasoning.

Every scene holds two spatial groups of actors. Inside a group, actors are
chained by center distances at most ``mu``; actors of different groups are
more than ``mu`` apart. Each actor belongs to one of two appearance clusters
drawn for the scene, rendered as a colored, noisy ellipse in one half of its
box (the ellipse is the actor's mask). The individual action label is the
cluster.

The group label is ``cohesive`` when every spatial group is a single cluster
and ``mixed`` when both groups contain both clusters. The cluster counts are
the same for the two labels (``n // 2`` of one cluster, the rest of the
other), so neither a lone actor nor the set of appearances says anything
about the label: only "who is near whom" does. Boxes are kept ``min_gap``
pixels apart so a small backbone cannot see a neighbour through its
receptive field.

For scenes with fewer than four actors a single group is used and the set
of appearances does reveal the label.

``synth_distractor`` paints, inside every box but outside the mask, a second
ellipse in the colour of the other cluster. Its randomness comes from a
separate stream, so amplitude 0 reproduces ``synth_relational`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scene import Actor, BinaryMask, BoundingBox, Frame, LabelVocab, SceneSample

GROUP_LABELS = ("cohesive", "mixed")

# RGB in [0, 1]; cluster k uses PALETTE[k].
PALETTE = (
    (0.85, 0.30, 0.25),
    (0.25, 0.35, 0.85),
    (0.30, 0.80, 0.30),
    (0.85, 0.80, 0.25),
    (0.75, 0.30, 0.80),
    (0.25, 0.80, 0.80),
)
BACKGROUND = 0.45
_DISTRACTOR_STREAM = 0xD157


@dataclass(frozen=True)
class GeneratorConfig:
    num_sequences: int = 64
    frames: int = 3
    image_size: int = 80
    actors_min: int = 4
    actors_max: int = 6
    num_clusters: int = 2
    box_w: float = 16.0
    box_h: float = 12.0
    mu: float = 32.0
    min_gap: float = 10.0
    jitter: int = 1
    noise: float = 0.06
    distractor_amplitude: float = 0.0
    max_tries: int = 400

    def validate(self) -> None:
        if self.actors_min < 2 or self.actors_max < self.actors_min:
            raise ConfigError(
                f"need 2 <= actors_min <= actors_max, got {self.actors_min}, {self.actors_max}"
            )
        if not 2 <= self.num_clusters <= len(PALETTE):
            raise ConfigError(f"num_clusters must be in [2, {len(PALETTE)}], got {self.num_clusters}")
        if self.num_sequences < 1 or self.frames < 1:
            raise ConfigError("num_sequences and frames must be >= 1")
        if self.box_w < 4 or self.box_h < 4:
            raise ConfigError(f"boxes must be at least 4x4 pixels, got {self.box_w}x{self.box_h}")
        if self.box_w + 2 * self.jitter > self.image_size or self.box_h + 2 * self.jitter > self.image_size:
            raise ConfigError(
                f"a {self.box_w}x{self.box_h} box cannot fit a {self.image_size}px frame"
            )
        if self.mu <= 0 or self.min_gap < 0 or self.jitter < 0 or self.noise < 0:
            raise ConfigError("mu must be > 0 and min_gap, jitter, noise >= 0")
        if not 0.0 <= self.distractor_amplitude <= 1.0:
            raise ConfigError(f"distractor_amplitude must be in [0, 1], got {self.distractor_amplitude}")

    def vocab(self) -> LabelVocab:
        return LabelVocab(tuple(f"cluster_{k}" for k in range(self.num_clusters)), GROUP_LABELS)


# ------------------------------------------------------------------ layout


def _box_gap(a, b, cfg) -> float:
    """Separation between two boxes along the better-separated axis."""
    return max(abs(a[0] - b[0]) - cfg.box_w, abs(a[1] - b[1]) - cfg.box_h)


def _place_group(rng, cfg, size, placed, others):
    """Grow a connected group of ``size`` centers; None when a draw fails."""
    margin = 2.0 * math.sqrt(2.0) * cfg.jitter + 1.5
    lo_x = cfg.box_w / 2 + cfg.jitter
    hi_x = cfg.image_size - cfg.box_w / 2 - cfg.jitter
    lo_y = cfg.box_h / 2 + cfg.jitter
    hi_y = cfg.image_size - cfg.box_h / 2 - cfg.jitter
    group = []
    for _ in range(size):
        for _attempt in range(60):
            if not group:
                c = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
            else:
                anchor = group[int(rng.integers(len(group)))]
                ang = rng.uniform(0.0, 2.0 * math.pi)
                r = rng.uniform(0.5 * cfg.mu, cfg.mu - margin)
                c = (anchor[0] + r * math.cos(ang), anchor[1] + r * math.sin(ang))
            if not (lo_x <= c[0] <= hi_x and lo_y <= c[1] <= hi_y):
                continue
            if any(_box_gap(c, q, cfg) < cfg.min_gap + 2 * cfg.jitter for q in placed + group):
                continue
            if any(math.dist(c, q) <= cfg.mu + margin for q in others):
                continue
            group.append((round(c[0]), round(c[1])))
            break
        else:
            return None
    return group


def _layout(rng, cfg, n):
    sizes = [n // 2, n - n // 2] if n >= 4 else [n]
    for _ in range(cfg.max_tries):
        groups = []
        placed = []
        ok = True
        for size in sizes:
            g = _place_group(rng, cfg, size, placed, placed)
            if g is None:
                ok = False
                break
            groups.append(g)
            placed = placed + g
        if ok:
            return groups
    raise ConfigError(
        f"could not place {n} actors in a {cfg.image_size}px frame with mu={cfg.mu}, "
        f"min_gap={cfg.min_gap}, boxes {cfg.box_w}x{cfg.box_h}"
    )


def _assign_clusters(rng, sizes, label):
    """Cluster index (0 or 1, relative to the scene's pair) for each group member."""
    if len(sizes) == 1:
        n = sizes[0]
        if label == 0:
            return [[0] * n]
        k = int(rng.integers(1, n))
        members = [0] * k + [1] * (n - k)
        rng.shuffle(members)
        return [members]
    g1, g2 = sizes
    if label == 0:
        return [[0] * g1, [1] * g2]
    a1 = int(rng.integers(1, g1))  # cluster-0 members in group 1, leaving both groups mixed
    first = [0] * a1 + [1] * (g1 - a1)
    second = [0] * (g1 - a1) + [1] * (g2 - g1 + a1)
    rng.shuffle(first)
    rng.shuffle(second)
    return [first, second]


# --------------------------------------------------------------- rendering


def _ellipse(cfg, rng):
    """Ellipse geometry inside one half of a box: (side, dx, dy, rx, ry)."""
    half = cfg.box_w / 2
    side = int(rng.integers(2))
    rx = rng.uniform(0.32, 0.45) * half
    ry = rng.uniform(0.30, 0.45) * cfg.box_h
    dx = rng.uniform(-1.0, 1.0) * max(0.0, half / 2 - rx)
    dy = rng.uniform(-1.0, 1.0) * max(0.0, cfg.box_h / 2 - ry - 0.5)
    return side, dx, dy, rx, ry


def _ellipse_bits(cfg, box: BoundingBox, side, dx, dy, rx, ry) -> np.ndarray:
    size = cfg.image_size
    half = cfg.box_w / 2
    cx = box.x1 + half * (0.5 + side) + dx
    cy = 0.5 * (box.y1 + box.y2) + dy
    c0, c1, r0, r1 = box.pixel_ranges(size, size)
    out = np.zeros((size, size), dtype=bool)
    ys, xs = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    out[r0 : r1 + 1, c0 : c1 + 1] = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    return out


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _scene(cfg, seed_seq, drift_seq, idx, amplitude):
    rng = np.random.default_rng(seed_seq)
    drng = np.random.default_rng(drift_seq)
    n = int(rng.integers(cfg.actors_min, cfg.actors_max + 1))
    label = int(rng.integers(2))
    groups = _layout(rng, cfg, n)
    rel = _assign_clusters(rng, [len(g) for g in groups], label)
    pair = rng.choice(cfg.num_clusters, size=2, replace=False)
    centers = [c for g in groups for c in g]
    clusters = [int(pair[r]) for g in rel for r in g]
    shapes = [_ellipse(cfg, rng) for _ in centers]
    # distractor geometry: a blob in the other half of the box, other cluster's colour
    decoys = [_ellipse(cfg, drng) for _ in centers]
    size = cfg.image_size

    frames = []
    for _fi in range(cfg.frames):
        img = BACKGROUND + cfg.noise * rng.standard_normal((size, size, 3))
        jit = rng.integers(-cfg.jitter, cfg.jitter + 1, size=(len(centers), 2)) if cfg.jitter else np.zeros(
            (len(centers), 2), dtype=int
        )
        actors = []
        masks = []
        for j, (c, cl) in enumerate(zip(centers, clusters)):
            cx, cy = c[0] + int(jit[j, 0]), c[1] + int(jit[j, 1])
            box = BoundingBox(cx - cfg.box_w / 2, cy - cfg.box_h / 2, cx + cfg.box_w / 2, cy + cfg.box_h / 2)
            bits = _ellipse_bits(cfg, box, *shapes[j])
            img[bits] = np.asarray(PALETTE[cl]) + cfg.noise * rng.standard_normal((int(bits.sum()), 3))
            masks.append((box, bits))
            actors.append(Actor(f"a{j}", box, BinaryMask.from_bits(bits.astype(np.uint8)), cl))
        if amplitude > 0.0:
            for j, (box, bits) in enumerate(masks):
                other = int(pair[1]) if clusters[j] == int(pair[0]) else int(pair[0])
                side, dx, dy, rx, ry = decoys[j]
                side = 1 - shapes[j][0]
                dbits = _ellipse_bits(cfg, box, side, dx, dy, rx, ry) & ~bits
                for _, other_bits in masks:
                    dbits &= ~other_bits
                paint = np.asarray(PALETTE[other]) + cfg.noise * drng.standard_normal((int(dbits.sum()), 3))
                img[dbits] = (1.0 - amplitude) * img[dbits] + amplitude * paint
        frames.append(Frame(_quantize(img), actors))
    return SceneSample(f"seq{idx:05d}", frames, label)


def _generate(cfg: GeneratorConfig, seed: int, amplitude: float) -> list:
    cfg.validate()
    root = np.random.SeedSequence(seed)
    drift = np.random.SeedSequence([seed, _DISTRACTOR_STREAM])
    kids = root.spawn(cfg.num_sequences)
    dkids = drift.spawn(cfg.num_sequences)
    return [_scene(cfg, kids[i], dkids[i], i, amplitude) for i in range(cfg.num_sequences)]


def synth_relational(config: GeneratorConfig, seed: int) -> list:
    """Scenes whose group label depends only on spatial-appearance structure."""
    return _generate(config, seed, 0.0)


def synth_distractor(config: GeneratorConfig, seed: int) -> list:
    """``synth_relational`` plus decoy texture inside each box, outside the mask.

    Uses ``config.distractor_amplitude`` (0 means no decoys).
    """
    return _generate(config, seed, float(config.distractor_amplitude))
