import math
from collections import Counter

import numpy as np
import pytest

from arg_core.errors import ConfigError
from arg_core.synth import GeneratorConfig, synth_distractor, synth_relational

SMALL = GeneratorConfig(num_sequences=12)


def centers(frame):
    return [a.bbox.center for a in frame.actors]


def components(frame, mu):
    """Connected components of the mu-proximity graph over one frame's actors."""
    c = centers(frame)
    n = len(c)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if math.dist(c[i], c[j]) <= mu:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def test_deterministic():
    a, b = synth_relational(SMALL, 7), synth_relational(SMALL, 7)
    assert a == b
    assert synth_relational(SMALL, 8) != a


def test_zero_amplitude_distractor_matches_relational():
    assert synth_distractor(SMALL, 3) == synth_relational(SMALL, 3)


def test_unsatisfiable_config():
    with pytest.raises(ConfigError):
        synth_relational(GeneratorConfig(num_sequences=1, image_size=30, actors_min=6, actors_max=6), 0)
    with pytest.raises(ConfigError):
        GeneratorConfig(box_w=100).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(actors_min=1).validate()


@pytest.mark.parametrize("seed", range(3))
def test_label_is_relational(seed):
    cfg = SMALL
    for s in synth_relational(cfg, seed):
        fr = s.frames[0]
        labels = [a.action_label for a in fr.actors]
        comps = components(fr, cfg.mu)
        assert len(comps) == 2
        pure = all(len({labels[i] for i in g}) == 1 for g in comps)
        assert pure == (s.group_label == 0)
        counts = sorted(Counter(labels).values())
        n = len(labels)
        assert counts == sorted([n // 2, n - n // 2])


def test_boxes_keep_their_gap_and_masks_stay_inside():
    cfg = SMALL
    for s in synth_relational(cfg, 0):
        for fr in s.frames:
            boxes = [a.bbox for a in fr.actors]
            for i, a in enumerate(boxes):
                for b in boxes[i + 1 :]:
                    gap = max(b.x1 - a.x2, a.x1 - b.x2, b.y1 - a.y2, a.y1 - b.y2)
                    assert gap >= cfg.min_gap
            for act in fr.actors:
                assert not act.mask.outside_box(act.bbox)
                assert act.mask.bits.sum() > 0


def test_type_invariants_over_many_seeds():
    cfg = GeneratorConfig(num_sequences=1, frames=2)
    for seed in range(1000):
        (s,) = synth_relational(cfg, seed)
        assert len(s.frames) == 2 and s.group_label in (0, 1)
        for fr in s.frames:
            assert cfg.actors_min <= len(fr.actors) <= cfg.actors_max
            for a in fr.actors:
                assert 0 <= a.bbox.x1 and a.bbox.x2 <= cfg.image_size
                assert 0 <= a.bbox.y1 and a.bbox.y2 <= cfg.image_size


def test_single_actor_uninformative_about_group():
    """P(group | pixels of one actor) is ~uniform: bucket by the actor's cluster and blob side."""
    cfg = GeneratorConfig(num_sequences=2500, frames=1)
    table = Counter()
    for s in synth_relational(cfg, 11):
        fr = s.frames[0]
        for a in fr.actors:
            bits = a.mask.bits
            cols = np.nonzero(bits)[1]
            side = int(cols.mean() + 0.5 > a.bbox.center[0])
            table[(a.action_label, side, s.group_label)] += 1
    total = 0
    for cl in (0, 1):
        for side in (0, 1):
            n0, n1 = table[(cl, side, 0)], table[(cl, side, 1)]
            total += n0 + n1
            assert abs(n1 / (n0 + n1) - 0.5) < 0.05
    assert total >= 10_000


class TestDistractor:
    cfg = GeneratorConfig(num_sequences=6, distractor_amplitude=1.0)

    def test_pixels_inside_masks_untouched(self):
        clean = synth_relational(self.cfg, 5)
        noisy = synth_distractor(self.cfg, 5)
        changed_any = False
        for c, d in zip(clean, noisy):
            for fc, fd in zip(c.frames, d.frames):
                union = np.zeros(fc.pixels.shape[:2], dtype=bool)
                for a in fc.actors:
                    union |= a.mask.bits.astype(bool)
                np.testing.assert_array_equal(fc.pixels[union], fd.pixels[union])
                diff = (fc.pixels != fd.pixels).any(axis=2)
                assert not (diff & union).any()
                changed_any |= diff.any()
                # distractor pixels stay inside some box
                inside = np.zeros_like(union)
                for a in fc.actors:
                    c0, c1, r0, r1 = a.bbox.pixel_ranges(fc.width, fc.height)
                    inside[r0 : r1 + 1, c0 : c1 + 1] = True
                assert not (diff & ~inside).any()
                assert fc.actors == fd.actors
        assert changed_any

    def test_histogram_inside_masks_identical(self):
        clean = synth_relational(self.cfg, 1)
        noisy = synth_distractor(self.cfg, 1)
        for c, d in zip(clean, noisy):
            for fc, fd in zip(c.frames, d.frames):
                for a in fc.actors:
                    m = a.mask.bits.astype(bool)
                    hc = np.bincount(fc.pixels[m].reshape(-1), minlength=256)
                    hd = np.bincount(fd.pixels[m].reshape(-1), minlength=256)
                    assert np.array_equal(hc, hd)
