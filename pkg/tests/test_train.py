import math
from dataclasses import replace

import numpy as np
import pytest

from arg_core import tensor as T
from arg_core.errors import ConfigError, DataError, NumericError
from arg_core.gcn import SceneOutput
from arg_core.model import action_labels, forward, init_params
from arg_core.scene import SceneSample
from arg_core.tensor import Tensor
from arg_core.train import (
    SGD,
    Adam,
    Metrics,
    TrainConfig,
    eval_frames,
    evaluate,
    fit,
    gradcheck_scenes,
    group_only_loss,
    param_group,
    snapshot,
    split_dataset,
    summary_line,
    total_loss,
)

from conftest import tiny_model


def output(ind, grp):
    return SceneOutput(Tensor(np.asarray(ind, float)), Tensor(np.asarray(grp, float)), None)


def ce(logits, label):
    return math.log(sum(math.exp(v) for v in logits)) - logits[label]


class TestLoss:
    def test_lambda_zero_is_group_term(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            out = output(rng.normal(size=(4, 3)) * 5, rng.normal(size=2) * 5)
            y = rng.integers(0, 3, size=4)
            a = total_loss(out, 1, y, 0.0).item()
            b = group_only_loss(out, 1, y, 0.0).item()
            assert a == b

    def test_confident_correct(self):
        out = output([[40.0, -40.0], [-40.0, 40.0]], [-40.0, 40.0])
        assert total_loss(out, 1, [0, 1], 1.0).item() < 1e-6

    def test_hand_toy(self):
        ind = [[1.0, 2.0], [0.5, -0.5]]
        grp = [0.3, -0.2]
        expect = ce(grp, 0) + (ce(ind[0], 1) + ce(ind[1], 0)) / 2
        assert total_loss(output(ind, grp), 0, [1, 0], 1.0).item() == pytest.approx(expect, abs=1e-12)
        lam = total_loss(output(ind, grp), 0, [1, 0], 0.25).item()
        assert lam == pytest.approx(ce(grp, 0) + 0.25 * (ce(ind[0], 1) + ce(ind[1], 0)) / 2, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            total_loss(output([[0.0, 1.0]], [0.0, 1.0]), 2, [0], 1.0)
        with pytest.raises(DataError):
            total_loss(output([[0.0, 1.0]], [0.0, 1.0]), 0, [3], 1.0)


class TestOptimizers:
    @pytest.mark.parametrize("opt", ["sgd", "adam"])
    def test_tiny_step_is_order_lr(self, tiny_data, opt):
        cfg = tiny_model()
        params = init_params(cfg, 0)
        sample = tiny_data[0]
        before = snapshot(params)
        loss = total_loss(forward(sample, params, cfg).output, sample.group_label, action_labels(sample), 1.0)
        loss.backward()
        grads = {k: p.grad.copy() for k, p in params.items()}
        lr = 1e-8
        (SGD(params, lr) if opt == "sgd" else Adam(params, lr)).step(grads)
        changed = 0
        for k, p in params.items():
            delta = p.data - before[k]
            if opt == "sgd":
                # exact up to the rounding of p - lr * g
                slack = 2 * np.finfo(float).eps * np.abs(before[k])
                assert (np.abs(delta + lr * grads[k]) <= slack + 1e-30).all()
            else:
                assert np.abs(delta).max() <= lr * (1 + 1e-6)
            changed += int(np.any(delta != 0))
        assert changed == len(params)

    def test_adam_moments(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        opt = Adam(p, lr=0.1)
        opt.step({"w": np.array([0.5, -4.0])})
        # bias-corrected first step moves each coordinate by ~lr * sign(g)
        np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-7)


class TestEvaluate:
    def test_recount_oracle(self, tiny_data):
        cfg = tiny_model()
        params = init_params(cfg, 3)
        res = evaluate(tiny_data, params, cfg)
        g_ok = i_ok = n_act = 0
        for s in tiny_data:
            view = eval_frames(s, 3)
            out = forward(view, params, cfg).output
            logits = out.group_logits.data.tolist()
            g_ok += logits.index(max(logits)) == s.group_label
            for row, lab in zip(out.individual_logits.data.tolist(), [a.action_label for f in view.frames for a in f.actors]):
                i_ok += row.index(max(row)) == lab
                n_act += 1
        assert res.group_correct == g_ok and res.individual_correct == i_ok and res.actors == n_act
        assert res.metrics.group_accuracy == g_ok / len(tiny_data)
        assert res.metrics.individual_accuracy == i_ok / n_act
        assert res.wall_seconds > 0

    def test_degenerate_agreement(self, tiny_data):
        cfg = tiny_model()
        params = init_params(cfg, 0)
        for name in ("individual", "group"):
            params[f"head.{name}.weight"].data[:] = 0
            params[f"head.{name}.bias"].data[:] = [5.0, -5.0]
        zeroed = []
        for s in tiny_data:
            frames = [replace(f, actors=[replace(a, action_label=0) for a in f.actors]) for f in s.frames]
            zeroed.append(SceneSample(s.seq_id, frames, 0))
        m = evaluate(zeroed, params, cfg).metrics
        assert m.group_accuracy == 1.0 and m.individual_accuracy == 1.0

    def test_pure(self, tiny_data):
        cfg = tiny_model()
        params = init_params(cfg, 4)
        before = snapshot(params)
        a = evaluate(tiny_data, params, cfg).metrics
        b = evaluate(tiny_data, params, cfg).metrics
        assert a == b
        assert all(np.array_equal(before[k], params[k].data) for k in params)

    def test_vocab_mismatch(self, tiny_data):
        cfg = replace(tiny_model(), num_actions=1)
        with pytest.raises(DataError):
            evaluate(tiny_data, init_params(cfg, 0), cfg)
        with pytest.raises(DataError):
            evaluate([], init_params(tiny_model(), 0), tiny_model())

    def test_eval_frames_middle(self, tiny_data):
        s = tiny_data[0]
        long = SceneSample(s.seq_id, s.frames * 3, s.group_label)
        view = eval_frames(long, 3)
        assert [long.frames.index(f) for f in view.frames] == [1, 1, 1] or len(view.frames) == 3
        assert eval_frames(long, 3).frames == view.frames


class TestFit:
    def test_zero_epochs(self, tiny_data):
        cfg = tiny_model()
        res = fit(tiny_data, TrainConfig(epochs=0), cfg)
        assert len(res.history) == 1 and res.best_epoch == 0
        init = init_params(cfg, 0)
        assert all(np.array_equal(init[k].data, res.params[k].data) for k in init)
        assert res.history[0].metrics == evaluate(tiny_data[8:], init, cfg).metrics

    def test_deterministic(self, tiny_data):
        cfg = tiny_model()
        tc = TrainConfig(epochs=2, batch_size=4, lr=3e-3)
        a, b = fit(tiny_data, tc, cfg), fit(tiny_data, tc, cfg)
        assert [r.as_dict() for r in a.history] == [r.as_dict() for r in b.history]
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
        c = fit(tiny_data, replace(tc, seed=1), cfg)
        assert [r.as_dict() for r in c.history] != [r.as_dict() for r in a.history]

    def test_returns_best_epoch(self, tiny_data):
        cfg = tiny_model()
        res = fit(tiny_data, TrainConfig(epochs=3, batch_size=2, lr=1e-2), cfg)
        accs = [r.metrics.group_accuracy for r in res.history]
        assert res.best_epoch == accs.index(max(accs))
        hold = evaluate(tiny_data[8:], res.params, cfg).metrics
        assert hold == res.history[res.best_epoch].metrics
        assert res.train_metrics == evaluate(tiny_data[:8], res.params, cfg).metrics

    def test_split(self):
        tr, te = split_dataset(list(range(10)), 0.8)
        assert tr == list(range(8)) and te == [8, 9]
        assert split_dataset([1], 0.8) == ([1], [])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_loss(self, tiny_data):
        def overflow(out, yg, ya, lam):
            return total_loss(out, yg, ya, lam) * 1e308 * 1e308

        with pytest.raises(NumericError, match="non-finite loss at epoch 1, step 1"):
            fit(tiny_data, TrainConfig(epochs=1), tiny_model(), loss_fn=overflow)

        def raises_inside(out, yg, ya, lam):
            return total_loss(out, yg, ya, lam) * float("nan")

        with pytest.raises(NumericError, match="NaN or Inf at epoch 0"):
            fit(tiny_data, TrainConfig(epochs=1), tiny_model(), loss_fn=raises_inside)

    def test_label_checks(self, tiny_data):
        with pytest.raises(DataError):
            fit(tiny_data, TrainConfig(epochs=0), replace(tiny_model(), num_groups=1))
        with pytest.raises(ConfigError):
            fit(tiny_data, TrainConfig(optimizer="rmsprop"), tiny_model())


def test_summary_line():
    assert summary_line(Metrics(0.8415, 0.5, 1.0)) == "Group Activity Accuracy: 84.15%, Individual Actions Accuracy: 50.00%"


def test_param_group():
    assert param_group("backbone.conv0.weight") == "backbone.conv0"
    assert param_group("relation.head1.phi.bias") == "relation.head1.phi"


@pytest.mark.parametrize("kind", ["embedded_dot", "ncc", "sad", "dot"])
def test_full_pipeline_gradcheck(kind):
    from arg_core.synth import GeneratorConfig, synth_relational

    gen = GeneratorConfig(num_sequences=3, frames=2, image_size=40, actors_min=3, actors_max=3, box_w=10, box_h=8, mu=20, min_gap=2)
    rep = gradcheck_scenes(synth_relational(gen, 5), tiny_model(kind), seed=0, max_coords=4)
    assert rep.passed, rep.failing()[:3]
    groups = rep.by_group(param_group)
    assert "backbone.conv0" in groups and "head.group" in groups


def test_training_loss_mostly_decreases():
    """First epochs on the relational task: >= 4 of 5 consecutive comparisons non-increasing."""
    from conftest import acceptance_model

    from arg_core.synth import GeneratorConfig, synth_relational

    data = synth_relational(GeneratorConfig(num_sequences=640), 0)
    res = fit(data, TrainConfig(epochs=6, lr=3e-3, batch_size=8), acceptance_model())
    losses = [r.train_loss for r in res.history[1:]]
    drops = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert drops >= 4, losses
