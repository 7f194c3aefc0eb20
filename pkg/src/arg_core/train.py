"""Joint loss, optimizers, the training loop and evaluation."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, action_labels, forward, init_params
from .scene import SceneSample, sample_frames, segment_bounds
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    K: int = 3
    train_fraction: float = 0.8

    def validate(self) -> None:
        if not self.lam >= 0:
            raise ConfigError(f"train.lambda must be >= 0, got {self.lam}")
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1 or self.K < 1:
            raise ConfigError("train.epochs must be >= 0, train.batch_size and train.K >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train.train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class Metrics:
    group_accuracy: float
    individual_accuracy: float
    mean_loss: float


@dataclass
class EvalResult:
    metrics: Metrics
    wall_seconds: float
    seconds_per_sequence: float
    group_correct: int = 0
    sequences: int = 0
    individual_correct: int = 0
    actors: int = 0


@dataclass
class EpochRecord:
    epoch: int
    metrics: Metrics
    train_loss: float | None
    wall_seconds: float

    def as_dict(self) -> dict:
        d = {"epoch": self.epoch}
        d.update(asdict(self.metrics))
        d["train_loss"] = self.train_loss
        return d


@dataclass
class FitResult:
    params: dict
    history: list
    best_epoch: int
    train_metrics: Metrics
    holdout_size: int = 0
    train_size: int = 0
    timings: list = field(default_factory=list)


# -------------------------------------------------------------------- loss


def total_loss(out, y_group: int, y_actions: Sequence[int], lam: float) -> Tensor:
    """CE(group) + lam * CE(individual)."""
    group = T.cross_entropy(T.reshape(out.group_logits, (1, -1)), [int(y_group)])
    individual = T.cross_entropy(out.individual_logits, y_actions)
    return group + individual * float(lam)


def group_only_loss(out, y_group: int, y_actions: Sequence[int], lam: float) -> Tensor:
    return T.cross_entropy(T.reshape(out.group_logits, (1, -1)), [int(y_group)])


# --------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: dict) -> None:
        for name, p in self.params.items():
            p.data = p.data - self.lr * grads[name]


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def make_optimizer(params: dict, cfg: TrainConfig):
    return Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)


# --------------------------------------------------------------- evaluation


def eval_frames(sample: SceneSample, k: int) -> SceneSample:
    """Deterministic K-frame view: the middle frame of each segment."""
    n = len(sample.frames)
    if n < k:
        return sample_frames(sample, k, 0)
    picks = [(lo + hi - 1) // 2 for lo, hi in segment_bounds(n, k)]
    return SceneSample(sample.seq_id, [sample.frames[i] for i in picks], sample.group_label)


def _check_labels(sample: SceneSample, cfg: ModelConfig) -> np.ndarray:
    if not 0 <= sample.group_label < cfg.num_groups:
        raise DataError(f"{sample.seq_id}: group label {sample.group_label} outside the model's {cfg.num_groups} classes")
    y = action_labels(sample)
    bad = np.flatnonzero((y < 0) | (y >= cfg.num_actions))
    if bad.size:
        raise DataError(
            f"{sample.seq_id}: action label {int(y[bad[0]])} outside the model's {cfg.num_actions} classes"
        )
    return y


def evaluate(dataset: Sequence[SceneSample], params: dict, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None, loss_fn: Callable | None = None) -> EvalResult:
    if not dataset:
        raise DataError("evaluate: empty dataset")
    train_cfg = train_cfg or TrainConfig()
    loss_fn = loss_fn or total_loss
    start = time.perf_counter()
    g_ok = i_ok = actors = 0
    loss_sum = 0.0
    with T.no_grad():
        for sample in dataset:
            y = _check_labels(sample, model_cfg)
            view = eval_frames(sample, train_cfg.K)
            y = action_labels(view)
            out = forward(view, params, model_cfg).output
            loss_sum += float(loss_fn(out, view.group_label, y, train_cfg.lam).data)
            g_ok += int(np.argmax(out.group_logits.data) == view.group_label)
            i_ok += int((np.argmax(out.individual_logits.data, axis=1) == y).sum())
            actors += len(y)
    wall = time.perf_counter() - start
    n = len(dataset)
    m = Metrics(g_ok / n, i_ok / actors if actors else 0.0, loss_sum / n)
    return EvalResult(m, wall, wall / n, g_ok, n, i_ok, actors)


# ----------------------------------------------------------------- training


def split_dataset(dataset: Sequence[SceneSample], fraction: float = 0.8) -> tuple:
    """First ``fraction`` of sequences (by index) train, the rest held out."""
    n = len(dataset)
    cut = int(round(n * fraction))
    if n >= 2:
        cut = min(max(cut, 1), n - 1)
    return list(dataset[:cut]), list(dataset[cut:])


def snapshot(params: dict) -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def restore(values: dict) -> dict:
    return {k: Tensor(v, requires_grad=True) for k, v in values.items()}


def _frame_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def fit(
    dataset: Sequence[SceneSample],
    config: TrainConfig,
    model_cfg: ModelConfig,
    *,
    loss_fn: Callable | None = None,
    log: Callable[[str], None] | None = None,
    init: dict | None = None,
) -> FitResult:
    """Train on the first 80% of ``dataset``; score every epoch on the rest.

    Returns the parameters of the epoch with the best held-out group
    accuracy (the earliest on ties). Epoch 0 in the history is the untrained
    model.
    """
    config.validate()
    model_cfg.validate()
    if not dataset:
        raise DataError("fit: empty dataset")
    loss_fn = loss_fn or total_loss
    train, holdout = split_dataset(dataset, config.train_fraction)
    if not holdout:
        holdout = train
    for s in dataset:
        _check_labels(s, model_cfg)

    params = restore(init) if init is not None else init_params(model_cfg, config.seed)
    opt = make_optimizer(params, config)
    history, timings = [], []

    def record(epoch, train_loss, t0):
        try:
            res = evaluate(holdout, params, model_cfg, config, loss_fn)
        except NumericError as exc:
            raise NumericError(f"{exc} at epoch {epoch} (held-out evaluation)") from None
        rec = EpochRecord(epoch, res.metrics, train_loss, time.perf_counter() - t0)
        history.append(rec)
        timings.append({"epoch": epoch, "wall_seconds": rec.wall_seconds, "eval_seconds_per_sequence": res.seconds_per_sequence})
        if log:
            m = res.metrics
            log(f"epoch {epoch}: group {m.group_accuracy:.4f} individual {m.individual_accuracy:.4f} loss {m.mean_loss:.4f}")
        return rec

    best = record(0, None, time.perf_counter())
    best_values = snapshot(params)
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([config.seed, epoch])).permutation(len(train))
        losses = []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0 : b0 + config.batch_size]
            step += 1
            grads = {k: np.zeros(p.shape) for k, p in params.items()}
            for idx in batch:
                sample = sample_frames(train[idx], config.K, _frame_seed(config.seed, epoch, int(idx)))
                y = action_labels(sample)
                for p in params.values():
                    p.grad = None
                where = f"epoch {epoch}, step {step} ({sample.seq_id})"
                try:
                    loss = loss_fn(forward(sample, params, model_cfg).output, sample.group_label, y, config.lam)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise NumericError("non-finite loss")
                    loss.backward()
                except NumericError as exc:
                    raise NumericError(f"{exc} at {where}") from None
                for k, p in params.items():
                    if p.grad is not None:
                        grads[k] += p.grad
                losses.append(value)
            for k in grads:
                grads[k] /= len(batch)
                if not np.isfinite(grads[k]).all():
                    raise NumericError(f"non-finite gradient for {k} at epoch {epoch}, step {step}")
            opt.step(grads)
        rec = record(epoch, float(np.mean(losses)), t0)
        if rec.metrics.group_accuracy > best.metrics.group_accuracy:
            best = rec
            best_values = snapshot(params)

    final = restore(best_values)
    train_metrics = evaluate(train, final, model_cfg, config, loss_fn).metrics
    return FitResult(final, history, best.epoch, train_metrics, len(holdout), len(train), timings)


def summary_line(m: Metrics) -> str:
    return (
        f"Group Activity Accuracy: {100.0 * m.group_accuracy:.2f}%, "
        f"Individual Actions Accuracy: {100.0 * m.individual_accuracy:.2f}%"
    )


# ----------------------------------------------------------- gradient check


def param_group(name: str) -> str:
    """``backbone.conv0.weight`` -> ``backbone.conv0``."""
    return name.rsplit(".", 1)[0] if name.endswith((".weight", ".bias")) else name


def gradcheck_scenes(scenes: Sequence[SceneSample], model_cfg: ModelConfig, seed: int = 0, *, lam: float = 1.0, epsilon: float = 1e-6, tolerance: float = 1e-4, max_coords: int = 12) -> T.GradReport:
    """Full-pipeline gradient check, one fresh initialization per scene.

    Returns a single report holding every (scene, parameter) record; record
    names are the parameter names.
    """
    combined = T.GradReport(epsilon=epsilon, tolerance=tolerance)
    for i, sample in enumerate(scenes):
        params = init_params(model_cfg, seed + i)
        y = action_labels(sample)

        def loss_fn():
            return total_loss(forward(sample, params, model_cfg).output, sample.group_label, y, lam)

        rep = T.grad_check(loss_fn, params, epsilon, max_coords=max_coords, seed=seed + i, tolerance=tolerance)
        combined.records.extend(rep.records)
    return combined
