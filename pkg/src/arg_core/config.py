"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected and missing keys take the defaults below.
Lists are comma separated (``backbone.channels = 8, 16``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .features import FeatureConfig
from .gcn import GcnConfig
from .model import ModelConfig
from .relation import RelationConfig
from .scene import LabelVocab
from .synth import GeneratorConfig
from .train import TrainConfig


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, "run"),
    "backbone.channels": (_ints, (8, 16, 16)),
    "roi.P": (int, 5),
    "roi.samples": (int, 2),
    "roi.pool": (str, "avg"),
    "embed.d": (int, 64),
    "features.use_masks": (_bool, True),
    "relation.kind": (str, "embedded_dot"),
    "relation.mu": (_floats, (32.0,)),
    "relation.num_graphs": (int, 2),
    "relation.dk": (int, 32),
    "relation.sad_normalize": (_bool, True),
    "relation.force_identity": (_bool, False),
    "gcn.layers": (int, 1),
    "gcn.combine": (str, "concat"),
    "gcn.pool": (str, "max"),
    "train.lambda": (float, 1.0),
    "train.lr": (float, 1e-3),
    "train.epochs": (int, 30),
    "train.batch_size": (int, 8),
    "train.optimizer": (str, "adam"),
    "train.K": (int, 3),
    "train.train_fraction": (float, 0.8),
    "synth.num_sequences": (int, 64),
    "synth.frames": (int, 3),
    "synth.image_size": (int, 80),
    "synth.actors_min": (int, 4),
    "synth.actors_max": (int, 6),
    "synth.num_clusters": (int, 2),
    "synth.box_w": (float, 16.0),
    "synth.box_h": (float, 12.0),
    "synth.mu": (float, 32.0),
    "synth.min_gap": (float, 10.0),
    "synth.jitter": (int, 1),
    "synth.noise": (float, 0.06),
    "synth.distractor_amplitude": (float, 0.0),
    "gradcheck.scenes": (int, 10),
    "gradcheck.actors": (int, 3),
    "gradcheck.frames": (int, 2),
    "gradcheck.image_size": (int, 40),
    "gradcheck.epsilon": (float, 1e-6),
    "gradcheck.tolerance": (float, 1e-4),
    "gradcheck.max_coords": (int, 8),
    # test-only fault injection: scales the gradient leaving the feature matrix
    "debug.grad_fault": (float, 1.0),
}


@dataclass
class RunConfig:
    values: dict
    source: str | None = None

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        return RunConfig(vals, self.source)

    def resolved_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved"
        path.write_text(self.resolved_text(), encoding="utf-8")
        return path

    # ------------------------------------------------------ typed views

    def feature_config(self) -> FeatureConfig:
        v = self.values
        return FeatureConfig(
            channels=tuple(v["backbone.channels"]),
            P=v["roi.P"],
            samples=v["roi.samples"],
            pool=v["roi.pool"],
            d=v["embed.d"],
            use_masks=v["features.use_masks"],
            grad_fault=v["debug.grad_fault"],
        )

    def relation_config(self) -> RelationConfig:
        v = self.values
        return RelationConfig(
            kind=v["relation.kind"],
            mu=tuple(v["relation.mu"]),
            num_graphs=v["relation.num_graphs"],
            dk=v["relation.dk"],
            sad_normalize=v["relation.sad_normalize"],
            force_identity=v["relation.force_identity"],
        )

    def gcn_config(self) -> GcnConfig:
        v = self.values
        return GcnConfig(layers=v["gcn.layers"], combine=v["gcn.combine"], pool=v["gcn.pool"])

    def model_config(self, vocab: LabelVocab) -> ModelConfig:
        cfg = ModelConfig.for_vocab(
            vocab, features=self.feature_config(), relation=self.relation_config(), gcn=self.gcn_config()
        )
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        v = self.values
        cfg = TrainConfig(
            lam=v["train.lambda"],
            lr=v["train.lr"],
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            seed=v["seed"],
            optimizer=v["train.optimizer"],
            K=v["train.K"],
            train_fraction=v["train.train_fraction"],
        )
        cfg.validate()
        return cfg

    def generator_config(self) -> GeneratorConfig:
        v = self.values
        kw = {k.split(".", 1)[1]: v[k] for k in SCHEMA if k.startswith("synth.")}
        cfg = GeneratorConfig(**kw)
        cfg.validate()
        return cfg


def defaults() -> RunConfig:
    return RunConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_config(text: str, source: str | None = None) -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    seen = set()
    where = source or "<config>"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}:{lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}:{lineno}: key {key!r} given twice")
        seen.add(key)
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{where}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(values, source)


def load_config(path) -> RunConfig:
    if path is None:
        return defaults()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config file is not UTF-8: {path}") from None
    return parse_config(text, str(path))
