"""The full network: features -> relation graphs -> GCN -> heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .features import FeatureConfig, build_actor_matrix, init_feature_params
from .gcn import GcnConfig, SceneOutput, init_gcn_params, scene_forward
from .relation import RelationConfig, build_graphs, init_relation_params
from .scene import LabelVocab, SceneSample


@dataclass(frozen=True)
class ModelConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    relation: RelationConfig = field(default_factory=RelationConfig)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    num_actions: int = 2
    num_groups: int = 2

    def validate(self) -> None:
        self.features.validate()
        self.relation.validate(self.features.d)
        self.gcn.validate()
        if self.num_actions < 1 or self.num_groups < 1:
            raise DataError("vocabulary needs at least one action and one group class")

    @classmethod
    def for_vocab(cls, vocab: LabelVocab, **parts) -> "ModelConfig":
        return cls(num_actions=vocab.num_actions, num_groups=vocab.num_groups, **parts)


@dataclass
class Prediction:
    output: SceneOutput
    graphs: list
    feats: object


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Named parameters in a fixed order: backbone, embed, relation, gcn, heads."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = init_feature_params(cfg.features, rng)
    params.update(init_relation_params(cfg.relation, cfg.features.d, rng))
    params.update(
        init_gcn_params(cfg.gcn, cfg.features.d, cfg.relation.num_graphs, cfg.num_actions, cfg.num_groups, rng)
    )
    return params


def forward(sample: SceneSample, params, cfg: ModelConfig) -> Prediction:
    feats = build_actor_matrix(sample, params, cfg.features)
    return forward_features(feats, params, cfg)


def forward_features(feats, params, cfg: ModelConfig) -> Prediction:
    graphs = build_graphs(feats, cfg.relation, params)
    out = scene_forward(feats, graphs, params, cfg.gcn)
    return Prediction(out, graphs, feats)


def action_labels(sample: SceneSample) -> np.ndarray:
    """Action label per actor row, same order as the feature matrix."""
    return np.array([a.action_label for fr in sample.frames for a in fr.actors], dtype=np.int64)
