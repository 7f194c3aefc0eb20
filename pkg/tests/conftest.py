import numpy as np
import pytest

from arg_core.features import FeatureConfig
from arg_core.gcn import GcnConfig
from arg_core.model import ModelConfig
from arg_core.relation import RelationConfig
from arg_core.synth import GeneratorConfig, synth_relational

# 40 px scenes: cheap enough for finite differences and short fits
TINY_GEN = GeneratorConfig(
    num_sequences=10,
    frames=3,
    image_size=40,
    actors_min=3,
    actors_max=4,
    box_w=10.0,
    box_h=8.0,
    mu=20.0,
    min_gap=2.0,
)


def tiny_model(kind="embedded_dot", use_masks=True, **gcn) -> ModelConfig:
    return ModelConfig(
        features=FeatureConfig(channels=(4, 8), d=8, P=3, use_masks=use_masks),
        relation=RelationConfig(kind=kind, mu=(20.0,), num_graphs=2, dk=4),
        gcn=GcnConfig(**gcn),
        num_actions=2,
        num_groups=2,
    )


@pytest.fixture(scope="session")
def tiny_data():
    return synth_relational(TINY_GEN, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def acceptance_model(use_masks=True, force_identity=False) -> ModelConfig:
    """Model used by the training experiments: 2-layer backbone, d = 32."""
    return ModelConfig(
        features=FeatureConfig(channels=(8, 16), d=32, use_masks=use_masks),
        relation=RelationConfig(kind="embedded_dot", mu=(32.0,), num_graphs=2, dk=16, force_identity=force_identity),
        gcn=GcnConfig(),
        num_actions=2,
        num_groups=2,
    )
