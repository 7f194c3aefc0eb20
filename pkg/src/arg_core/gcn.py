"""Graph convolution over relation graphs, late fusion, pooling and the two heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .features import ActorFeatureMatrix
from .relation import RelationGraph
from .tensor import Tensor


@dataclass(frozen=True)
class GcnConfig:
    layers: int = 1
    combine: str = "concat"
    pool: str = "max"

    def validate(self) -> None:
        if self.layers < 0:
            raise ConfigError(f"gcn.layers must be >= 0, got {self.layers}")
        if self.combine not in ("concat", "sum"):
            raise ConfigError(f"gcn.combine must be 'concat' or 'sum', got {self.combine!r}")
        if self.pool not in ("max", "mean"):
            raise ConfigError(f"gcn.pool must be 'max' or 'mean', got {self.pool!r}")

    def rep_dim(self, d: int) -> int:
        return 2 * d if self.combine == "concat" else d


@dataclass
class SceneOutput:
    individual_logits: Tensor
    group_logits: Tensor
    fused_features: Tensor


def init_gcn_params(cfg: GcnConfig, d: int, num_graphs: int, num_actions: int, num_groups: int, rng) -> dict:
    params = {}
    bound = np.sqrt(6.0 / (2 * d))
    for layer in range(cfg.layers):
        for g in range(num_graphs):
            params[f"gcn.layer{layer}.head{g}.weight"] = Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True)
    rd = cfg.rep_dim(d)
    for name, k in (("individual", num_actions), ("group", num_groups)):
        b = 1.0 / np.sqrt(rd)
        params[f"head.{name}.weight"] = Tensor(rng.uniform(-b, b, (rd, k)), requires_grad=True)
        params[f"head.{name}.bias"] = Tensor(np.zeros(k), requires_grad=True)
    return params


def _graph_tensor(G) -> Tensor:
    if isinstance(G, RelationGraph):
        return G.G
    return G if isinstance(G, Tensor) else Tensor(G)


def gcn_layer(G, Z: Tensor, W: Tensor) -> Tensor:
    """relu(G Z W)."""
    G = _graph_tensor(G)
    N = Z.shape[0]
    if G.shape != (N, N):
        raise DimensionError(f"graph {G.shape} does not match {N} actors")
    if W.ndim != 2 or W.shape[0] != Z.shape[1]:
        raise DimensionError(f"weight {W.shape} does not fit features of width {Z.shape[1]}")
    # G Z mixes actors: sorted accumulation keeps rows exact under relabeling
    return T.relu(T.matmul(T.sorted_matmul(G, Z), W))


def fuse_late(graphs: Sequence, Z: Tensor, weights: Sequence[Tensor]) -> Tensor:
    """Sum over heads of relu(G_i Z W_i), accumulated in head order."""
    if len(graphs) < 1 or len(graphs) != len(weights):
        raise ConfigError(f"late fusion needs one weight per graph, got {len(graphs)} graphs and {len(weights)} weights")
    out = gcn_layer(graphs[0], Z, weights[0])
    for G, W in zip(graphs[1:], weights[1:]):
        out = out + gcn_layer(G, Z, W)
    return out


def scene_forward(feats: ActorFeatureMatrix, graphs: Sequence, params: Mapping[str, Tensor], cfg: GcnConfig) -> SceneOutput:
    X = feats.X
    Z = X
    for layer in range(cfg.layers):
        ws = [params[f"gcn.layer{layer}.head{g}.weight"] for g in range(len(graphs))]
        Z = fuse_late(graphs, Z, ws)
    rep = T.concat([X, Z], axis=1) if cfg.combine == "concat" else X + Z
    individual = T.matmul(rep, params["head.individual.weight"]) + params["head.individual.bias"]
    pooled = T.max_rows(rep) if cfg.pool == "max" else T.mean_rows(rep)
    pooled = T.reshape(pooled, (1, -1))
    group = T.reshape(T.matmul(pooled, params["head.group.weight"]) + params["head.group.bias"], (-1,))
    return SceneOutput(individual, group, Z)
