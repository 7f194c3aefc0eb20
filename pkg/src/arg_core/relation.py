"""Appearance similarities, the distance mask, and Actor Relation Graphs.

For every graph head the relation matrix is

    G[i, j] = fs(i, j) * exp(fa(x_i, x_j)) / sum_j fs(i, j) * exp(fa(x_i, x_j))

with ``fs`` the 0/1 distance indicator and ``fa`` one of the scores below.
Scores feed ``exp`` after these scalings (all chosen here, none prescribed):

* ``embedded_dot``: theta(x_i) . phi(x_j) / sqrt(d_k)
* ``ncc``: zero-lag normalized cross-correlation, already in [-1, 1]
* ``dot``: x_i . x_j / d
* ``sad``: -SAD(x_i, x_j) / d. SAD is a dissimilarity, so it is negated to
  give close actors the larger weight; ``sad_normalize=False`` keeps the
  plain negated sum for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .features import ActorFeatureMatrix
from .tensor import Tensor

KINDS = ("embedded_dot", "ncc", "sad", "dot")
NCC_VAR_EPS = 1e-12


@dataclass(frozen=True)
class RelationConfig:
    kind: str = "embedded_dot"
    mu: tuple = (32.0,)
    num_graphs: int = 2
    dk: int = 32
    sad_normalize: bool = True
    # ablation: every graph is the identity (no message passing between actors)
    force_identity: bool = False

    def validate(self, d: int | None = None) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"relation.kind must be one of {KINDS}, got {self.kind!r}")
        if self.num_graphs < 1:
            raise ConfigError(f"relation.num_graphs must be >= 1, got {self.num_graphs}")
        if not self.mu or any(not m > 0 for m in self.mu):
            raise ConfigError(f"relation.mu values must be > 0, got {self.mu}")
        if len(self.mu) not in (1, self.num_graphs):
            raise ConfigError(
                f"relation.mu needs 1 or num_graphs={self.num_graphs} values, got {len(self.mu)}"
            )
        if self.dk < 1 or (d is not None and self.dk > d):
            raise ConfigError(f"relation.dk must be in [1, d={d}], got {self.dk}")

    def mu_for(self, head: int) -> float:
        return float(self.mu[0] if len(self.mu) == 1 else self.mu[head])


@dataclass
class RelationGraph:
    G: Tensor
    mask: np.ndarray

    def numpy(self) -> np.ndarray:
        return self.G.data


# --------------------------------------------------------- vector measures


def _pair(u, v):
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DimensionError(f"vectors have different lengths: {u.shape[0]} vs {v.shape[0]}")
    return u, v


def sad(u, v) -> float:
    """Sum of absolute differences."""
    u, v = _pair(u, v)
    return float(np.abs(u - v).sum())


def ncc(u, v) -> float:
    """Mean-subtracted, magnitude-normalized correlation in [-1, 1].

    Returns 0 when either vector is constant (variance below 1e-12).
    """
    u, v = _pair(u, v)
    if u.size < 2:
        raise DimensionError("ncc needs vectors of length >= 2")
    cu, cv = u - u.mean(), v - v.mean()
    if (cu * cu).mean() < NCC_VAR_EPS or (cv * cv).mean() < NCC_VAR_EPS:
        return 0.0
    r = float((cu * cv).sum() / np.sqrt((cu * cu).sum() * (cv * cv).sum()))
    return min(1.0, max(-1.0, r))


def dot(u, v) -> float:
    u, v = _pair(u, v)
    return float((u * v).sum())


def embedded_dot(u, v, theta, phi) -> Tensor:
    """theta(u) . phi(v) / sqrt(d_k) for affine maps ``theta = (W, b)``, ``phi = (W, b)``.

    Inputs may be arrays or Tensors; the result is a differentiable scalar.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    wt, bt = (t if isinstance(t, Tensor) else Tensor(t) for t in theta)
    wp, bp = (t if isinstance(t, Tensor) else Tensor(t) for t in phi)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"embedded_dot: vectors must be 1-D of equal length, got {u.shape}, {v.shape}")
    if wt.shape != wp.shape or wt.ndim != 2 or wt.shape[0] != u.shape[0]:
        raise DimensionError(
            f"embedded_dot: maps {wt.shape}/{wp.shape} do not fit vectors of length {u.shape[0]}"
        )
    dk = wt.shape[1]
    a = T.matmul(T.reshape(u, (1, -1)), wt) + bt
    b = T.matmul(T.reshape(v, (1, -1)), wp) + bp
    return T.reshape(T.matmul(a, b.T), ()) * (1.0 / np.sqrt(dk))


# ------------------------------------------------------------ matrix scores


def pairwise_ncc(X: Tensor) -> Tensor:
    """N x N matrix of ncc between rows of X, differentiable in X."""
    x = X.data
    N, d = x.shape
    if d < 2:
        raise DimensionError("ncc needs feature vectors of length >= 2")
    c = x - x.mean(axis=1, keepdims=True)
    ss = np.ascontiguousarray(c * c).sum(axis=1)
    live = ss / d >= NCC_VAR_EPS
    norm = np.sqrt(np.where(live, ss, 1.0))
    z = np.where(live[:, None], c / norm[:, None], 0.0)
    r = np.clip(T._row_stable_matmul(z, z.T), -1.0, 1.0)

    def backward(g):
        gz = (g + g.T) @ z
        # through the normalization z = c / |c|, then the centering
        gc = (gz - z * (gz * z).sum(axis=1, keepdims=True)) / norm[:, None]
        gc = np.where(live[:, None], gc, 0.0)
        return (gc - gc.mean(axis=1, keepdims=True),)

    return Tensor._from_op(r, (X,), backward, "pairwise_ncc")


def pairwise_sad(X: Tensor, normalize: bool = True) -> Tensor:
    """N x N matrix of -SAD(x_i, x_j) (divided by d when ``normalize``)."""
    x = X.data
    N, d = x.shape
    diff = np.ascontiguousarray(x[:, None, :] - x[None, :, :])
    scale = 1.0 / d if normalize else 1.0
    r = -np.abs(diff).sum(axis=-1) * scale

    def backward(g):
        s = np.sign(diff) * (g * -scale)[:, :, None]
        return (s.sum(axis=1) - s.sum(axis=0),)

    return Tensor._from_op(r, (X,), backward, "pairwise_sad")


def pairwise_dot(X: Tensor) -> Tensor:
    return T.matmul(X, X.T) * (1.0 / X.shape[1])


def pairwise_embedded(X: Tensor, w_theta, b_theta, w_phi, b_phi) -> Tensor:
    if w_theta.shape[0] != X.shape[1] or w_phi.shape != w_theta.shape:
        raise DimensionError(
            f"embedding maps {w_theta.shape}/{w_phi.shape} do not fit features of width {X.shape[1]}"
        )
    theta = T.matmul(X, w_theta) + b_theta
    phi = T.matmul(X, w_phi) + b_phi
    return T.matmul(theta, phi.T) * (1.0 / np.sqrt(w_theta.shape[1]))


# -------------------------------------------------------------------- mask


def distance_mask(positions, mu: float) -> np.ndarray:
    """1 where the Euclidean distance between centers is <= mu, else 0."""
    if not mu > 0:
        raise ConfigError(f"mu must be > 0, got {mu}")
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    diff = p[:, None, :] - p[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    m = (dist <= mu).astype(np.float64)
    np.fill_diagonal(m, 1.0)
    return m


# ------------------------------------------------------------------ graphs


def init_relation_params(cfg: RelationConfig, d: int, rng: np.random.Generator) -> dict:
    params = {}
    if cfg.kind != "embedded_dot":
        return params
    bound = 1.0 / np.sqrt(d)
    for g in range(cfg.num_graphs):
        for name in ("theta", "phi"):
            params[f"relation.head{g}.{name}.weight"] = Tensor(rng.uniform(-bound, bound, (d, cfg.dk)), requires_grad=True)
            params[f"relation.head{g}.{name}.bias"] = Tensor(np.zeros(cfg.dk), requires_grad=True)
    return params


def relation_scores(X: Tensor, cfg: RelationConfig, params: Mapping[str, Tensor], head: int) -> Tensor:
    if cfg.kind == "embedded_dot":
        p = f"relation.head{head}."
        return pairwise_embedded(
            X, params[p + "theta.weight"], params[p + "theta.bias"], params[p + "phi.weight"], params[p + "phi.bias"]
        )
    if cfg.kind == "ncc":
        return pairwise_ncc(X)
    if cfg.kind == "sad":
        return pairwise_sad(X, cfg.sad_normalize)
    return pairwise_dot(X)


def build_graphs(feats: ActorFeatureMatrix, cfg: RelationConfig, params: Mapping[str, Tensor]) -> list:
    """One row-stochastic N x N relation graph per head, in head order."""
    N = feats.N
    graphs = []
    for g in range(cfg.num_graphs):
        mask = distance_mask(feats.positions, cfg.mu_for(g))
        if cfg.force_identity:
            graphs.append(RelationGraph(Tensor(np.eye(N)), np.eye(N)))
            continue
        scores = relation_scores(feats.X, cfg, params, g)
        assert mask.any(axis=1).all()
        graphs.append(RelationGraph(T.row_softmax(scores, mask), mask))
    return graphs


def graphs_from_scores(scores: Sequence[np.ndarray], positions, mus: Sequence[float]) -> list:
    """Build graphs from precomputed raw scores (testing and inspection)."""
    out = []
    for r, mu in zip(scores, mus):
        mask = distance_mask(positions, mu)
        out.append(RelationGraph(T.row_softmax(Tensor(r), mask), mask))
    return out
