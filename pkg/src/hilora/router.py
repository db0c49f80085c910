"""Two-stage routing: sequence-level LoRA selection and ROC allocation,
then token-level ROC selection with variance normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch, EmptyScores, NoCandidates
from .lora_pool import PoolManifest
from .numerics import RngStream, as_matrix, multinomial_sample, softmax, top_k_rows


@dataclass
class RouterConfig:
    gamma: float = 0.4
    k_min: int = 3
    projection_ranking: str = "raw"
    seed: int = 0
    roc_top_k: int = 24
    retriever_k: int = 3

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("router.gamma", f"must lie in (0, 1], got {self.gamma!r}")
        if self.k_min < 1:
            raise ConfigError("router.k_min", "must be >= 1")
        if self.projection_ranking not in ("raw", "abs"):
            raise ConfigError("router.projection_ranking", "must be 'raw' or 'abs'")
        if self.roc_top_k < 1 or self.retriever_k < 1:
            raise ConfigError("router", "roc_top_k and retriever_k must be >= 1")


@dataclass(frozen=True)
class RoutingPlan:
    candidates: tuple[str, ...]
    scores: dict[str, float]
    probs: dict[str, float]
    budget: int
    allocation: dict[str, int]
    mean_rank: float
    scale: float
    repair_iterations: int = 0
    fallback_count: int | None = None  # c when no LoRA scored positive

    def to_dict(self) -> dict:
        return {
            "candidates": list(self.candidates),
            "scores": {k: float(v) for k, v in self.scores.items()},
            "probs": {k: float(v) for k, v in self.probs.items()},
            "budget": int(self.budget),
            "allocation": {k: int(v) for k, v in self.allocation.items()},
            "mean_rank": float(self.mean_rank),
            "scale": float(self.scale),
            "fallback_count": self.fallback_count,
        }


@dataclass
class RocSelection:
    """Per-layer record of which ROCs fired for each token."""

    layer: int
    selected: dict[str, np.ndarray] = field(default_factory=dict)  # id -> (T, o_i) indices
    projections: dict[str, np.ndarray] = field(default_factory=dict)  # id -> (T, r_i)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "selected": {k: v.tolist() for k, v in self.selected.items()},
            "projections": {k: v.tolist() for k, v in self.projections.items()},
        }


@dataclass(frozen=True)
class ToyBackbone:
    layers: tuple[np.ndarray, ...]
    nonlinearity: str | None = None

    def __post_init__(self):
        layers = tuple(as_matrix(w, "W0") for w in self.layers)
        if not layers:
            raise DimensionMismatch("backbone needs at least one layer")
        d = layers[0].shape[0]
        if any(w.shape != (d, d) for w in layers):
            raise DimensionMismatch("all backbone layers must be d x d")
        if self.nonlinearity not in (None, "tanh"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "layers", layers)

    @property
    def dim(self) -> int:
        return self.layers[0].shape[0]


def synthesize_backbone(dim: int, num_layers: int, rng: RngStream, kind: str = "residual",
                        nonlinearity: str | None = None) -> ToyBackbone:
    """``residual``: I + N(0, 0.01/d) perturbation; ``gaussian``: N(0, 1/d) entries."""
    layers = []
    for _ in range(num_layers):
        noise = rng.standard_normal((dim, dim)) / math.sqrt(dim)
        layers.append(np.eye(dim) + 0.1 * noise if kind == "residual" else noise)
    return ToyBackbone(tuple(layers), nonlinearity)


def select_candidates(scores: Mapping[str, float], k_min: int, pool_size: int | None = None) -> list[str]:
    """Candidate set: every positive scorer, else the top-c scorers.

    c = min(pool_size, max(ceil(|max score|), k_min)). Candidates come back in
    descending score order, ties broken by insertion order.
    """
    if not scores:
        raise EmptyScores("no scores to select from")
    if k_min < 1:
        raise ValueError("k_min must be >= 1")
    ids = list(scores)
    vals = np.array([scores[i] for i in ids], dtype=np.float64)
    order = np.argsort(-vals, kind="stable")
    best = float(vals[order[0]])
    if best > 0:
        return [ids[j] for j in order if vals[j] > 0]
    c = fallback_count(best, k_min, len(ids) if pool_size is None else min(pool_size, len(ids)))
    return [ids[j] for j in order[:c]]


def fallback_count(best: float, k_min: int, pool_size: int) -> int | None:
    """Top-c size used when no score is positive; None otherwise."""
    if best > 0:
        return None
    return min(pool_size, max(math.ceil(abs(best)), k_min))


def round_budget(gamma: float, capacity: int) -> int:
    # round() is half-to-even
    return min(capacity, max(1, round(gamma * capacity)))


def allocate(budget: int, probs: np.ndarray, caps: np.ndarray, rng: RngStream) -> tuple[np.ndarray, int]:
    """Multinomial allocation repaired to respect per-LoRA caps.

    Overflow above a cap is clipped and re-drawn multinomially over the LoRAs
    still below their cap, with probabilities renormalized among them.
    Returns the allocation and the number of repair rounds.
    """
    caps = np.asarray(caps, dtype=np.int64)
    if budget > caps.sum():
        raise ValueError(f"budget {budget} exceeds capacity {caps.sum()}")
    alloc = multinomial_sample(budget, probs, rng)
    rounds = 0
    while True:
        overflow = np.maximum(alloc - caps, 0)
        residue = int(overflow.sum())
        if residue == 0:
            return alloc, rounds
        rounds += 1
        alloc = alloc - overflow
        open_ = alloc < caps
        p = np.where(open_, probs, 0.0)
        if p.sum() <= 0:
            # all remaining mass underflowed; spread uniformly over open slots
            p = open_.astype(np.float64)
        alloc = alloc + multinomial_sample(residue, p / p.sum(), rng)


def plan_for_candidates(candidates: Sequence[str], scores: Mapping[str, float], ranks: Mapping[str, int],
                        gamma: float, rng: RngStream, fallback: int | None = None) -> RoutingPlan:
    if not candidates:
        raise NoCandidates("candidate set is empty")
    cand = tuple(candidates)
    r = np.array([ranks[i] for i in cand], dtype=np.int64)
    capacity = int(r.sum())
    budget = round_budget(gamma, capacity)
    pi = softmax([scores[i] for i in cand])
    alloc, rounds = allocate(budget, pi, r, rng)
    mean_rank = capacity / len(cand)
    return RoutingPlan(
        candidates=cand,
        scores={i: float(scores[i]) for i in cand},
        probs={i: float(p) for i, p in zip(cand, pi)},
        budget=budget,
        allocation={i: int(o) for i, o in zip(cand, alloc)},
        mean_rank=mean_rank,
        scale=math.sqrt(mean_rank / budget),
        repair_iterations=rounds,
        fallback_count=fallback,
    )


def make_plan(scores: Mapping[str, float], ranks: Mapping[str, int], config: RouterConfig,
              rng: RngStream) -> RoutingPlan:
    candidates = select_candidates(scores, config.k_min, len(scores))
    fallback = fallback_count(max(scores.values()), config.k_min, len(scores))
    return plan_for_candidates(candidates, scores, ranks, config.gamma, rng, fallback)


def route_tokens(plan: RoutingPlan, pool: PoolManifest, layer_index: int, x,
                 ranking: str = "raw") -> tuple[RocSelection, np.ndarray]:
    """Token-level ROC routing for one layer.

    ``x`` is one token (d,) or a batch (T, d). Each candidate keeps its top
    ``o_i`` ROCs by projection a_ij . x; the summed dyads are multiplied by
    the plan's scale.
    """
    x = np.asarray(x, dtype=np.float64)
    tokens = np.atleast_2d(x)
    if tokens.shape[1] != pool.model_dim:
        raise DimensionMismatch(f"token dim {tokens.shape[1]} != model dim {pool.model_dim}")
    sel = RocSelection(layer_index)
    delta = np.zeros_like(tokens)
    for lid in plan.candidates:
        o = plan.allocation[lid]
        layer = pool.get(lid).layers[layer_index]
        proj = tokens @ layer.a.T
        sel.projections[lid] = proj
        if o == 0:
            sel.selected[lid] = np.zeros((tokens.shape[0], 0), dtype=np.int64)
            continue
        if o >= layer.rank:
            idx = np.broadcast_to(np.arange(layer.rank), proj.shape)
            kept = proj
        else:
            key = proj if ranking == "raw" else np.abs(proj)
            idx = top_k_rows(key, o)
            mask = np.zeros_like(proj)
            np.put_along_axis(mask, idx, 1.0, axis=1)
            kept = proj * mask
        sel.selected[lid] = np.array(idx)
        delta += kept @ layer.b.T
    delta *= plan.scale
    return sel, (delta[0] if x.ndim == 1 else delta)


LayerDelta = Callable[[int, np.ndarray], np.ndarray]


def forward_with(backbone: ToyBackbone, x, layer_delta: LayerDelta) -> np.ndarray:
    """Run the backbone, adding ``layer_delta(layer, h)`` at every layer."""
    x = np.asarray(x, dtype=np.float64)
    h = np.atleast_2d(x)
    if h.shape[1] != backbone.dim:
        raise DimensionMismatch(f"input dim {h.shape[1]} != backbone dim {backbone.dim}")
    for li, w0 in enumerate(backbone.layers):
        h = h @ w0.T + layer_delta(li, h)
        if backbone.nonlinearity == "tanh":
            h = np.tanh(h)
    return h[0] if x.ndim == 1 else h


def forward(backbone: ToyBackbone, pool: PoolManifest, plan: RoutingPlan, x, ranking: str = "raw",
            trace: list | None = None) -> np.ndarray:
    """Routed forward pass; one plan per sequence, ROCs re-picked per layer and token."""
    if backbone.dim != pool.model_dim or len(backbone.layers) != pool.num_layers:
        raise DimensionMismatch("backbone and pool disagree on dim or layer count")

    def delta(li, h):
        sel, out = route_tokens(plan, pool, li, h, ranking)
        if trace is not None:
            trace.append(sel)
        return out

    return forward_with(backbone, x, delta)
