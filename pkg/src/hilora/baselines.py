"""Comparison routers evaluated alongside HiLoRA on the toy backbone."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .errors import EmptyPool, InvalidSpec
from .lora_pool import PoolManifest, merged_module
from .numerics import RngStream, top_k_indices, top_k_rows
from .router import RouterConfig, RoutingPlan, make_plan

BASELINES = ("ensemble", "merged", "retriever_topk", "gs_only", "roc_only")


def ensemble_delta(pool: PoolManifest, layer_index: int, x) -> np.ndarray:
    """Average of every LoRA's full update."""
    if len(pool) == 0:
        raise EmptyPool("ensemble over an empty pool")
    outs = [m.apply(layer_index, x) for m in pool.loras]
    return np.mean(outs, axis=0)


def retriever_plan(z, pool: PoolManifest, k: int) -> RoutingPlan:
    """Top-k LoRAs by cosine(z, mu_i), fully activated and averaged."""
    if pool.gaussians is None:
        raise InvalidSpec("retriever needs fitted Gaussians for the LoRA embeddings")
    z = np.asarray(z, dtype=np.float64)
    ids = pool.ids
    mus = np.stack([pool.gaussians[i].mu for i in ids])
    cos = mus @ z / (np.linalg.norm(mus, axis=1) * np.linalg.norm(z) + 1e-300)
    k = min(k, len(ids))
    order = np.argsort(-cos, kind="stable")[:k]
    cand = tuple(ids[j] for j in order)
    ranks = pool.ranks
    budget = sum(ranks[i] for i in cand)
    return RoutingPlan(
        candidates=cand,
        scores={ids[j]: float(cos[j]) for j in order},
        probs={i: 1.0 / k for i in cand},
        budget=budget,
        allocation={i: ranks[i] for i in cand},
        mean_rank=budget / k,
        scale=1.0 / k,
    )


def gs_only_plan(scores: Mapping[str, float], ranks: Mapping[str, int], config: RouterConfig,
                 rng: RngStream) -> RoutingPlan:
    """Sequence-level routing only: the full rank of every candidate is active."""
    full = RouterConfig(gamma=1.0, k_min=config.k_min, projection_ranking=config.projection_ranking,
                        seed=config.seed, roc_top_k=config.roc_top_k, retriever_k=config.retriever_k)
    return make_plan(scores, ranks, full, rng)


class RocOnlyRouter:
    """Token-level routing only: global top-k ROCs over the whole pool.

    The kept dyads are scaled by sqrt(mean pool rank / k), the same variance
    normalization HiLoRA applies with the whole pool as its candidate set.
    """

    def __init__(self, pool: PoolManifest, k: int, ranking: str = "raw"):
        self.pool = pool
        total = sum(m.rank for m in pool.loras)
        self.k = min(k, total)
        self.ranking = ranking
        self.scale = math.sqrt(total / len(pool) / self.k)
        self._a = [np.concatenate([m.layers[li].a for m in pool.loras]) for li in range(pool.num_layers)]
        self._b = [np.concatenate([m.layers[li].b for m in pool.loras], axis=1) for li in range(pool.num_layers)]
        self._owner = np.repeat(np.arange(len(pool)), [m.rank for m in pool.loras])
        self.fired: set[str] = set()  # LoRAs with at least one kept ROC since the last reset

    def delta(self, layer_index: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        tokens = np.atleast_2d(x)
        proj = tokens @ self._a[layer_index].T
        key = proj if self.ranking == "raw" else np.abs(proj)
        idx = top_k_rows(key, self.k)
        mask = np.zeros_like(proj)
        np.put_along_axis(mask, idx, 1.0, axis=1)
        ids = self.pool.ids
        self.fired.update(ids[o] for o in np.unique(self._owner[idx]))
        out = self.scale * ((proj * mask) @ self._b[layer_index].T)
        return out[0] if x.ndim == 1 else out


def route_baseline(kind: str, pool: PoolManifest, *, layer_index: int | None = None, x=None,
                   z=None, scores: Mapping[str, float] | None = None,
                   config: RouterConfig | None = None, rng: RngStream | None = None):
    """Dispatch to one baseline.

    ``ensemble``, ``merged`` and ``roc_only`` return the layer update for
    ``x``; ``retriever_topk`` and ``gs_only`` return a RoutingPlan.
    """
    config = config or RouterConfig()
    if kind == "ensemble":
        return ensemble_delta(pool, layer_index, x)
    if kind == "merged":
        return merged_module(pool).apply(layer_index, x)
    if kind == "roc_only":
        return RocOnlyRouter(pool, config.roc_top_k, config.projection_ranking).delta(layer_index, x)
    if kind == "retriever_topk":
        return retriever_plan(z, pool, config.retriever_k)
    if kind == "gs_only":
        return gs_only_plan(scores, pool.ranks, config, rng or RngStream(config.seed))
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")


def global_top_rocs(pool: PoolManifest, layer_index: int, x, k: int) -> list[tuple[str, int]]:
    """(lora_id, roc_index) pairs of the k largest projections for one token."""
    x = np.asarray(x, dtype=np.float64)
    labels = [(m.id, j) for m in pool.loras for j in range(m.rank)]
    proj = np.concatenate([m.layers[layer_index].a @ x for m in pool.loras])
    return [labels[i] for i in top_k_indices(proj, min(k, len(labels)))]

