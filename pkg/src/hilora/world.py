"""Synthetic task worlds: a LoRA pool, a toy backbone, task embeddings and token streams.

Each seen task owns one LoRA. Its inputs embed near that task's Gaussian and
their tokens excite the LoRA's cluster directions, so the task-true LoRA is
the fidelity reference. Unseen tasks borrow the tokens of their KL-closest
source LoRA, which is also their reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, MissingSampleSource
from .lora_pool import LoraLayer, LoraModule, PoolManifest, PoolSpec, synthesize_pool
from .numerics import RngStream
from .router import ToyBackbone, synthesize_backbone
from .task_model import (
    DEFAULT_INSTRUCTION,
    GaussianTaskModel,
    SyntheticEmbedder,
    fit_pool_gaussians,
    gaussian,
    text_for,
)
from .theory import closest_source, gaussian_kl, random_spd


@dataclass
class WorldSpec:
    """Generator settings for a task world.

    ``kind="separated"``: one LoRA per task, cluster directions that share a
    common component across LoRAs (weight ``shared``), well separated task
    embeddings. ``kind="interference"``: two LoRAs reading the same input
    direction but writing opposite outputs along it.
    """

    kind: str = "separated"
    num_tasks: int = 5
    model_dim: int = 16
    embed_dim: int = 16
    num_layers: int = 3
    ranks: int | list[int] = 8
    clusters: int = 2
    shared: float = 0.3
    a_signal: float = 2.0
    a_noise: float = 0.3
    b_signal: float = 0.05
    b_noise: float = 0.005
    embed_scale: float = 1e-3
    embed_spread: float = 6.0
    tokens_per_input: int = 4
    token_scale: float = 1.0
    token_noise: float = 0.1
    fit_samples: int = 20
    backbone: str = "residual"

    def validate(self) -> None:
        if self.kind not in ("separated", "interference"):
            raise InvalidSpec(f"unknown world kind {self.kind!r}")
        if self.num_tasks < 1:
            raise InvalidSpec("num_tasks must be >= 1")
        if not 0.0 <= self.shared < 1.0:
            raise InvalidSpec("shared must lie in [0, 1)")
        if self.embed_scale <= 0 or self.embed_spread < 0:
            raise InvalidSpec("embed_scale must be positive and embed_spread non-negative")
        if self.tokens_per_input < 1:
            raise InvalidSpec("tokens_per_input must be >= 1")
        if self.fit_samples < 2:
            raise InvalidSpec("fit_samples must be >= 2")
        if self.backbone not in ("residual", "gaussian"):
            raise InvalidSpec(f"unknown backbone {self.backbone!r}")


@dataclass(frozen=True)
class EvalInput:
    input_id: str
    task: str
    seen: bool
    oracle: str
    z: np.ndarray
    tokens: np.ndarray  # (T, d)


@dataclass
class World:
    spec: WorldSpec
    seed: int
    pool: PoolManifest  # carries the fitted Gaussians
    backbone: ToyBackbone
    embedder: SyntheticEmbedder
    token_dirs: dict[str, np.ndarray]  # lora id -> (clusters, d) unit directions
    oracle_of: dict[str, str]  # task -> reference LoRA
    seen_tasks: list[str]
    unseen_tasks: list[str] = field(default_factory=list)
    instruction: str = DEFAULT_INSTRUCTION

    @property
    def tasks(self) -> list[str]:
        return self.seen_tasks + self.unseen_tasks

    @property
    def fitted(self) -> list[GaussianTaskModel]:
        return [self.pool.gaussians[i] for i in self.pool.ids]

    def make_input(self, task: str, item) -> EvalInput:
        if task not in self.oracle_of:
            raise MissingSampleSource(f"unknown task {task!r}")
        text = text_for(task, item)
        z = self.embedder.embed(self.instruction, text)
        oracle = self.oracle_of[task]
        dirs = self.token_dirs[oracle]
        rng = RngStream(self.seed, 0).child("tokens", text)
        pick = rng.gen.integers(dirs.shape[0], size=self.spec.tokens_per_input)
        eps = rng.standard_normal((self.spec.tokens_per_input, self.pool.model_dim))
        tokens = self.spec.token_scale * dirs[pick] + self.spec.token_noise * eps
        return EvalInput(text, task, task in self.seen_tasks, oracle, z, tokens)

    def inputs(self, task: str, n: int, offset: int = 0) -> list[EvalInput]:
        return [self.make_input(task, f"eval-{offset + i}") for i in range(n)]

    def add_unseen_task(self, name: str, anchor: str, target_kl: float, rng: RngStream) -> str:
        """Register an unseen task exactly ``target_kl`` nats from ``anchor``'s fitted Gaussian.

        The task keeps the fitted covariance and shifts the fitted mean along
        a random direction; its reference LoRA is the KL-closest fitted source.
        """
        fit = self.pool.gaussians[anchor]
        v = rng.standard_normal(fit.dim)
        v /= np.linalg.norm(v)
        # KL(N(mu + t v, S) || N(mu, S)) = t^2/2 v^T S^-1 v
        t = math.sqrt(2.0 * target_kl / float(v @ np.linalg.solve(fit.sigma, v)))
        q = gaussian(fit.mu + t * v, fit.sigma, name)
        self.embedder.task_models[name] = q
        self.oracle_of[name] = self.pool.ids[closest_source(q, self.fitted)]
        self.unseen_tasks.append(name)
        return name

    def add_unseen_tasks(self, count: int, target_kl: float) -> list[str]:
        """Unseen tasks anchored round-robin on the pool, each ``target_kl`` from its anchor."""
        rng = RngStream(self.seed, 0).child("unseen")
        ids = self.pool.ids
        return [self.add_unseen_task(f"unseen{j}", ids[j % len(ids)], target_kl, rng.child(j)) for j in range(count)]


def _shared_directions(spec: WorldSpec, rng: RngStream) -> np.ndarray:
    d = spec.model_dim
    common = rng.standard_normal((spec.clusters, d))
    own = rng.standard_normal((spec.num_tasks, spec.clusters, d))
    u = math.sqrt(spec.shared) * common[None] / np.linalg.norm(common, axis=-1, keepdims=True)[None]
    u = u + math.sqrt(1 - spec.shared) * own / np.linalg.norm(own, axis=-1, keepdims=True)
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def task_embeddings(spec: WorldSpec, names: list[str], rng: RngStream) -> dict[str, GaussianTaskModel]:
    s = spec.embed_scale
    out = {}
    for name in names:
        g = rng.standard_normal(spec.embed_dim)
        mu = s * spec.embed_spread * g / np.linalg.norm(g)
        out[name] = gaussian(mu, s * s * random_spd(spec.embed_dim, rng, 0.5, 1.5), name)
    return out


def _interference_pool(spec: WorldSpec, rng: RngStream) -> tuple[PoolManifest, dict[str, np.ndarray]]:
    d = spec.model_dim
    q, _ = np.linalg.qr(rng.standard_normal((d, 3)))
    u_shared, u0, u1 = q.T
    plans = {"lora0": ([u_shared, u0], [1.0, 1.0]), "lora1": ([u_shared, u1], [-1.0, 1.0])}
    r = spec.ranks if isinstance(spec.ranks, int) else spec.ranks[0]
    loras, dirs = [], {}
    for lid, (us, signs) in plans.items():
        us = np.stack(us)
        cl = np.arange(r) % 2
        layers = []
        for _ in range(spec.num_layers):
            a = spec.a_signal * us[cl] + spec.a_noise * rng.standard_normal((r, d))
            b = spec.b_signal * np.asarray(signs)[cl, None] * us[cl] + spec.b_noise * rng.standard_normal((r, d))
            layers.append(LoraLayer(a, b.T))
        loras.append(LoraModule(lid, r, tuple(layers)))
        dirs[lid] = us
    return PoolManifest(d, spec.num_layers, tuple(loras)), dirs


def build_world(spec: WorldSpec, seed: int) -> World:
    spec.validate()
    root = RngStream(seed, 0)
    if spec.kind == "separated":
        pspec = PoolSpec(spec.num_tasks, spec.model_dim, spec.num_layers, spec.ranks, structure="clustered",
                         clusters=spec.clusters, a_signal=spec.a_signal, a_noise=spec.a_noise,
                         b_signal=spec.b_signal, b_noise=spec.b_noise)
        dirs = _shared_directions(spec, root.child("directions"))
        pool = synthesize_pool(pspec, root.child("pool"), dirs)
        token_dirs = {lid: dirs[i] for i, lid in enumerate(pool.ids)}
    else:
        pool, token_dirs = _interference_pool(spec, root.child("pool"))
    task_models = task_embeddings(spec, pool.ids, root.child("embeddings"))
    embedder = SyntheticEmbedder(task_models, seed)
    pool = fit_pool_gaussians(pool, embedder, m=spec.fit_samples, rng=root.child("fit"))
    backbone = synthesize_backbone(spec.model_dim, spec.num_layers, root.child("backbone"), spec.backbone)
    return World(spec, seed, pool, backbone, embedder, token_dirs, {t: t for t in pool.ids}, list(pool.ids))


def separated_world(seed: int, **overrides) -> World:
    return build_world(WorldSpec(**overrides), seed)


def interference_world(seed: int, **overrides) -> World:
    """Two overlapping tasks whose LoRAs disagree on a shared input direction.

    Task embeddings are broad (unit scale), so every score is negative, both
    LoRAs are candidates on every input, and the allocation decides how much
    of the conflicting one leaks in.
    """
    params = dict(kind="interference", num_tasks=2, ranks=8, clusters=2, embed_scale=1.0, embed_spread=4.0)
    params.update(overrides)
    return build_world(WorldSpec(**params), seed)


def world_from_manifest(pool: PoolManifest, seed: int, spec: WorldSpec | None = None) -> World:
    """Wrap a saved pool: its fitted Gaussians double as the task distributions.

    Tokens excite the top right-singular directions of each LoRA's first-layer A.
    """
    spec = spec or WorldSpec()
    if not pool.gaussians:
        raise InvalidSpec("manifest carries no fitted Gaussians; run `pool fit` first")
    root = RngStream(seed, 0)
    token_dirs = {}
    for lora in pool.loras:
        _, _, vt = np.linalg.svd(lora.layers[0].a, full_matrices=False)
        token_dirs[lora.id] = vt[: min(spec.clusters, lora.rank)]
    embedder = SyntheticEmbedder(dict(pool.gaussians), seed)
    backbone = synthesize_backbone(pool.model_dim, pool.num_layers, root.child("backbone"), spec.backbone)
    return World(spec, seed, pool, backbone, embedder, token_dirs, {t: t for t in pool.ids}, list(pool.ids))
