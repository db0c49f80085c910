"""Gaussian task models over instructed embeddings, plus embedding providers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    IrreparablySingular,
    MissingSampleSource,
    NotPositiveDefinite,
    TooFewSamples,
)
from .numerics import RngStream, as_matrix, as_vector, cholesky, log_det_from_cholesky, mahalanobis_sq

if TYPE_CHECKING:
    from .lora_pool import PoolManifest

DEFAULT_INSTRUCTION = "Represent the sentence for similar task retrieval"
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianTaskModel:
    lora_id: str
    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray = field(repr=False)
    log_det: float
    reg_lambda: float = 0.0

    @classmethod
    def from_moments(cls, lora_id: str, mu, sigma, reg_lambda: float = 0.0) -> "GaussianTaskModel":
        mu = as_vector(mu, "mu")
        sigma = as_matrix(sigma, "sigma")
        if sigma.shape != (mu.size, mu.size):
            raise DimensionMismatch(f"sigma {sigma.shape} does not match mu ({mu.size},)")
        chol = cholesky(sigma)
        return cls(lora_id, mu, sigma, chol, log_det_from_cholesky(chol), float(reg_lambda))

    @property
    def dim(self) -> int:
        return self.mu.size

    def log_pdf(self, z) -> np.ndarray | float:
        maha = mahalanobis_sq(z, self.mu, self.chol)
        return -0.5 * (self.dim * LOG_2PI + self.log_det + maha)

    def sample(self, n: int, rng: RngStream, scale: float = 1.0) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.mu + scale * eps @ self.chol.T


def gaussian(mu, sigma, name: str = "") -> GaussianTaskModel:
    return GaussianTaskModel.from_moments(name, mu, sigma)


def fit_gaussian(samples, reg_lambda: float | None = None, lora_id: str = "") -> GaussianTaskModel:
    """Sample mean and unbiased covariance, shrunk by reg_lambda * I.

    With ``reg_lambda=None`` the shrinkage defaults to 1e-3 * trace / dim.
    If the regularized covariance is still not positive definite, lambda is
    escalated by factors of 10 up to 1e-2 * trace / dim.
    """
    x = as_matrix(samples, "samples")
    m, dim = x.shape
    if m < 2:
        raise TooFewSamples(f"need at least 2 samples, got {m}")
    if reg_lambda is not None and reg_lambda < 0:
        raise ValueError("reg_lambda must be non-negative")
    mu = x.mean(axis=0)
    centered = x - mu
    raw = centered.T @ centered / (m - 1)
    raw = 0.5 * (raw + raw.T)
    trace = float(np.trace(raw))
    # an all-identical cloud has no scale of its own; fall back to unit scale
    scale = trace / dim if trace > 0 else 1.0
    cap = 1e-2 * scale
    lam = 1e-3 * scale if reg_lambda is None else float(reg_lambda)
    ladder = [lam]
    nxt = lam * 10 if lam > 0 else 1e-3 * scale
    while nxt <= cap * (1 + 1e-12):
        ladder.append(nxt)
        nxt *= 10
    for lam_try in ladder:
        sigma = raw + lam_try * np.eye(dim)
        try:
            return GaussianTaskModel.from_moments(lora_id, mu, sigma, reg_lambda=lam_try)
        except NotPositiveDefinite:
            continue
    raise IrreparablySingular(f"covariance stays singular up to lambda={ladder[-1]:.3e}")


def score(model: GaussianTaskModel, z) -> np.ndarray | float:
    """Per-dimension log-likelihood (1/d) log p(z)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.dim:
        raise DimensionMismatch(f"embedding dim {z.shape[-1]} != model dim {model.dim}")
    return model.log_pdf(z) / model.dim


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, instruction: str, text: str) -> np.ndarray: ...

    def sample_texts(self, source: str, m: int, rng: RngStream) -> list[str]: ...


def text_for(task: str, item) -> str:
    return f"{task}::{item}"


def task_of(text: str) -> str:
    task, sep, _ = text.partition("::")
    if not sep:
        raise MissingSampleSource(f"input {text!r} carries no task tag")
    return task


@dataclass
class SyntheticEmbedder:
    """Stand-in sentence encoder.

    An input ``"<task>::<id>"`` embeds to a draw from
    N(mu_task, noise_scale^2 * Sigma_task), seeded by (seed, text) only.
    """

    task_models: dict[str, GaussianTaskModel]
    seed: int
    noise_scale: float = 1.0
    dim: int = field(init=False)
    _root: RngStream = field(init=False, repr=False)

    def __post_init__(self):
        dims = {g.dim for g in self.task_models.values()}
        if len(dims) != 1:
            raise DimensionMismatch(f"task models disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop()
        self._root = RngStream(self.seed, 0).child("embed")

    @classmethod
    def from_moments(cls, tasks: dict[str, tuple], seed: int, noise_scale: float = 1.0) -> "SyntheticEmbedder":
        models = {name: gaussian(mu, sigma, name) for name, (mu, sigma) in tasks.items()}
        return cls(models, seed, noise_scale)

    def has_source(self, source: str) -> bool:
        return source in self.task_models

    def embed(self, instruction: str, text: str) -> np.ndarray:
        task = task_of(text)
        if task not in self.task_models:
            raise MissingSampleSource(f"no task distribution for {task!r}")
        model = self.task_models[task]
        rng = self._root.child(text)
        return model.sample(1, rng, self.noise_scale)[0]

    def embed_many(self, instruction: str, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(instruction, t) for t in texts])

    def sample_texts(self, source: str, m: int, rng: RngStream) -> list[str]:
        if source not in self.task_models:
            raise MissingSampleSource(f"no sample source for LoRA {source!r}")
        ids = rng.gen.choice(1_000_000_000, size=m, replace=False)
        return [text_for(source, f"fit-{int(i)}") for i in ids]


def fit_pool_gaussians(
    pool: "PoolManifest",
    provider: EmbeddingProvider,
    m: int = 20,
    instruction: str = DEFAULT_INSTRUCTION,
    rng: RngStream | None = None,
    reg_lambda: float | None = None,
) -> "PoolManifest":
    """Fit one Gaussian per LoRA from m instructed embeddings of its domain."""
    if m < 2:
        raise TooFewSamples(f"need at least 2 samples per LoRA, got m={m}")
    rng = rng if rng is not None else RngStream(0)
    fitted = {}
    for lora in pool.loras:
        texts = provider.sample_texts(lora.id, m, rng.child("fit", lora.id))
        z = np.stack([provider.embed(instruction, t) for t in texts])
        fitted[lora.id] = replace(fit_gaussian(z, reg_lambda), lora_id=lora.id)
    return pool.with_gaussians(fitted)
