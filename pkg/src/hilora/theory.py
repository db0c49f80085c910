"""Closed-form LoRA-identification error bounds and their Monte-Carlo checks.

Gaussians are passed as :class:`GaussianTaskModel` instances (or ``(mu,
sigma)`` pairs); cached Cholesky factors are reused when present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InfiniteMoment, InvalidIndex, NotPositiveDefinite
from .numerics import RngStream, cholesky, inverse_from_cholesky, log_det_from_cholesky, mahalanobis_sq
from .task_model import GaussianTaskModel, gaussian, score

ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
Z95 = 1.959963984540054


def as_gaussian(g) -> GaussianTaskModel:
    if isinstance(g, GaussianTaskModel):
        return g
    mu, sigma = g
    return gaussian(mu, sigma)


def _check_dims(*gs: GaussianTaskModel) -> None:
    dims = {g.dim for g in gs}
    if len(dims) != 1:
        raise DimensionMismatch(f"Gaussians disagree on dimension: {sorted(dims)}")


@dataclass(frozen=True)
class GaussianPair:
    first: GaussianTaskModel
    second: GaussianTaskModel

    @classmethod
    def of(cls, mu_i, sigma_i, mu_j, sigma_j) -> "GaussianPair":
        return cls(gaussian(mu_i, sigma_i), gaussian(mu_j, sigma_j))


def bhattacharyya_exponent(p, q=None) -> float:
    """B = 1/8 d^T S^-1 d + 1/2 log(|S| / sqrt(|S_i||S_j|)), S = (S_i + S_j)/2.

    Accepts a GaussianPair or two Gaussians.
    """
    if q is None:
        gi, gj = p.first, p.second
    else:
        gi, gj = as_gaussian(p), as_gaussian(q)
    _check_dims(gi, gj)
    avg = 0.5 * (gi.sigma + gj.sigma)
    chol = cholesky(avg)
    quad = mahalanobis_sq(gi.mu, gj.mu, chol)
    logdet_term = log_det_from_cholesky(chol) - 0.5 * (gi.log_det + gj.log_det)
    return max(0.0, 0.125 * quad + 0.5 * logdet_term)


def pairwise_bayes_bound(p, q=None) -> float:
    """exp(-B): bound on the two-class Bayes error without priors."""
    return math.exp(-bhattacharyya_exponent(p, q))


def prior_weighted_bound(p, q, prior_p: float, prior_q: float) -> float:
    """sqrt(pi_i pi_j) exp(-B); not used by the scoring path."""
    return math.sqrt(prior_p * prior_q) * pairwise_bayes_bound(p, q)


def bhattacharyya_matrix(models: Sequence) -> np.ndarray:
    gs = [as_gaussian(m) for m in models]
    n = len(gs)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = bhattacharyya_exponent(gs[i], gs[j])
    return out


def topk_id_bound(target: int, models: Sequence, k: int, clamp: bool = True) -> float:
    """(1/k) sum_{j != target} exp(-B_target,j)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= target < len(models):
        raise InvalidIndex(f"target {target} outside pool of {len(models)}")
    gs = [as_gaussian(m) for m in models]
    total = sum(pairwise_bayes_bound(gs[target], gs[j]) for j in range(len(gs)) if j != target)
    raw = total / k
    return min(1.0, raw) if clamp else raw


def gaussian_kl(q, p) -> float:
    """KL(q || p) between Gaussians."""
    gq, gp = as_gaussian(q), as_gaussian(p)
    _check_dims(gq, gp)
    prec_p = inverse_from_cholesky(gp.chol)
    trace = float(np.sum(prec_p * gq.sigma))
    quad = mahalanobis_sq(gq.mu, gp.mu, gp.chol)
    return max(0.0, 0.5 * (trace + quad - gq.dim + gp.log_det - gq.log_det))


def closest_source(q, sources: Sequence) -> int:
    kls = [gaussian_kl(q, s) for s in sources]
    return int(np.argmin(kls))


def chernoff_coefficient(pa, pb, alpha: float) -> float:
    """rho_alpha(pa, pb) = integral of pa^(1-alpha) pb^alpha.

    With S = alpha*Sigma_a + (1-alpha)*Sigma_b and d = mu_b - mu_a:
    |Sigma_a|^(alpha/2) |Sigma_b|^((1-alpha)/2) |S|^(-1/2) exp(-alpha(1-alpha)/2 d^T S^-1 d).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    ga, gb = as_gaussian(pa), as_gaussian(pb)
    _check_dims(ga, gb)
    mix = alpha * ga.sigma + (1.0 - alpha) * gb.sigma
    chol = cholesky(0.5 * (mix + mix.T))
    quad = mahalanobis_sq(gb.mu, ga.mu, chol)
    log_rho = (0.5 * alpha * ga.log_det + 0.5 * (1.0 - alpha) * gb.log_det
               - 0.5 * log_det_from_cholesky(chol) - 0.5 * alpha * (1.0 - alpha) * quad)
    return math.exp(log_rho)


@dataclass(frozen=True)
class MomentTerms:
    """Pieces of the alpha-moment closed form, in coordinates centred at mu_q."""

    weighted_precision: np.ndarray  # M
    mean_precision: np.ndarray  # h
    correction: float  # K
    log_scale: float  # log C
    log_moment: float


def alpha_moment_terms(q, pj, pistar, alpha: float) -> MomentTerms:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    gq, gj, gs = as_gaussian(q), as_gaussian(pj), as_gaussian(pistar)
    _check_dims(gq, gj, gs)
    # the moment is translation invariant; centring at mu_q keeps h and K small
    mj = gj.mu - gq.mu
    ms = gs.mu - gq.mu
    prec_q = inverse_from_cholesky(gq.chol)
    prec_j = inverse_from_cholesky(gj.chol)
    prec_s = inverse_from_cholesky(gs.chol)
    m = prec_q + alpha * prec_j - alpha * prec_s
    m = 0.5 * (m + m.T)
    h = alpha * prec_j @ mj - alpha * prec_s @ ms
    k = 0.5 * alpha * (mj @ prec_j @ mj - ms @ prec_s @ ms)
    log_c = -0.5 * alpha * gj.log_det + 0.5 * alpha * gs.log_det - 0.5 * gq.log_det
    try:
        chol_m = cholesky(m)
    except NotPositiveDefinite as exc:
        raise InfiniteMoment(f"weighted precision not positive definite at alpha={alpha}") from exc
    quad = mahalanobis_sq(h, np.zeros_like(h), chol_m)
    log_moment = log_c - 0.5 * log_det_from_cholesky(chol_m) + 0.5 * quad - k
    return MomentTerms(m, h, float(k), float(log_c), float(log_moment))


def alpha_moment(q, pj, pistar, alpha: float) -> float:
    """E_{z~q}[(p_j(z) / p_istar(z))^alpha]; raises InfiniteMoment if it diverges.

    A finite moment too large for a double is returned as inf.
    """
    log_moment = alpha_moment_terms(q, pj, pistar, alpha).log_moment
    return math.exp(log_moment) if log_moment < 709.0 else math.inf


@dataclass(frozen=True)
class OodScenario:
    q: GaussianTaskModel
    sources: tuple[GaussianTaskModel, ...]
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        object.__setattr__(self, "q", as_gaussian(self.q))
        object.__setattr__(self, "sources", tuple(as_gaussian(s) for s in self.sources))
        _check_dims(self.q, *self.sources)


@dataclass(frozen=True)
class OodBound:
    raw: float
    istar: int
    alpha: float
    k: int
    infinite_terms: tuple[int, ...] = ()

    @property
    def vacuous(self) -> bool:
        return bool(self.infinite_terms) or self.raw >= 1.0

    @property
    def finite(self) -> bool:
        return not self.infinite_terms

    @property
    def value(self) -> float:
        """Bound clamped to [0, 1] for reporting."""
        return 1.0 if self.vacuous else self.raw

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "k": self.k,
            "istar": self.istar,
            "raw": self.raw if self.finite else None,
            "bound": self.value,
            "vacuous": self.vacuous,
            "infinite_terms": list(self.infinite_terms),
        }


def topk_ood_bound(scenario: OodScenario, k: int) -> OodBound:
    """(1/k) sum_{j != istar} alpha-moment; diverging terms flag the bound vacuous."""
    if k < 1:
        raise ValueError("k must be >= 1")
    istar = closest_source(scenario.q, scenario.sources)
    total = 0.0
    infinite = []
    for j, src in enumerate(scenario.sources):
        if j == istar:
            continue
        try:
            total += alpha_moment(scenario.q, src, scenario.sources[istar], scenario.alpha)
        except InfiniteMoment:
            infinite.append(j)
    raw = math.inf if infinite else total / k
    return OodBound(raw, istar, scenario.alpha, k, tuple(infinite))


def best_ood_bound(q, sources: Sequence, k: int, alphas: Sequence[float] = ALPHA_GRID) -> tuple[OodBound | None, list[OodBound]]:
    """Sweep alpha; return the smallest finite bound (or None) and the full table."""
    table = [topk_ood_bound(OodScenario(q, tuple(sources), a), k) for a in alphas]
    finite = [b for b in table if b.finite]
    best = min(finite, key=lambda b: b.raw) if finite else None
    return best, table


# -- Monte Carlo ------------------------------------------------------------


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be positive")
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass(frozen=True)
class ExclusionRate:
    rate: float
    low: float
    high: float
    target: int
    k: int
    n_trials: int

    @property
    def half_width(self) -> float:
        return 0.5 * (self.high - self.low)

    def to_dict(self) -> dict:
        return {"k": self.k, "target": self.target, "rate": self.rate, "ci95": [self.low, self.high],
                "n_trials": self.n_trials}


def rival_counts(models: Sequence, truth, n_trials: int, rng: RngStream) -> tuple[int, np.ndarray]:
    """Sample z from the truth and count, per trial, the models scoring >= the target.

    ``truth`` is an index into ``models`` (in-distribution) or a Gaussian q, in
    which case the target is the KL-closest model.
    """
    gs = [as_gaussian(m) for m in models]
    if isinstance(truth, (int, np.integer)):
        if not 0 <= truth < len(gs):
            raise InvalidIndex(f"truth index {truth} outside pool of {len(gs)}")
        target, source = int(truth), gs[int(truth)]
    else:
        source = as_gaussian(truth)
        target = closest_source(source, gs)
    _check_dims(source, *gs)
    z = source.sample(n_trials, rng)
    scores = np.column_stack([score(g, z) for g in gs])
    beats = scores >= scores[:, [target]]
    beats[:, target] = False
    return target, beats.sum(axis=1)


def monte_carlo_exclusion_rate(models: Sequence, truth, k: int, n_trials: int, rng: RngStream) -> ExclusionRate:
    """Empirical probability that the target misses the top-k, with a Wilson 95% interval."""
    if n_trials < 1000:
        raise ValueError("n_trials must be >= 1000")
    target, counts = rival_counts(models, truth, n_trials, rng)
    return exclusion_from_counts(counts, target, k)


def exclusion_from_counts(counts: np.ndarray, target: int, k: int) -> ExclusionRate:
    n = counts.size
    misses = int(np.count_nonzero(counts >= k))
    lo, hi = wilson_interval(misses, n)
    return ExclusionRate(misses / n, lo, hi, target, k, n)


# -- scenario generators ---------------------------------------------------


def random_spd(dim: int, rng: RngStream, low: float = 0.3, high: float = 3.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = rng.gen.uniform(low, high, size=dim)
    s = (q * eig) @ q.T
    return 0.5 * (s + s.T)


def random_sources(dim: int, count: int, rng: RngStream, spread: float = 2.5) -> list[GaussianTaskModel]:
    return [gaussian(spread * rng.standard_normal(dim), random_spd(dim, rng), f"p{i}") for i in range(count)]


def variance_normalization_ratio(dim: int, r1: int, r2: int, trials: int, rng: RngStream) -> float:
    """Entry variance of A1 B1 over that of sqrt(r1/r2) A2 B2, standard-normal factors."""
    first, second = [], []
    for _ in range(trials):
        a1 = rng.standard_normal((dim, r1))
        b1 = rng.standard_normal((r1, dim))
        a2 = rng.standard_normal((dim, r2))
        b2 = rng.standard_normal((r2, dim))
        first.append(a1 @ b1)
        second.append(math.sqrt(r1 / r2) * (a2 @ b2))
    return float(np.var(np.stack(first)) / np.var(np.stack(second)))


# -- reports ---------------------------------------------------------------


def bounds_report(models: Sequence, ks: Sequence[int] = (1, 2, 3), names: Sequence[str] | None = None) -> dict:
    gs = [as_gaussian(m) for m in models]
    names = list(names) if names is not None else [g.lora_id or f"p{i}" for i, g in enumerate(gs)]
    bmat = bhattacharyya_matrix(gs)
    targets = []
    for t, name in enumerate(names):
        row = {"target": name}
        for k in ks:
            raw = topk_id_bound(t, gs, k, clamp=False)
            row[f"k={k}"] = {"raw": raw, "bound": min(1.0, raw)}
        targets.append(row)
    return {"names": names, "bhattacharyya": bmat.tolist(), "topk_id_bounds": targets}


@dataclass
class VerificationRow:
    scenario: int
    kind: str
    dim: int
    pool_size: int
    k: int
    rate: float
    ci95: tuple[float, float]
    bound: float | None
    alpha: float | None = None
    alpha_table: list = field(default_factory=list)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci95[1] - self.ci95[0])

    @property
    def holds(self) -> bool:
        return self.bound is None or self.rate <= self.bound + 3 * self.half_width

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "kind": self.kind, "dim": self.dim, "pool_size": self.pool_size,
            "k": self.k, "rate": self.rate, "ci95": list(self.ci95), "bound": self.bound,
            "alpha": self.alpha, "holds": self.holds, "alpha_table": self.alpha_table,
        }


def verify_id(n_scenarios: int, n_trials: int, rng: RngStream, ks: Sequence[int] = (1, 2, 3)) -> list[VerificationRow]:
    rows = []
    for s in range(n_scenarios):
        srng = rng.child("id", s)
        dim = int(srng.gen.integers(2, 5))
        count = int(srng.gen.integers(3, 9))
        models = random_sources(dim, count, srng)
        truth = int(srng.gen.integers(count))
        target, counts = rival_counts(models, truth, n_trials, srng.child("mc"))
        for k in ks:
            r = exclusion_from_counts(counts, target, k)
            bound = topk_id_bound(truth, models, k, clamp=False)
            rows.append(VerificationRow(s, "id", dim, count, k, r.rate, (r.low, r.high), bound))
    return rows


def verify_ood(n_scenarios: int, n_trials: int, rng: RngStream, ks: Sequence[int] = (1, 2, 3),
               min_kl: float = 0.1) -> list[VerificationRow]:
    rows = []
    for s in range(n_scenarios):
        srng = rng.child("ood", s)
        dim = int(srng.gen.integers(2, 5))
        count = int(srng.gen.integers(3, 9))
        models = random_sources(dim, count, srng)
        while True:
            base = models[int(srng.gen.integers(count))]
            q = gaussian(base.mu + 0.8 * srng.standard_normal(dim), random_spd(dim, srng, 0.3, 1.5), "q")
            if min(gaussian_kl(q, m) for m in models) >= min_kl:
                break
        target, counts = rival_counts(models, q, n_trials, srng.child("mc"))
        for k in ks:
            r = exclusion_from_counts(counts, target, k)
            best, table = best_ood_bound(q, models, k)
            rows.append(VerificationRow(
                s, "ood", dim, count, k, r.rate, (r.low, r.high),
                None if best is None else best.raw,
                None if best is None else best.alpha,
                [b.to_dict() for b in table],
            ))
    return rows
