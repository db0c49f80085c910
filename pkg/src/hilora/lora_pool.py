"""LoRA adapters viewed as stacks of rank-one components (ROCs).

A layer holds the down-projection ``a`` (r x d) and up-projection ``b``
(d x r). ROC j is the pair (row j of ``a``, column j of ``b``), and the layer
update is the sum of the r dyads b_j a_j^T.
"""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyPool,
    IndexOutOfRange,
    InvalidSpec,
    ParseError,
    ShapeMismatch,
)
from .numerics import RngStream
from .task_model import GaussianTaskModel


@dataclass(frozen=True)
class LoraLayer:
    a: np.ndarray  # (rank, d) down-projection
    b: np.ndarray  # (d, rank) up-projection

    def __post_init__(self):
        a = np.ascontiguousarray(self.a, dtype=np.float64)
        b = np.ascontiguousarray(self.b, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeMismatch(f"a and b must be 2-D, got {a.shape} and {b.shape}")
        r, d = a.shape
        if b.shape != (d, r):
            raise ShapeMismatch(f"b has shape {b.shape}, expected {(d, r)}")
        if r < 1 or r >= d:
            raise ShapeMismatch(f"rank {r} must satisfy 1 <= r < d={d}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("LoRA weights must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    def dense(self) -> np.ndarray:
        return self.b @ self.a

    def apply(self, x) -> np.ndarray:
        """Full update B A x for one token (d,) or a token batch (T, d)."""
        x = np.asarray(x, dtype=np.float64)
        out = (np.atleast_2d(x) @ self.a.T) @ self.b.T
        return out[0] if x.ndim == 1 else out


@dataclass(frozen=True)
class LoraModule:
    id: str
    rank: int
    layers: tuple[LoraLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeMismatch(f"LoRA {self.id!r} has no layers")
        dims = {layer.dim for layer in self.layers}
        ranks = {layer.rank for layer in self.layers}
        if len(dims) != 1 or ranks != {self.rank}:
            raise ShapeMismatch(
                f"LoRA {self.id!r}: layers disagree (ranks {sorted(ranks)}, declared {self.rank}, dims {sorted(dims)})"
            )

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def apply(self, layer_index: int, x) -> np.ndarray:
        return self.layers[layer_index].apply(x)


@dataclass(frozen=True)
class MergedModule:
    """Pool collapsed into one dense update per layer.

    ``rank`` is the summed rank of the members and is metadata only.
    """

    id: str
    rank: int
    deltas: tuple[np.ndarray, ...]

    def apply(self, layer_index: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.atleast_2d(x) @ self.deltas[layer_index].T
        return out[0] if x.ndim == 1 else out


@dataclass(frozen=True)
class PoolManifest:
    model_dim: int
    num_layers: int
    loras: tuple[LoraModule, ...]
    gaussians: dict[str, GaussianTaskModel] | None = None
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "loras", tuple(self.loras))
        ids = [m.id for m in self.loras]
        if len(set(ids)) != len(ids):
            raise InvalidSpec(f"duplicate LoRA ids in pool: {ids}")
        for m in self.loras:
            if m.dim != self.model_dim or len(m.layers) != self.num_layers:
                raise ShapeMismatch(
                    f"LoRA {m.id!r} has dim {m.dim} and {len(m.layers)} layers; "
                    f"pool expects {self.model_dim} and {self.num_layers}"
                )
        if self.gaussians is not None:
            unknown = set(self.gaussians) - set(ids)
            if unknown:
                raise InvalidSpec(f"Gaussians for unknown LoRA ids: {sorted(unknown)}")
        object.__setattr__(self, "_index", {m: i for i, m in enumerate(ids)})

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.loras]

    @property
    def ranks(self) -> dict[str, int]:
        return {m.id: m.rank for m in self.loras}

    def __len__(self) -> int:
        return len(self.loras)

    def get(self, lora_id: str) -> LoraModule:
        return self.loras[self._index[lora_id]]

    def subset(self, ids: Sequence[str]) -> "PoolManifest":
        loras = [self.get(i) for i in ids]
        gauss = None
        if self.gaussians is not None:
            gauss = {i: self.gaussians[i] for i in ids if i in self.gaussians}
        return PoolManifest(self.model_dim, self.num_layers, tuple(loras), gauss)

    def with_gaussians(self, gaussians: dict[str, GaussianTaskModel]) -> "PoolManifest":
        return PoolManifest(self.model_dim, self.num_layers, self.loras, dict(gaussians))


def roc_delta(layer: LoraLayer, j: int, x) -> np.ndarray:
    """Contribution b_j (a_j . x) of a single ROC."""
    if not 0 <= j < layer.rank:
        raise IndexOutOfRange(f"ROC index {j} outside rank {layer.rank}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.dim,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({layer.dim},)")
    return layer.b[:, j] * (layer.a[j] @ x)


def merged_module(pool: PoolManifest) -> MergedModule:
    if len(pool) == 0:
        raise EmptyPool("cannot merge an empty pool")
    deltas = []
    for li in range(pool.num_layers):
        acc = np.zeros((pool.model_dim, pool.model_dim))
        for m in pool.loras:
            acc += m.layers[li].dense()
        deltas.append(acc)
    return MergedModule("merged", sum(m.rank for m in pool.loras), tuple(deltas))


# -- serialization -----------------------------------------------------------


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text, shape: tuple[int, ...], where: str) -> np.ndarray:
    if not isinstance(text, str):
        raise ParseError(f"{where}: expected a base64 string")
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise ParseError(f"{where}: bad base64 payload ({exc})") from exc
    if len(raw) % 8:
        raise ParseError(f"{where}: payload of {len(raw)} bytes is not a whole number of float64 values")
    expected = int(np.prod(shape))
    if len(raw) // 8 != expected:
        raise ShapeMismatch(f"{where}: payload holds {len(raw) // 8} values, declared shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def manifest_to_dict(pool: PoolManifest) -> dict:
    doc = {
        "model_dim": pool.model_dim,
        "num_layers": pool.num_layers,
        "loras": [
            {
                "id": m.id,
                "rank": m.rank,
                "layers": [{"a": _encode(layer.a), "b": _encode(layer.b)} for layer in m.layers],
            }
            for m in pool.loras
        ],
    }
    if pool.gaussians is not None:
        doc["gaussians"] = [
            {
                "lora_id": g.lora_id,
                "mu": _encode(g.mu),
                "sigma": _encode(g.sigma),
                "reg_lambda": g.reg_lambda,
            }
            for g in (pool.gaussians[i] for i in pool.ids if i in pool.gaussians)
        ]
    return doc


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing field {key!r}")
    return obj[key]


def manifest_from_dict(doc: dict) -> PoolManifest:
    d = _require(doc, "model_dim", "manifest")
    n_layers = _require(doc, "num_layers", "manifest")
    if not isinstance(d, int) or not isinstance(n_layers, int) or d < 2 or n_layers < 1:
        raise ShapeMismatch(f"manifest: invalid model_dim={d!r} / num_layers={n_layers!r}")
    loras = []
    for k, entry in enumerate(_require(doc, "loras", "manifest")):
        lid = _require(entry, "id", f"loras[{k}]")
        where = f"LoRA {lid!r}"
        rank = _require(entry, "rank", where)
        if not isinstance(rank, int) or rank < 1 or rank >= d:
            raise ShapeMismatch(f"{where}: rank {rank!r} must satisfy 1 <= r < {d}")
        layers_doc = _require(entry, "layers", where)
        if len(layers_doc) != n_layers:
            raise ShapeMismatch(f"{where}: {len(layers_doc)} layers, manifest declares {n_layers}")
        layers = []
        for li, ld in enumerate(layers_doc):
            a = _decode(_require(ld, "a", f"{where} layer {li}"), (rank, d), f"{where} layer {li} field 'a'")
            b = _decode(_require(ld, "b", f"{where} layer {li}"), (d, rank), f"{where} layer {li} field 'b'")
            layers.append(LoraLayer(a, b))
        loras.append(LoraModule(lid, rank, tuple(layers)))
    gaussians = None
    if doc.get("gaussians") is not None:
        gaussians = {}
        for k, gd in enumerate(doc["gaussians"]):
            lid = _require(gd, "lora_id", f"gaussians[{k}]")
            where = f"Gaussian for LoRA {lid!r}"
            mu_text = _require(gd, "mu", where)
            try:
                dim = len(base64.b64decode(mu_text, validate=True)) // 8
            except (binascii.Error, TypeError, ValueError) as exc:
                raise ParseError(f"{where} field 'mu': bad base64 payload ({exc})") from exc
            mu = _decode(mu_text, (dim,), f"{where} field 'mu'")
            sigma = _decode(_require(gd, "sigma", where), (dim, dim), f"{where} field 'sigma'")
            lam = float(_require(gd, "reg_lambda", where))
            gaussians[lid] = GaussianTaskModel.from_moments(lid, mu, sigma, reg_lambda=lam)
    return PoolManifest(d, n_layers, tuple(loras), gaussians)


def save_manifest(pool: PoolManifest, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(manifest_to_dict(pool), indent=1) + "\n")


def load_manifest(path) -> PoolManifest:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return manifest_from_dict(doc)


# -- synthesis ---------------------------------------------------------------


@dataclass
class PoolSpec:
    """Generator config for synthetic pools.

    ``structure="iid"`` draws every entry from N(0, entry_std^2).
    ``structure="clustered"`` gives each LoRA ``clusters`` unit directions;
    ROC j belongs to cluster j mod clusters, its a-vector is
    ``a_signal * u + a_noise * eps`` and its b-vector ``b_signal * u + b_noise * eps``.
    """

    num_loras: int
    model_dim: int
    num_layers: int
    ranks: int | Sequence[int]
    entry_std: float = 1.0
    structure: str = "iid"
    clusters: int = 2
    a_signal: float = 2.0
    a_noise: float = 0.3
    b_signal: float = 0.25
    b_noise: float = 0.025
    id_prefix: str = "lora"

    def rank_list(self) -> list[int]:
        if isinstance(self.ranks, int):
            return [self.ranks] * self.num_loras
        return [int(r) for r in self.ranks]

    def validate(self) -> None:
        if self.num_loras < 1:
            raise InvalidSpec("num_loras must be >= 1")
        if self.model_dim < 2 or self.num_layers < 1:
            raise InvalidSpec("model_dim must be >= 2 and num_layers >= 1")
        ranks = self.rank_list()
        if len(ranks) != self.num_loras:
            raise InvalidSpec(f"{len(ranks)} ranks given for {self.num_loras} LoRAs")
        if any(r < 1 or r >= self.model_dim for r in ranks):
            raise InvalidSpec(f"ranks {ranks} must lie in [1, {self.model_dim - 1}]")
        if self.structure not in ("iid", "clustered"):
            raise InvalidSpec(f"unknown structure {self.structure!r}")
        if self.entry_std <= 0:
            raise InvalidSpec("entry_std must be positive")
        if self.structure == "clustered" and self.clusters < 1:
            raise InvalidSpec("clusters must be >= 1")


def draw_cluster_directions(spec: PoolSpec, rng: RngStream) -> np.ndarray:
    """Unit directions of shape (num_loras, clusters, model_dim)."""
    u = rng.standard_normal((spec.num_loras, spec.clusters, spec.model_dim))
    return u / np.linalg.norm(u, axis=2, keepdims=True)


def synthesize_pool(spec: PoolSpec, rng: RngStream, directions: np.ndarray | None = None) -> PoolManifest:
    spec.validate()
    d = spec.model_dim
    ranks = spec.rank_list()
    if spec.structure == "clustered" and directions is None:
        directions = draw_cluster_directions(spec, rng)
    loras = []
    for i, r in enumerate(ranks):
        layers = []
        for _ in range(spec.num_layers):
            if spec.structure == "iid":
                a = spec.entry_std * rng.standard_normal((r, d))
                b = spec.entry_std * rng.standard_normal((d, r))
            else:
                centers = directions[i][np.arange(r) % spec.clusters]
                a = spec.a_signal * centers + spec.a_noise * rng.standard_normal((r, d))
                b = (spec.b_signal * centers + spec.b_noise * rng.standard_normal((r, d))).T
            layers.append(LoraLayer(a, b))
        loras.append(LoraModule(f"{spec.id_prefix}{i}", r, tuple(layers)))
    return PoolManifest(d, spec.num_layers, tuple(loras))
