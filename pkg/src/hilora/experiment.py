"""Synthetic-task evaluation harness, gamma sweep, throughput bench and PCA export."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import statistics
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import RocOnlyRouter, ensemble_delta, gs_only_plan, retriever_plan
from .config import ExperimentConfig
from .errors import ConfigError, InvalidLayer
from .lora_pool import PoolManifest, load_manifest, merged_module
from .numerics import RngStream, pca_2d
from .router import RouterConfig, forward, forward_with, make_plan
from .task_model import score
from .world import EvalInput, World, build_world, world_from_manifest

log = logging.getLogger(__name__)


@dataclass
class EvalRecord:
    input_id: str
    task: str
    seen: bool
    oracle: str
    method: str
    selected: list[str]
    total_rocs: int
    mse: float
    wall_time: float
    plan: dict | None = None

    def decision(self) -> dict:
        """The deterministic part of the record (no timings)."""
        out = dataclasses.asdict(self)
        out.pop("wall_time")
        return out


def build_world_for(config: ExperimentConfig) -> World:
    config.validate()
    if config.pool_manifest:
        world = world_from_manifest(load_manifest(config.pool_manifest), config.seed, config.world)
    else:
        world = build_world(config.world, config.seed)
    if config.eval.unseen_tasks:
        world.add_unseen_tasks(config.eval.unseen_tasks, config.eval.unseen_kl)
    return world


def eval_inputs(world: World, config: ExperimentConfig) -> list[EvalInput]:
    items = []
    for task in world.seen_tasks:
        items += world.inputs(task, config.eval.seen_per_task)
    for task in world.unseen_tasks:
        items += world.inputs(task, config.eval.unseen_per_task)
    if not items:
        raise ConfigError("eval", "evaluation set is empty")
    return items


def oracle_output(world: World, inp: EvalInput) -> np.ndarray:
    lora = world.pool.get(inp.oracle)
    return forward_with(world.backbone, inp.tokens, lora.apply)


def pool_scores(pool: PoolManifest, z) -> dict[str, float]:
    return {i: float(score(pool.gaussians[i], z)) for i in pool.ids}


def route_rng(seed: int, input_id: str) -> RngStream:
    # shared by every method so that gamma=1 HiLoRA and gs_only replay the same draws
    return RngStream(seed, 0).child("route", input_id)


class MethodRunner:
    """Produces one method's forward output and routing decision for an input."""

    def __init__(self, method: str, world: World, router: RouterConfig, pool: PoolManifest | None = None):
        self.method = method
        self.world = world
        self.pool = pool or world.pool
        self.router = router
        self._merged = merged_module(self.pool) if method == "merged" else None
        self._roc = RocOnlyRouter(self.pool, router.roc_top_k, router.projection_ranking) if method == "roc_only" else None

    def run(self, inp: EvalInput) -> tuple[np.ndarray, list[str], int, dict | None]:
        pool, bb, m = self.pool, self.world.backbone, self.method
        ranking = self.router.projection_ranking
        if m in ("hilora", "gs_only"):
            scores = pool_scores(pool, inp.z)
            rng = route_rng(self.router.seed, inp.input_id)
            plan = (make_plan(scores, pool.ranks, self.router, rng) if m == "hilora"
                    else gs_only_plan(scores, pool.ranks, self.router, rng))
            return forward(bb, pool, plan, inp.tokens, ranking), list(plan.candidates), plan.budget, plan.to_dict()
        if m == "retriever":
            plan = retriever_plan(inp.z, pool, self.router.retriever_k)
            return forward(bb, pool, plan, inp.tokens, ranking), list(plan.candidates), plan.budget, plan.to_dict()
        if m == "roc_only":
            self._roc.fired = set()
            out = forward_with(bb, inp.tokens, self._roc.delta)
            fired = [i for i in pool.ids if i in self._roc.fired]
            return out, fired, self._roc.k, None
        if m == "ensemble":
            out = forward_with(bb, inp.tokens, lambda li, h: ensemble_delta(pool, li, h))
            return out, pool.ids, sum(pool.ranks.values()), None
        if m == "merged":
            return forward_with(bb, inp.tokens, self._merged.apply), pool.ids, sum(pool.ranks.values()), None
        if m == "oracle":
            return oracle_output(self.world, inp), [inp.oracle], pool.get(inp.oracle).rank, None
        raise ConfigError("method", f"unknown method {m!r}")


def summarize(records: Sequence[EvalRecord], config: ExperimentConfig) -> dict:
    by_task: dict[str, list[float]] = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r.mse)
    mses = np.array([r.mse for r in records])
    seen = [r for r in records if r.seen]
    unseen = [r for r in records if not r.seen]

    def mean_mse(rs):
        return float(np.mean([r.mse for r in rs])) if rs else None

    return {
        "method": config.method,
        "seed": config.seed,
        "gamma": config.router.gamma,
        "num_records": len(records),
        "mean_mse": float(mses.mean()),
        "mean_mse_seen": mean_mse(seen),
        "mean_mse_unseen": mean_mse(unseen),
        "mean_mse_per_task": {t: float(np.mean(v)) for t, v in by_task.items()},
        "mean_candidates": float(np.mean([len(r.selected) for r in records])),
        "mean_total_rocs": float(np.mean([r.total_rocs for r in records])),
        "exclusion_rate": float(np.mean([r.oracle not in r.selected for r in records])),
    }


def _write_jsonl(path, rows) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_outputs(config: ExperimentConfig, records: Sequence[EvalRecord], summary: dict) -> None:
    out = config.output
    if out.records:
        _write_jsonl(out.records, [dataclasses.asdict(r) for r in records])
    if out.decisions:
        _write_jsonl(out.decisions, [r.decision() for r in records])
    if out.summary:
        p = Path(out.summary)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig, world: World | None = None,
                   inputs: Sequence[EvalInput] | None = None) -> tuple[list[EvalRecord], dict]:
    """Evaluate one method; returns the records and the summary.

    ``world`` and ``inputs`` may be passed in to share them across arms.
    """
    config.validate()
    config.router.seed = config.seed
    world = world or build_world_for(config)
    inputs = list(inputs) if inputs is not None else eval_inputs(world, config)
    if not inputs:
        raise ConfigError("eval", "evaluation set is empty")
    runner = MethodRunner(config.method, world, config.router)
    records = []
    for inp in inputs:
        ref = oracle_output(world, inp)
        t0 = time.perf_counter()
        out, selected, total, plan = runner.run(inp)
        elapsed = max(time.perf_counter() - t0, 1e-9)
        mse = float(np.mean((out - ref) ** 2))
        records.append(EvalRecord(inp.input_id, inp.task, inp.seen, inp.oracle, config.method,
                                  selected, int(total), mse, elapsed, plan))
    summary = summarize(records, config)
    write_outputs(config, records, summary)
    return records, summary


def with_method(config: ExperimentConfig, method: str, gamma: float | None = None) -> ExperimentConfig:
    router = dataclasses.replace(config.router, gamma=config.router.gamma if gamma is None else gamma)
    return dataclasses.replace(config, method=method, router=router, output=type(config.output)())


def gamma_sweep(config: ExperimentConfig, gammas: Sequence[float], world: World | None = None,
                csv_path=None) -> list[dict]:
    """One HiLoRA run per gamma on a shared world, inputs and seeds."""
    uniq = []
    for g in gammas:
        g = float(g)
        if not 0.0 < g <= 1.0:
            raise ConfigError("router.gamma", f"sweep value {g} outside (0, 1]")
        if g in uniq:
            warnings.warn(f"duplicate gamma {g} dropped from the sweep", stacklevel=2)
            continue
        uniq.append(g)
    world = world or build_world_for(config)
    inputs = eval_inputs(world, config)
    rows = []
    for g in uniq:
        _, summary = run_experiment(with_method(config, "hilora", g), world, inputs)
        rows.append({"gamma": g, "mean_mse": summary["mean_mse"], "mean_total_rocs": summary["mean_total_rocs"],
                     "mean_candidates": summary["mean_candidates"]})
    if csv_path:
        write_csv(csv_path, rows)
    return rows


def write_csv(path, rows: list[dict], header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header)
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    text = buf.getvalue()
    if path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
    return text


# -- throughput --------------------------------------------------------------


def bench_inputs(world: World, per_task: int = 20) -> list[EvalInput]:
    """Fixed eval set: up to five seen tasks and every registered unseen task."""
    items = []
    for task in world.seen_tasks[:5] + world.unseen_tasks:
        items += world.inputs(task, per_task)
    return items


def _time_pass(runners: list[MethodRunner], inputs: list[EvalInput], threads: int) -> float:
    t0 = time.perf_counter()
    if threads <= 1:
        for inp in inputs:
            runners[0].run(inp)
    else:
        chunks = [inputs[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(lambda a: [runners[a[0]].run(x) for x in a[1]], enumerate(chunks)))
    return time.perf_counter() - t0


def bench_throughput(config: ExperimentConfig, sizes: Sequence[int], repeats: int = 7,
                     per_task: int = 20, threads: int = 1) -> list[dict]:
    """Median inputs/sec of HiLoRA routing + toy forward per pool size.

    Pools of size N are the first N LoRAs of one world sized for the largest
    entry, so the eval set is identical across sizes.
    """
    if not sizes or any(int(n) < 1 for n in sizes):
        raise ConfigError("bench.sizes", "pool sizes must be >= 1")
    if repeats < 5:
        raise ConfigError("bench.repeats", "need at least 5 timed repetitions")
    if per_task < 1:
        raise ConfigError("bench.per_task", "evaluation set is empty")
    config = dataclasses.replace(config, world=dataclasses.replace(config.world, num_tasks=max(sizes)))
    config.validate()
    world = build_world_for(config)
    if not world.unseen_tasks:
        world.add_unseen_tasks(5, config.eval.unseen_kl)
    inputs = bench_inputs(world, per_task)
    router = dataclasses.replace(config.router, seed=config.seed)
    rows = []
    with threadpool_limits(limits=1):
        for n in sizes:
            pool = world.pool.subset(world.pool.ids[: int(n)])
            runners = [MethodRunner("hilora", world, router, pool) for _ in range(max(1, threads))]
            _time_pass(runners, inputs, threads)  # warm-up
            times = [_time_pass(runners, inputs, threads) for _ in range(repeats)]
            med = statistics.median(times)
            rows.append({"pool_size": int(n), "inputs": len(inputs), "threads": threads,
                         "median_seconds": med, "inputs_per_sec": len(inputs) / med})
    rates = [r["inputs_per_sec"] for r in rows]
    monotone = all(a >= b for a, b in zip(rates, rates[1:]))
    if not monotone:
        log.warning("throughput is not monotone in pool size: %s", rates)
    return rows


def bench_decisions(config: ExperimentConfig, sizes: Sequence[int], per_task: int = 20) -> list[dict]:
    """Routing decisions the bench makes, per size; timings excluded."""
    config = dataclasses.replace(config, world=dataclasses.replace(config.world, num_tasks=max(sizes)))
    world = build_world_for(config)
    if not world.unseen_tasks:
        world.add_unseen_tasks(5, config.eval.unseen_kl)
    router = dataclasses.replace(config.router, seed=config.seed)
    out = []
    for n in sizes:
        pool = world.pool.subset(world.pool.ids[: int(n)])
        runner = MethodRunner("hilora", world, router, pool)
        for inp in bench_inputs(world, per_task):
            _, selected, total, _ = runner.run(inp)
            out.append({"pool_size": int(n), "input_id": inp.input_id, "selected": selected, "total_rocs": total})
    return out


# -- PCA export ----------------------------------------------------------------


def export_roc_pca(pool: PoolManifest, which: str = "b-vectors", layer: int = 0,
                   path=None) -> tuple[list[dict], tuple[float, float], str]:
    """Project every ROC's a- or b-vector onto the first two principal axes.

    Returns the rows, the explained-variance fractions and the CSV text.
    """
    if which not in ("a-vectors", "b-vectors"):
        raise ValueError(f"which must be 'a-vectors' or 'b-vectors', got {which!r}")
    if not 0 <= layer < pool.num_layers:
        raise InvalidLayer(f"layer {layer} outside [0, {pool.num_layers})")
    labels, vecs = [], []
    for m in pool.loras:
        lay = m.layers[layer]
        mat = lay.a if which == "a-vectors" else lay.b.T
        for j in range(m.rank):
            labels.append((m.id, j))
            vecs.append(mat[j])
    pts = np.stack(vecs)
    if len(pts) == 1:
        proj, explained = np.zeros((1, 2)), (0.0, 0.0)
    else:
        proj, explained = pca_2d(pts)
    rows = [{"lora_id": lid, "roc_index": j, "pc1": float(p[0]), "pc2": float(p[1])}
            for (lid, j), p in zip(labels, proj)]
    header = f"# which={which} layer={layer} explained_variance={explained[0]:.6f},{explained[1]:.6f}\n"
    return rows, explained, write_csv(path, rows, header)
