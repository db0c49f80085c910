import json
import warnings

import numpy as np
import pytest

from hilora.config import (
    ExperimentConfig,
    EvalSpec,
    OutputSpec,
    apply_overrides,
    config_from_dict,
    load_config,
    parse_override,
)
from hilora.errors import ConfigError, InvalidLayer
from hilora.experiment import (
    MethodRunner,
    bench_decisions,
    bench_throughput,
    export_roc_pca,
    gamma_sweep,
    oracle_output,
    pool_scores,
    run_experiment,
    with_method,
)
from hilora.lora_pool import LoraLayer, LoraModule, PoolManifest, PoolSpec, synthesize_pool
from hilora.numerics import RngStream
from hilora.router import RouterConfig
from hilora.theory import gaussian_kl
from hilora.world import WorldSpec, interference_world, separated_world


def small_config(method="hilora", seed=0, per_task=10, **world):
    return ExperimentConfig(seed=seed, method=method, world=WorldSpec(**world),
                            eval=EvalSpec(seen_per_task=per_task))


# -- config ------------------------------------------------------------------


def test_config_from_dict_and_overrides():
    doc = {"method": "merged", "router": {"gamma": 0.6}, "world": {"num_tasks": 3}}
    doc = apply_overrides(doc, [parse_override("router.k_min=2"), parse_override("seed=4"),
                                parse_override("output.summary=out/s.json")])
    cfg = config_from_dict(doc)
    assert cfg.seed == 4 and cfg.method == "merged" and cfg.router.gamma == 0.6 and cfg.router.k_min == 2
    assert cfg.world.num_tasks == 3 and cfg.output.summary == "out/s.json"


@pytest.mark.parametrize("doc, field", [
    ({"method": "hilora"}, "seed"),
    ({"seed": 1, "method": "moe"}, "method"),
    ({"seed": 1, "router": {"gamma": 0}}, "router.gamma"),
    ({"seed": 1, "router": {"gama": 0.5}}, "router.gama"),
    ({"seed": 1, "router": {"seed": 3}}, "router.seed"),
    ({"seed": 1, "world": {"num_tasks": 0}}, "world"),
    ({"seed": 1, "eval": {"seen_per_task": 0}}, "eval"),
    ({"seed": -1}, "seed"),
])
def test_config_errors_name_field(doc, field):
    with pytest.raises(ConfigError) as err:
        config_from_dict(doc).validate()
    assert err.value.field == field


def test_parse_override_rejects_missing_equals():
    with pytest.raises(ConfigError):
        parse_override("router.gamma")
    assert parse_override("method=oracle") == ("method", "oracle")
    assert parse_override("eval.unseen_kl=2.5") == ("eval.unseen_kl", 2.5)


def test_load_config_reports_parse_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{\"seed\": ")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(p)


def test_shipped_configs_load():
    for name in ("separated", "interference"):
        cfg = config_from_dict({**load_config(f"configs/{name}.json"), "seed": 0})
        cfg.validate()


# -- world ---------------------------------------------------------------------


def test_separated_world_is_well_separated():
    from hilora.theory import bhattacharyya_matrix
    world = separated_world(0)
    b = bhattacharyya_matrix(world.fitted)
    assert np.min(b[~np.eye(len(b), dtype=bool)]) >= 2.0


def test_interference_world_has_both_candidates():
    world = interference_world(0)
    inp = world.inputs(world.seen_tasks[0], 1)[0]
    scores = pool_scores(world.pool, inp.z)
    assert max(scores.values()) < 0  # fallback branch keeps both LoRAs


def test_unseen_task_hits_target_kl():
    world = separated_world(1)
    names = world.add_unseen_tasks(2, target_kl=3.0)
    for j, name in enumerate(names):
        q = world.embedder.task_models[name]
        kls = [gaussian_kl(q, g) for g in world.fitted]
        assert kls[j] == pytest.approx(3.0, rel=1e-9)  # anchored round-robin on the pool
        assert world.oracle_of[name] == world.pool.ids[int(np.argmin(kls))]


def test_inputs_are_deterministic():
    a = separated_world(2).inputs("lora1", 3)
    b = separated_world(2).inputs("lora1", 3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.z, y.z)
        np.testing.assert_array_equal(x.tokens, y.tokens)


# -- run ----------------------------------------------------------------------


def test_oracle_arm_is_exact():
    _, summary = run_experiment(small_config("oracle"))
    assert summary["mean_mse"] == 0.0


def test_single_lora_full_budget_matches_oracle():
    cfg = small_config(num_tasks=1)
    cfg.router = RouterConfig(gamma=1.0)
    records, summary = run_experiment(cfg)
    assert summary["mean_mse"] == 0.0
    assert all(r.selected == ["lora0"] for r in records)


def test_summary_mean_equals_record_mean(tmp_path):
    cfg = small_config()
    cfg.output = OutputSpec(str(tmp_path / "r.jsonl"), str(tmp_path / "d.jsonl"), str(tmp_path / "s.json"))
    records, summary = run_experiment(cfg)
    assert summary["mean_mse"] == pytest.approx(np.mean([r.mse for r in records]), abs=1e-12)
    on_disk = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(on_disk) == len(records) and "wall_time" in on_disk[0]
    decisions = [json.loads(line) for line in (tmp_path / "d.jsonl").read_text().splitlines()]
    assert "wall_time" not in decisions[0]
    assert json.loads((tmp_path / "s.json").read_text())["num_records"] == len(records)


def test_hilora_beats_merged_on_separated_pool():
    cfg = small_config(per_task=20)
    _, hil = run_experiment(cfg)
    _, mer = run_experiment(with_method(cfg, "merged"))
    assert hil["mean_mse"] < mer["mean_mse"]


def test_every_method_runs():
    world = separated_world(0)
    inp = world.inputs("lora0", 1)[0]
    ref = oracle_output(world, inp)
    for method in ("hilora", "gs_only", "roc_only", "retriever", "ensemble", "merged", "oracle"):
        out, selected, total, _ = MethodRunner(method, world, RouterConfig(seed=0)).run(inp)
        assert out.shape == ref.shape and total >= 1 and selected


def test_runs_are_deterministic():
    cfg = small_config(seed=3)
    r1, _ = run_experiment(cfg)
    r2, _ = run_experiment(small_config(seed=3))
    assert [r.decision() for r in r1] == [r.decision() for r in r2]


# -- gamma sweep ---------------------------------------------------------------


def test_gamma_sweep_dedupes_with_warning(tmp_path):
    cfg = small_config(per_task=5)
    with pytest.warns(UserWarning, match="duplicate"):
        rows = gamma_sweep(cfg, [0.4, 0.4, 1.0], csv_path=tmp_path / "g.csv")
    assert [r["gamma"] for r in rows] == [0.4, 1.0]
    assert (tmp_path / "g.csv").read_text().startswith("gamma,mean_mse")
    with pytest.raises(ConfigError):
        gamma_sweep(cfg, [0.0])


def test_gamma_one_equals_gs_only():
    cfg = config_from_dict({**load_config("configs/interference.json"), "seed": 0})
    cfg.eval.seen_per_task = 10
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rows = gamma_sweep(cfg, [1.0])
    _, gs = run_experiment(with_method(cfg, "gs_only"))
    assert rows[0]["mean_mse"] == gs["mean_mse"]


# -- bench ---------------------------------------------------------------------


def test_bench_validation_and_shape():
    cfg = small_config()
    with pytest.raises(ConfigError):
        bench_throughput(cfg, [5, 10], per_task=0)
    with pytest.raises(ConfigError):
        bench_throughput(cfg, [])
    rows = bench_throughput(cfg, [2, 4], repeats=5, per_task=2)
    assert [r["pool_size"] for r in rows] == [2, 4]
    assert all(r["inputs_per_sec"] > 0 for r in rows)


def test_bench_decisions_repeatable():
    cfg = small_config()
    assert bench_decisions(cfg, [3, 6], per_task=2) == bench_decisions(cfg, [3, 6], per_task=2)


# -- PCA export ----------------------------------------------------------------


def test_pca_clustered_b_vectors(tmp_path):
    pool = synthesize_pool(PoolSpec(4, 16, 1, 8, structure="clustered", clusters=1), RngStream(0))
    rows, _, text = export_roc_pca(pool, "b-vectors", 0, tmp_path / "pca.csv")
    assert text.startswith("# which=b-vectors layer=0 explained_variance=")
    pts = {}
    for r in rows:
        pts.setdefault(r["lora_id"], []).append((r["pc1"], r["pc2"]))
    groups = [np.array(v) for v in pts.values()]

    def mean_dist(x, y):
        return np.mean(np.linalg.norm(x[:, None] - y[None], axis=-1))

    within = np.mean([mean_dist(g, g) * len(g) / (len(g) - 1) for g in groups])
    across = np.mean([mean_dist(groups[i], groups[j]) for i in range(4) for j in range(i + 1, 4)])
    assert within < across


def test_pca_single_roc_and_isotropic_a_vectors():
    d = 4
    one = PoolManifest(d, 1, (LoraModule("x", 1, (LoraLayer(np.ones((1, d)), np.ones((d, 1))),)),))
    rows, explained, _ = export_roc_pca(one, "a-vectors")
    assert len(rows) == 1 and (rows[0]["pc1"], rows[0]["pc2"]) == (0.0, 0.0)
    pool = synthesize_pool(PoolSpec(8, 16, 1, 8), RngStream(1))  # 64 iid vectors
    _, explained, _ = export_roc_pca(pool, "a-vectors")
    assert explained[0] < 0.5


def test_pca_bad_layer():
    pool = synthesize_pool(PoolSpec(2, 8, 2, 2), RngStream(0))
    with pytest.raises(InvalidLayer):
        export_roc_pca(pool, layer=2)
    with pytest.raises(ValueError):
        export_roc_pca(pool, which="c-vectors")
