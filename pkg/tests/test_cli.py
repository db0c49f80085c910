import json

import pytest

from hilora.cli import main
from hilora.lora_pool import load_manifest


@pytest.fixture
def fitted_pool(tmp_path):
    path = tmp_path / "pool.json"
    assert main(["pool", "synth", "--num-loras", "3", "--dim", "8", "--layers", "2", "--ranks", "4",
                 "--seed", "1", "--out", str(path)]) == 0
    assert main(["pool", "fit", "--manifest", str(path), "--embed-dim", "4", "--seed", "1"]) == 0
    return path


def test_pool_synth_fit_inspect(fitted_pool, capsys):
    pool = load_manifest(fitted_pool)
    assert pool.ids == ["lora0", "lora1", "lora2"] and set(pool.gaussians) == set(pool.ids)
    capsys.readouterr()
    assert main(["pool", "inspect", "--manifest", str(fitted_pool)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["fitted"] and len(info["bounds"]["bhattacharyya"]) == 3


def test_route_emits_plans(fitted_pool, capsys):
    capsys.readouterr()
    assert main(["route", "--manifest", str(fitted_pool), "--text", "lora1::a", "--text", "lora2::b",
                 "--emit-plans"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 2
    assert sum(rows[0]["allocation"].values()) == rows[0]["plan"]["budget"]
    assert len(rows[0]["rocs"]) == 2


def test_route_bad_input_reports_error(fitted_pool, capsys):
    assert main(["route", "--manifest", str(fitted_pool), "--text", "no tag"]) == 2
    assert "error:" in capsys.readouterr().err


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--seed", "0", "--set", "eval.seen_per_task=5", "--out-dir", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["num_records"] == 25 and summary["seed"] == 0
    assert (out / "decisions.jsonl").exists() and (out / "records.jsonl").exists()


def test_run_requires_seed(capsys):
    with pytest.raises(SystemExit):
        main(["run", "--config", "configs/separated.json"])


def test_run_config_error_names_field(capsys):
    assert main(["run", "--seed", "0", "--set", "router.gamma=2"]) == 2
    assert "router.gamma" in capsys.readouterr().err


def test_sweep_gamma_with_gs_only(tmp_path, capsys):
    csv = tmp_path / "sweep.csv"
    assert main(["sweep-gamma", "--config", "configs/interference.json", "--seed", "0",
                 "--set", "eval.seen_per_task=5", "--gammas", "0.4,1.0,1.0", "--with-gs-only",
                 "--csv", str(csv)]) == 0
    assert "duplicate" in capsys.readouterr().err
    lines = csv.read_text().splitlines()
    assert lines[0].startswith("gamma,mean_mse") and len(lines) == 4
    one, gs = lines[2].split(","), lines[3].split(",")
    assert gs[0] == "gs_only" and one[1] == gs[1]


def test_bench_small(tmp_path, capsys):
    csv = tmp_path / "bench.csv"
    assert main(["bench", "--seed", "0", "--sizes", "2,3", "--repeats", "5", "--per-task", "1",
                 "--csv", str(csv)]) == 0
    assert csv.read_text().startswith("pool_size,")
    assert "monotone" in capsys.readouterr().err


def test_theory_commands(fitted_pool, tmp_path, capsys):
    assert main(["theory", "bounds", "--manifest", str(fitted_pool), "--ks", "1,2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report["topk_id_bounds"][0]) == {"target", "k=1", "k=2"}
    out = tmp_path / "verify.json"
    assert main(["theory", "verify", "--scenarios", "2", "--trials", "2000", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["all_hold"] and len(doc["alpha_grid"]) == 10


def test_export_pca(fitted_pool, tmp_path, capsys):
    assert main(["export", "pca", "--manifest", str(fitted_pool), "--which", "a-vectors"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# which=a-vectors layer=0") and len(text.splitlines()) == 2 + 12
    assert main(["export", "pca", "--manifest", str(fitted_pool), "--layer", "5"]) == 2
