import csv
import json

import numpy as np
import pytest

from mtladapt import checkpoint, cli
from mtladapt.adapters import AdapterConfig, count_trainable
from mtladapt.trainer import TrainConfig, build_model

TINY = {
    "train": {
        "learning_rate": 3e-3, "epochs": 1, "batch_size": 16, "seed": 0,
        "model": {"d": 8, "f": 16, "blocks": 1, "num_tasks": 2, "classes": 2, "head_mode": "shared"},
        "adapter": {"kind": "mtl_lora", "rank": 2, "alpha": 4.0, "n_up": 2, "tau": 0.5},
    },
    "data": {"conflict": 1.0, "n_train": 48, "n_test": 16},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def with_(base=TINY, **sections):
    cfg = json.loads(json.dumps(base))
    for k, v in sections.items():
        cfg[k] = v
    return cfg


def run(tmp_path, command, cfg, out="out", *extra):
    rc = cli.main([command, "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / out), *extra])
    return rc, tmp_path / out


def read_csv(path):
    return list(csv.reader(open(path)))


# ---- config handling ----------------------------------------------------------


def test_missing_config_file_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_bad_json_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    assert cli.main(["train", "--config", str(p)]) == 2
    assert "not valid JSON" in capsys.readouterr().err


@pytest.mark.parametrize("patch", [
    {"extra": 1},
    {"train": {**TINY["train"], "lr": 0.1}},
    {"train": {**TINY["train"], "model": {**TINY["train"]["model"], "width": 3}}},
    {"train": {**TINY["train"], "adapter": {**TINY["train"]["adapter"], "gamma": 1}}},
    {"data": {"conflict": 1.0, "samples": 3}},
    {"sweep": {"n": [1]}},
    {"ablate": {"seed": 0}},
    {"probe": {"matrx": "o"}},
    {"bench": {"repetitions": 40}},
    {"params": {"width": 4096}},
    {"eval": {"split": "train"}},
])
def test_unknown_fields_rejected(tmp_path, patch, capsys):
    rc, out = run(tmp_path, "train", with_(**patch))
    assert rc == 2 and "unknown" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize("patch", [
    {"train": {**TINY["train"], "epochs": "two"}},
    {"train": {**TINY["train"], "learning_rate": -1}},
    {"train": {**TINY["train"], "adapter": {**TINY["train"]["adapter"], "tau": 0}}},
    {"data": {"conflict": 2.0}},
    {"sweep": {"n_up": []}},
    {"bench": {"reps": 10}},
    {"probe": {"kinds": ["dora"]}},
])
def test_invalid_values_rejected(tmp_path, patch):
    assert run(tmp_path, "train", with_(**patch))[0] == 2


def test_sweep_needs_mtl_adapter(tmp_path):
    cfg = with_(train={**TINY["train"], "adapter": {"kind": "lora", "rank": 2, "alpha": 4.0}})
    assert run(tmp_path, "sweep", cfg)[0] == 2


def test_check_config_does_no_work(tmp_path, capsys):
    rc, out = run(tmp_path, "train", TINY, "out", "--check-config")
    assert rc == 0 and "ok" in capsys.readouterr().out
    assert not out.exists()


def test_shipped_configs_validate():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.json")):
        assert cli.main(["params", "--config", str(path), "--check-config"]) == 0, path


def test_runtime_failure_exit_3(tmp_path, monkeypatch, capsys):
    def boom(exp):
        raise RuntimeError("disk on fire")
    monkeypatch.setitem(cli.HANDLERS, "train", boom)
    assert run(tmp_path, "train", TINY)[0] == 3
    assert "disk on fire" in capsys.readouterr().err


# ---- train / eval -------------------------------------------------------------


def test_train_writes_metrics_and_checkpoint(tmp_path):
    rc, out = run(tmp_path, "train", TINY)
    assert rc == 0
    rows = read_csv(out / "metrics.csv")
    assert rows[0] == ["step", "epoch", "task", "split", "loss", "accuracy", "lr"]
    # 2 epochs logged (0, 1) x 2 tasks x 2 splits
    assert len(rows) == 1 + 8
    assert (out / "checkpoint" / "adapters.json").exists() and (out / "checkpoint" / "base.bin").exists()


def test_epochs_zero_checkpoint_equals_init(tmp_path):
    cfg = with_(train={**TINY["train"], "epochs": 0})
    rc, out = run(tmp_path, "train", cfg)
    assert rc == 0
    init = build_model(TrainConfig.from_dict(cfg["train"]))
    expected = dict(init.trainable_parameters() + init.frozen_parameters())
    for stem in ("adapters", "base"):
        _, arrays = checkpoint.load(out / "checkpoint" / stem)
        for name, arr in arrays:
            assert np.array_equal(arr, expected[name].data), name


def test_train_is_byte_reproducible(tmp_path):
    run(tmp_path, "train", TINY, "a")
    run(tmp_path, "train", TINY, "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoint/adapters.bin").read_bytes() == (tmp_path / "b/checkpoint/adapters.bin").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    run(tmp_path, "train", TINY, "a")
    run(tmp_path, "train", TINY, "b", "--seed", "5")
    assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "b/metrics.csv").read_bytes()


def test_eval_reproduces_final_metrics(tmp_path):
    _, out = run(tmp_path, "train", TINY)
    assert run(tmp_path, "eval", TINY)[0] == 0
    metrics = read_csv(out / "metrics.csv")[1:]
    final = {(r[2], "test" if r[3] == "eval" else r[3]): r[5] for r in metrics if r[1] == "1"}
    rows = read_csv(out / "eval.csv")
    assert rows[0] == ["task", "split", "loss", "accuracy", "count"]
    for task, split, _, acc, _ in rows[1:]:
        assert float(acc) == float(final[(task, split)])


def test_eval_without_checkpoint_is_config_error(tmp_path):
    assert run(tmp_path, "eval", TINY)[0] == 2


# ---- sweep / ablate -----------------------------------------------------------


def test_sweep_row_count_is_grid_size(tmp_path):
    cfg = with_(sweep={"n_up": [1, 2], "tau": [0.5, 1.0, 2.0], "rank": [2]})
    rc, out = run(tmp_path, "sweep", cfg)
    rows = read_csv(out / "sweep.csv")
    assert rc == 0 and len(rows) - 1 == 2 * 3 * 1
    assert rows[0] == ["n_up", "tau", "rank", "task_0", "task_1", "mean"]
    assert [(r[0], float(r[1])) for r in rows[1:]] == [(n, t) for n in "12" for t in (0.5, 1.0, 2.0)]


def test_sweep_of_one_point_equals_train(tmp_path):
    a = TINY["train"]["adapter"]
    cfg = with_(sweep={"n_up": [a["n_up"]], "tau": [a["tau"]], "rank": [a["rank"]]})
    _, sweep_out = run(tmp_path, "sweep", cfg, "s")
    _, train_out = run(tmp_path, "train", cfg, "t")
    metrics = read_csv(train_out / "metrics.csv")[1:]
    final = [float(r[5]) for r in metrics if r[1] == "1" and r[3] == "train"]
    row = read_csv(sweep_out / "sweep.csv")[1]
    assert [float(v) for v in row[3:5]] == final
    assert float(row[5]) == pytest.approx(np.mean(final), abs=1e-15)


def test_sweep_parallel_matches_serial(tmp_path, monkeypatch):
    cfg = with_(sweep={"n_up": [1, 2], "tau": [0.5], "rank": [2], "seeds": [0, 1]})
    run(tmp_path, "sweep", cfg, "serial")
    monkeypatch.setenv("MTLADAPT_THREADS", "2")
    run(tmp_path, "sweep", cfg, "par")
    assert (tmp_path / "serial/sweep.csv").read_bytes() == (tmp_path / "par/sweep.csv").read_bytes()


def test_ablate_four_rows_and_lambda_not_counted(tmp_path):
    cfg = with_(ablate={"seeds": [0, 1]})
    rc, out = run(tmp_path, "ablate", cfg)
    rows = read_csv(out / "ablation.csv")
    assert rc == 0 and len(rows) == 5
    by = {r[0]: dict(zip(rows[0], r)) for r in rows[1:]}
    assert list(by) == ["full", "no_lambda", "no_tau", "n1"]
    assert by["no_lambda"]["lambda_trainable"] == "0" and by["full"]["lambda_trainable"] == "1"
    a = TINY["train"]["adapter"]
    # 4 adapted matrices x T Lambda_t of size r x r
    lam = 4 * 2 * a["rank"] ** 2
    assert int(by["full"]["trainable_params"]) - int(by["no_lambda"]["trainable_params"]) == lam
    assert float(by["no_tau"]["tau"]) == 1.0 and by["n1"]["n_up"] == "1"
    assert rows[0][-2:] == ["seed_0", "seed_1"]


# ---- probe / bench / params ---------------------------------------------------


def test_probe_outputs_parse_and_repeat(tmp_path):
    cfg = with_(probe={"samples_per_task": 20, "n_splits": 2})
    assert run(tmp_path, "probe", cfg, "a")[0] == 0
    run(tmp_path, "probe", cfg, "b")
    out = tmp_path / "a"
    summary = read_csv(out / "probe_summary.csv")
    assert summary[0] == ["kind", "matrix", "block", "macro_f1", "macro_f1_std", "n_splits"]
    assert [r[0] for r in summary[1:]] == ["mtl_lora", "lora"]
    feats = read_csv(out / "features_mtl_lora.csv")
    assert feats[0][:3] == ["task_id", "sample_id", "f_0"] and len(feats) == 1 + 40
    report = json.loads((out / "probe_lora.json").read_text())
    assert 0 <= report["macro_f1"] <= 1 and len(report["per_seed_macro_f1"]) == 2
    for name in ("probe_summary.csv", "features_lora.csv", "probe_mtl_lora.json"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bench_csv(tmp_path):
    cfg = {"bench": {"kinds": ["base", "lora", "mtl_lora"], "batch_sizes": [1, 2], "reps": 30, "warmup": 1,
                     "model": {"d": 16, "f": 16, "blocks": 1, "num_tasks": 2}}}
    rc, out = run(tmp_path, "bench", cfg)
    assert rc == 0
    rows = read_csv(out / "latency.csv")
    assert rows[0] == ["kind", "batch", "median_us", "p10_us", "p90_us", "reps", "d", "blocks"]
    assert [(r[0], r[1]) for r in rows[1:]] == [(k, b) for b in "12" for k in ("base", "lora", "mtl_lora")]
    assert all(float(r[2]) > 0 and r[5:] == ["30", "16", "1"] for r in rows[1:])


def test_params_prints_and_writes(tmp_path, capsys):
    rc, out = run(tmp_path, "params", with_(params={"d": 64, "k": 64, "matrices_per_block": 4, "blocks": 2,
                                                    "base_param_count": 1e5}))
    assert rc == 0
    rows = read_csv(out / "params.csv")
    assert rows[0] == ["kind", "rank", "per_matrix", "count", "percent"]
    adapter = AdapterConfig.from_dict({**TINY["train"]["adapter"], "num_tasks": 2})
    expect = count_trainable(adapter, {"d": 64, "k": 64, "matrices_per_block": 4, "blocks": 2,
                                       "base_param_count": 1e5})
    assert rows[1][:4] == ["mtl_lora", "2", str(expect["per_matrix"]), str(expect["count"])]
    assert f"{expect['count']:,d}" in capsys.readouterr().out


def test_sweep_three_up_projections_beat_one(tmp_path):
    from pathlib import Path
    cfg = json.loads((Path(__file__).resolve().parents[1] / "configs" / "sweep.json").read_text())
    cfg["sweep"] = {"n_up": [1, 3], "tau": [0.1], "rank": [8], "seeds": [0]}
    rc, out = run(tmp_path, "sweep", cfg)
    rows = read_csv(out / "sweep.csv")[1:]
    assert rc == 0 and float(rows[1][-1]) >= float(rows[0][-1])
