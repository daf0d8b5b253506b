import json
import math

import pytest

from fedsim.cli import (DEFAULT_CONFIG, apply_overrides, config_hash, load_config,
                        main, resolve_config)
from fedsim.errors import ConfigError

SMALL = {
    "algorithm": "fedagm",
    "rounds": 8,
    "clients": 6,
    "seed": 4,
    "targets": [0.5, 0.99],
    "model": {"input_dim": 5, "output_dim": 3},
    "data": {"classes": 3, "train_per_class": 20, "test_per_class": 8,
             "input_dim": 5},
    "partition": {"kind": "dirichlet", "concentration": 0.3},
    "local": {"k": 8},
}


def write_config(tmp_path, payload=SMALL, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def read_rows(out_dir):
    lines = (out_dir / "rounds.csv").read_text().splitlines()
    assert lines[0] == "round,train_loss,test_accuracy,ema_accuracy,bytes_down,bytes_up"
    return [line.split(",") for line in lines[1:]]


# ---------------------------------------------------------------- config


def test_minimal_config_fills_every_default(tmp_path):
    cfg = load_config(write_config(tmp_path, {"algorithm": "fedcm"}))
    assert cfg["algorithm"] == "fedcm"
    assert cfg["rounds"] == DEFAULT_CONFIG["rounds"]
    assert cfg["local"]["k"] == 50
    assert cfg["server"]["lam"] == 0.85
    assert cfg["data"]["kind"] == "synthetic"


def test_unknown_keys_rejected_with_dotted_path(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key: frobnicate"):
        load_config(write_config(tmp_path, {"frobnicate": 1}))
    with pytest.raises(ConfigError, match="unknown config key: local.momentum"):
        load_config(write_config(tmp_path, {"local": {"momentum": 0.9}}))


def test_scalar_type_checks(tmp_path):
    """Ints promote to floats, but strings and bools in numeric slots fail."""
    cfg = load_config(write_config(tmp_path, {"participation": 1}))
    assert isinstance(cfg["participation"], float)
    with pytest.raises(ConfigError, match="rounds must be an integer"):
        load_config(write_config(tmp_path, {"rounds": 2.5}))
    with pytest.raises(ConfigError, match="must be a number"):
        load_config(write_config(tmp_path, {"local": {"lr0": "fast"}}))
    with pytest.raises(ConfigError, match="must be true or false"):
        load_config(write_config(tmp_path, {"data": {"normalize": 1}}))


def test_set_overrides_parse_json_with_string_fallback(tmp_path):
    cfg = load_config(write_config(tmp_path))
    apply_overrides(cfg, ["seed=7", "algorithm=fedprox", "server.lam=0.5",
                          "model.hidden_dims=[8,4]"])
    assert cfg["seed"] == 7
    assert cfg["algorithm"] == "fedprox"
    assert cfg["server"]["lam"] == 0.5
    assert cfg["model"]["hidden_dims"] == [8, 4]
    for bad in ["nosuch=1", "local.nosuch=1", "local=3", "justakey"]:
        with pytest.raises(ConfigError):
            apply_overrides(cfg, [bad])


def test_config_hash_is_canonical(tmp_path):
    a = resolve_config(write_config(tmp_path, SMALL, "a.json"), [], None)
    # same content, different key order in the file
    flipped = dict(reversed(list(SMALL.items())))
    b = resolve_config(write_config(tmp_path, flipped, "b.json"), [], None)
    assert config_hash(a) == config_hash(b)
    c = resolve_config(write_config(tmp_path, SMALL, "c.json"), ["seed=99"], None)
    assert config_hash(c) != config_hash(a)


def test_global_lr_default_depends_on_algorithm(tmp_path):
    path = write_config(tmp_path, {"algorithm": "fedadam"})
    assert resolve_config(path, [], None)["server"]["global_lr"] == 0.01
    assert resolve_config(path, ["algorithm=fedavgm"], None)["server"]["global_lr"] == 1.0
    assert resolve_config(path, ["server.global_lr=0.5"], None)["server"]["global_lr"] == 0.5


# ------------------------------------------------------------------- run


def test_run_writes_all_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(tmp_path),
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == SMALL["rounds"]
    assert [int(r[0]) for r in rows] == list(range(1, SMALL["rounds"] + 1))

    summary = json.loads((out / "summary.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    assert summary["algorithm"] == "fedagm"
    assert summary["evaluated_rounds"] == SMALL["rounds"]
    assert manifest["status"] == "ok"
    assert manifest["config_hash"] == summary["config_hash"]
    assert manifest["config"]["rounds"] == SMALL["rounds"]
    assert manifest["tool_version"]
    assert set(manifest["output_paths"]) == {"rounds.csv", "summary.json",
                                             "manifest.json"}


def test_summary_targets_recompute_from_csv(tmp_path):
    """rounds_to_target in summary.json must agree with a scan of the
    ema_accuracy column in rounds.csv."""
    out = tmp_path / "out"
    main(["run", "--config", write_config(tmp_path), "--out", str(out)])
    rows = read_rows(out)
    summary = json.loads((out / "summary.json").read_text())
    for key, reported in summary["rounds_to_target"].items():
        target = float(key)
        hit = next((int(r[0]) for r in rows if float(r[3]) >= target), None)
        if hit is None:
            assert reported == f"{SMALL['rounds']}+"
        else:
            assert reported == hit


def test_rerun_is_byte_identical_and_seed_flag_changes_it(tmp_path):
    cfg = write_config(tmp_path)
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        assert main(["run", "--config", cfg, "--out", str(out)]) == 0
        outs.append(out)
    assert (outs[0] / "rounds.csv").read_bytes() == (outs[1] / "rounds.csv").read_bytes()
    assert (outs[0] / "summary.json").read_bytes() == (outs[1] / "summary.json").read_bytes()

    out3 = tmp_path / "o3"
    assert main(["run", "--config", cfg, "--seed", "99", "--out", str(out3)]) == 0
    assert (outs[0] / "rounds.csv").read_bytes() != (out3 / "rounds.csv").read_bytes()


def test_eval_every_controls_row_count(tmp_path):
    out = tmp_path / "out"
    main(["run", "--config", write_config(tmp_path),
          "--set", "eval_every=4", "--out", str(out)])
    rows = read_rows(out)
    assert [int(r[0]) for r in rows] == [4, 8]


def test_regression_model_logs_nan_accuracy(tmp_path):
    payload = dict(SMALL, model={"kind": "linear_regression", "input_dim": 5,
                                 "output_dim": 1},
                   targets=[])
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(tmp_path, payload),
                 "--out", str(out)]) == 0
    for row in read_rows(out):
        assert math.isnan(float(row[2])) and math.isnan(float(row[3]))
        assert math.isfinite(float(row[1]))


def test_parse_error_exits_2_with_location(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"algorithm": }')
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "broken.json:1:15" in err


def test_missing_config_exits_2_naming_path(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert main(["run", "--config", missing, "--out", str(tmp_path / "x")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_numeric_abort_exits_3_and_keeps_partial_csv(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", write_config(tmp_path),
                 "--set", "local.lr0=1e200", "--set", "local.clip_norm=1e308",
                 "--out", str(out)])
    assert code == 3
    assert "round=" in capsys.readouterr().err
    # the file exists with its header; rounds finished before the blow-up stay
    assert (out / "rounds.csv").read_text().startswith("round,train_loss")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "numeric_abort"
    assert "round=" in manifest["error"]


def test_model_data_mismatch_exits_2(tmp_path, capsys):
    payload = dict(SMALL, model={"input_dim": 7, "output_dim": 3})
    assert main(["run", "--config", write_config(tmp_path, payload),
                 "--out", str(tmp_path / "x")]) == 2
    assert "input_dim" in capsys.readouterr().err


def test_csv_dataset_roundtrip(tmp_path):
    rows = ["a,b,species"]
    for i in range(12):
        cls = ("x", "y", "z")[i % 3]
        rows.append(f"{i * 0.25},{3.0 - i * 0.5},{cls}")
    data_file = tmp_path / "tiny.csv"
    data_file.write_text("\n".join(rows) + "\n")
    payload = {
        "algorithm": "fedavg",
        "rounds": 3,
        "clients": 2,
        "model": {"input_dim": 2, "output_dim": 3},
        "data": {"kind": "csv", "path": str(data_file), "label_column": "species",
                 "test_fraction": 0.25},
        "local": {"k": 4},
    }
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(tmp_path, payload),
                 "--out", str(out)]) == 0
    meta = json.loads((out / "manifest.json").read_text())["data_meta"]
    assert meta["kind"] == "csv"
    assert meta["label_names"] == ["x", "y", "z"]
    assert meta["normalized"] is True
    assert meta["train_examples"] == 9 and meta["test_examples"] == 3


# --------------------------------------------------------------- compare


def test_compare_identical_configs_produce_identical_rows(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "cmp"
    assert main(["compare", "--config", cfg, "--config", cfg,
                 "--out", str(out)]) == 0
    lines = (out / "comparison.csv").read_text().splitlines()
    assert lines[0].startswith("label,algorithm,ema_acc_round_4,ema_acc_round_8")
    first = lines[1].split(",", 1)[1]
    second = lines[2].split(",", 1)[1]
    assert first == second
    assert (out / "cfg_curve.csv").exists()
    assert (out / "cfg#2_curve.csv").exists()
    assert (out / "cfg" / "rounds.csv").exists()


def test_compare_renders_unreached_target_with_plus(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "cmp"
    main(["compare", "--config", cfg, "--config", cfg,
          "--set", "algorithm=fedavg", "--out", str(out)])
    header, row, _ = (out / "comparison.csv").read_text().splitlines()
    assert header.endswith("rounds_to_0.5,rounds_to_0.99")
    assert row.endswith(f",{SMALL['rounds']}+")


def test_compare_rejects_different_data_specs(tmp_path, capsys):
    a = write_config(tmp_path, SMALL, "a.json")
    b = write_config(tmp_path, dict(SMALL, seed=99), "b.json")
    assert main(["compare", "--config", a, "--config", b,
                 "--out", str(tmp_path / "x")]) == 2
    assert "b.json" in capsys.readouterr().err

    # differing only in algorithm/hyperparameters is fine
    c = write_config(tmp_path, dict(SMALL, algorithm="fedavg",
                                    local={"k": 8, "prox_mu": 0.1}), "c.json")
    assert main(["compare", "--config", a, "--config", c,
                 "--out", str(tmp_path / "ok")]) == 0


def test_compare_needs_two_configs(tmp_path, capsys):
    assert main(["compare", "--config", write_config(tmp_path),
                 "--out", str(tmp_path / "x")]) == 2
    assert "at least two" in capsys.readouterr().err


# --------------------------------------------------------------- threads


def test_threads_env_fallback_and_validation(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path)
    out1, out8 = tmp_path / "t1", tmp_path / "t8"
    assert main(["run", "--config", cfg, "--threads", "1", "--out", str(out1)]) == 0
    monkeypatch.setenv("FEDSIM_THREADS", "8")
    assert main(["run", "--config", cfg, "--out", str(out8)]) == 0
    assert (out1 / "rounds.csv").read_bytes() == (out8 / "rounds.csv").read_bytes()

    monkeypatch.setenv("FEDSIM_THREADS", "many")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    capsys.readouterr()
    assert main(["run", "--config", cfg, "--threads", "0",
                 "--out", str(tmp_path / "x")]) == 2
    assert "positive" in capsys.readouterr().err


# -------------------------------------------------------------- selftest


def test_selftest_passes_and_repeats_identically(capsys):
    assert main(["selftest"]) == 0
    first = capsys.readouterr().out
    assert main(["selftest"]) == 0
    assert capsys.readouterr().out == first
    assert first.count("PASS") == 4


def test_selftest_fails_under_lambda_sign_mutation(capsys):
    assert main(["selftest", "--perturb-lambda-sign"]) == 1
    out = capsys.readouterr().out
    assert "FAIL momentum-recurrence" in out
