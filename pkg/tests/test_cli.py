import json

import pytest

from protodrift.cli import main
from protodrift.config import load_config, parse_config
from protodrift.errors import UsageError

TINY_CONFIG = {
    "dataset": {"kind": "synthetic", "K": 4, "C": 2, "L": 32, "n_per_class": 12},
    "model": {"D": 16, "n_blocks": 2, "r": 4},
    "train": {"epochs_s1": 2, "epochs_s2": 2, "epochs_s3": 2, "S_n": 16},
    "method": "FULL",
    "seeds": [0],
}


def _write_config(tmp_path, overrides=None):
    cfg = json.loads(json.dumps(TINY_CONFIG))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_creates_output_contract(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "r"
    code = main(["run", "--config", str(cfg), "--seed", "7", "--out", str(out)])
    assert code == 0
    for name in ("metrics.json", "accuracy_matrix.csv", "curves.csv", "drift.csv"):
        assert (out / name).exists(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert "FULL" in metrics["methods"]
    assert "7" in metrics["methods"]["FULL"]["seeds"]
    assert (out / "logs" / "run_FULL_s7.jsonl").exists()
    assert (out / "checkpoints" / "FULL_s7.bin").exists()
    assert (out / "prototypes" / "FULL_s7.csv").exists()


def test_run_deterministic_outputs(tmp_path):
    cfg = _write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--seed", "7", "--out", str(out1)]) == 0
    assert main(["run", "--config", str(cfg), "--seed", "7", "--out", str(out2)]) == 0

    assert (out1 / "accuracy_matrix.csv").read_bytes() == (out2 / "accuracy_matrix.csv").read_bytes()

    m1 = json.loads((out1 / "metrics.json").read_text())
    m2 = json.loads((out2 / "metrics.json").read_text())
    m1.pop("wall_clock")
    m2.pop("wall_clock")
    assert json.dumps(m1, sort_keys=True) == json.dumps(m2, sort_keys=True)


def test_run_all_methods_fill_drift_columns(tmp_path):
    cfg = _write_config(tmp_path, {"train": {"epochs_s1": 1, "epochs_s2": 1,
                                             "epochs_s3": 1, "S_n": 8},
                                   "method": "ALL"})
    out = tmp_path / "all"
    assert main(["run", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    lines = (out / "drift.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[0] == "task"
    # one column per strategy; prototype-keeping ones carry values
    from protodrift.protocol import METHODS, method_traits

    assert set(header[1:]) == set(METHODS)
    row = dict(zip(header, lines[1].split(",")))
    for method in METHODS:
        if method_traits(method).keeps_store:
            assert row[method] != "", method
        else:
            assert row[method] == "", method


def test_unknown_method_is_usage_error(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    code = main(["run", "--config", str(cfg), "--method", "WRONG",
                 "--out", str(tmp_path / "x")])
    assert code == 2
    err = capsys.readouterr().err
    assert "FULL" in err and "SDC" in err


def test_malformed_config_key_is_usage_error(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"train": {"bogus_key": 1}})
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "bogus_key" in capsys.readouterr().err


def test_missing_config_file_errors(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == 1


def test_metrics_subcommand_matches_oracle(tmp_path, capsys):
    matrix = tmp_path / "m.csv"
    matrix.write_text("0.9\n0.6,0.8\n0.5,0.7,0.9\n")
    assert main(["metrics", "--matrix", str(matrix)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["A_T"] == pytest.approx(0.7)
    assert payload["F_T"] == pytest.approx(0.25)
    assert payload["A_cur"] == pytest.approx((0.9 + 0.8 + 0.9) / 3)


def test_config_parser_validates():
    with pytest.raises(UsageError):
        parse_config({"method": "NOT_REAL"})
    with pytest.raises(UsageError):
        parse_config({"seeds": []})
    with pytest.raises(UsageError):
        parse_config({"dataset": {"kind": "directory"}}).build_stream(0)
    cfg = parse_config({})
    assert cfg.method == "FULL"
    assert cfg.methods() == ["FULL"]
    assert parse_config({"method": "ALL"}).methods() == list(
        __import__("protodrift.protocol", fromlist=["METHODS"]).METHODS
    )


def test_config_echo_roundtrips(tmp_path):
    path = _write_config(tmp_path)
    cfg = load_config(path)
    echo = cfg.echo()
    assert echo["model"]["D"] == 16
    assert echo["train"]["S_n"] == 16
    assert parse_config(echo).echo() == echo


def test_directory_dataset_config(tmp_path):
    import numpy as np

    from protodrift.data import DatasetMeta, TimeSeriesSample, save_dataset

    rng = np.random.default_rng(0)
    samples = [TimeSeriesSample(rng.normal(size=(2, 8)), k % 2) for k in range(24)]
    save_dataset(tmp_path / "ds", samples[:16], samples[16:], DatasetMeta(2, 8, 2))
    cfg = parse_config({"dataset": {"kind": "directory", "path": str(tmp_path / "ds")}})
    stream = cfg.build_stream(0)
    assert len(stream.tasks) == 1
    assert set(stream.class_order) == {0, 1}
