import logging
import subprocess
import sys

import numpy as np
import pytest

from gnss.cli import (
    EXIT_ACCEPTANCE,
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    inspect_text,
    main,
    read_manifest,
    split_labels,
)
from gnss.errors import FormatError
from gnss.model import GnssConfig, GnssModel, save_checkpoint
from gnss.trajectory import read_trajectory

DESK = """
length_m = 0.032
actuator_pos_m = 0.012, 0.014, 0.016, 0.018, 0.020, 0.015
total_time_s = 10e-6
margin_m = 0
message_steps = 2
radius_multiple = 3
steps = 3
val_every = 0
val_samples = 4
"""


@pytest.fixture
def desk_config(tmp_path):
    path = tmp_path / "desk.txt"
    path.write_text(DESK)
    return path


@pytest.fixture
def dataset(tmp_path, desk_config):
    out = tmp_path / "data"
    assert main(["generate", "--config", str(desk_config), "--out", str(out)]) == EXIT_OK
    return out


def test_split_labels():
    assert split_labels(6) == ["train"] * 4 + ["val", "test"]
    assert split_labels(2) == ["train", "test"]
    assert split_labels(1) == ["test"]


def test_generate_six_positions(dataset):
    rows = (dataset / "manifest.tsv").read_text().splitlines()
    assert rows[0] == "file\tactuator_pos_m\tsplit\tn_nodes\tn_steps\tcrc32"
    assert [r.split("\t")[2] for r in rows[1:]] == ["train"] * 4 + ["val", "test"]
    assert len(list(dataset.glob("traj_*.gnsstrj"))) == 6
    splits = read_manifest(dataset)
    assert [len(splits[k]) for k in ("train", "val", "test")] == [4, 1, 1]
    traj = splits["test"][0]
    assert traj.n_nodes == 41 and traj.n_steps == 100
    assert traj.actuator_node == round(0.015 / 0.0008)
    assert np.all(traj.node_rest_positions[:, 1] == 0.05)


def test_generate_single_position_is_test_only(tmp_path, desk_config, caplog):
    out = tmp_path / "one"
    with caplog.at_level(logging.WARNING):
        code = main(["generate", "--config", str(desk_config), "--set", "actuator_pos_m=0.016", "--out", str(out)])
    assert code == EXIT_OK
    assert "test-only" in caplog.text
    assert (out / "manifest.tsv").read_text().splitlines()[1].split("\t")[2] == "test"


def test_generate_rejects_duplicates(tmp_path, desk_config, capsys):
    code = main(["generate", "--config", str(desk_config), "--set", "actuator_pos_m=0.016,0.016", "--out", str(tmp_path / "d")])
    assert code == EXIT_CONFIG
    assert "duplicate" in capsys.readouterr().err


def test_generate_reports_unstable_increment(tmp_path, desk_config):
    out = tmp_path / "unstable"
    code = main(["generate", "--config", str(desk_config), "--set", "dt_s=5e-7", "--out", str(out)])
    assert code == EXIT_CONFIG
    assert len((out / "manifest.tsv").read_text().splitlines()) == 1


def test_inspect_trajectory(dataset, capsys):
    path = dataset / "traj_05.gnsstrj"
    assert main(["inspect", str(path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "N           41" in text and "T           100" in text
    assert "dt_ph       1e-07 s" in text
    assert "(verified)" in text
    assert "0:38, 1:1, 2:2" in text


def test_inspect_truncated_and_tampered(dataset, tmp_path, capsys):
    data = (dataset / "traj_05.gnsstrj").read_bytes()
    cut = tmp_path / "cut.gnsstrj"
    cut.write_bytes(data[:-100])
    assert main(["inspect", str(cut)]) == EXIT_CONFIG
    assert "missing section 'local displacements'" in capsys.readouterr().err
    bad = bytearray(data)
    bad[len(bad) // 2] ^= 0xFF
    tampered = tmp_path / "bad.gnsstrj"
    tampered.write_bytes(bytes(bad))
    assert main(["inspect", str(tampered)]) == EXIT_CONFIG
    assert "checksum mismatch" in capsys.readouterr().err
    with pytest.raises(FormatError):
        inspect_text(tampered)


def test_inspect_checkpoint(tmp_path, capsys):
    path = tmp_path / "m.gnssmdl"
    save_checkpoint(path, GnssModel(GnssConfig(radius=0.0024, message_steps=2)))
    assert main(["inspect", str(path)]) == EXIT_OK
    assert "rounds M    2" in capsys.readouterr().out


def test_keys_lists_schema(capsys):
    assert main(["keys"]) == EXIT_OK
    assert "radius_multiple" in capsys.readouterr().out


def test_train_rollout_evaluate(dataset, tmp_path, desk_config):
    ckpt = tmp_path / "m.gnssmdl"
    assert main(["train", "--config", str(desk_config), "--data", str(dataset), "--out", str(ckpt)]) == EXIT_OK
    assert len((tmp_path / "m.gnssmdl.train.tsv").read_text().splitlines()) == 4
    pred = tmp_path / "pred.gnsstrj"
    code = main(["rollout", "--model", str(ckpt), "--data", str(dataset / "traj_05.gnsstrj"), "--steps", "20", "--out", str(pred)])
    assert code in (EXIT_OK, EXIT_DIVERGED)
    assert read_trajectory(pred).n_steps <= 20
    report = tmp_path / "report.tsv"
    assert main(["evaluate", "--pred", str(pred), "--truth", str(dataset / "traj_05.gnsstrj"), "--report", str(report)]) == EXIT_OK
    assert report.read_text().startswith("metric\tgroup\tindex\tvalue\nrollout_mse\t")


def test_rollout_divergence_exit_code(dataset, tmp_path):
    model = GnssModel(GnssConfig(radius=0.0024, message_steps=1))
    model.accel_mean[:] = 1e-3
    ckpt = tmp_path / "wild.gnssmdl"
    save_checkpoint(ckpt, model)
    code = main(["rollout", "--model", str(ckpt), "--data", str(dataset / "traj_05.gnsstrj"), "--out", str(tmp_path / "p")])
    assert code == EXIT_DIVERGED


def test_missing_manifest(tmp_path, desk_config, capsys):
    assert main(["train", "--config", str(desk_config), "--data", str(tmp_path), "--out", str(tmp_path / "m")]) == EXIT_CONFIG
    assert "manifest.tsv" in capsys.readouterr().err


def test_bad_set_syntax_and_thread_cap(desk_config, tmp_path, monkeypatch):
    assert main(["generate", "--config", str(desk_config), "--set", "steps", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    monkeypatch.setenv("GNSS_THREADS", "zero")
    assert main(["keys"]) == EXIT_CONFIG
    monkeypatch.setenv("GNSS_THREADS", "1")
    assert main(["keys"]) == EXIT_OK


def test_pipeline_is_reproducible(tmp_path, desk_config):
    bundles = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = main(["pipeline", "--config", str(desk_config), "--set", "accept_relative_mse=1e9", "--out", str(out)])
        assert code == EXIT_OK
        bundles.append(out)
    names = ["config.txt", "model.gnssmdl", "train.tsv", "rollout.gnsstrj", "report.tsv", "summary.tsv", "data/manifest.tsv"]
    for name in names:
        assert (bundles[0] / name).read_bytes() == (bundles[1] / name).read_bytes(), name
    assert (bundles[0] / "timing.tsv").read_text().startswith("stage\tseconds\ngenerate\t")
    summary = dict(line.split("\t") for line in (bundles[0] / "summary.tsv").read_text().splitlines()[1:])
    assert summary["accepted"] == "True"


def test_pipeline_acceptance_failure(tmp_path, desk_config):
    code = main(["pipeline", "--config", str(desk_config), "--set", "accept_relative_mse=0", "--out", str(tmp_path / "r")])
    assert code == EXIT_ACCEPTANCE


def test_pipeline_stage_failure_names_stage(tmp_path, desk_config, capsys):
    code = main(["pipeline", "--config", str(desk_config), "--set", "actuator_pos_m=0.016", "--out", str(tmp_path / "r")])
    assert code == EXIT_CONFIG
    assert "stage 'generate' failed" in capsys.readouterr().err


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "gnss", "--help"], capture_output=True, text=True, check=True).stdout
    for cmd in ("generate", "inspect", "train", "rollout", "evaluate", "sweep", "bench", "pipeline"):
        assert cmd in out
    assert "GNSS_THREADS" in out
