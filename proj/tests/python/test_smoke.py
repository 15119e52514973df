import json
import os
import subprocess

import numpy as np
import pytest

import pedetect


def test_auc_examples():
    assert pedetect.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert pedetect.auc(np.array([0.1, 0.2, 0.8, 0.9]), [0, 0, 1, 1]) == 1.0
    with pytest.raises(ValueError):
        pedetect.auc([0.1, 0.2], [1, 1])


def test_delong_interval_brackets_auc():
    rng = np.random.default_rng(0)
    scores = np.concatenate([rng.normal(1.0, 1.0, 60), rng.normal(0.0, 1.0, 60)])
    labels = [1] * 60 + [0] * 60
    low, high, degenerate = pedetect.delong_ci(scores, labels)
    a = pedetect.auc(scores, labels)
    assert low < a < high
    assert not degenerate
    report = pedetect.evaluate(scores, labels)
    assert report["auc"] == pytest.approx(a)
    assert "roc_points" in report


def test_continuous_dice_matches_classical_dice_on_binary_maps():
    a = np.array([1, 1, 0, 0, 1], dtype=float)
    m = np.array([1, 0, 0, 1, 1], dtype=np.uint8)
    assert pedetect.continuous_dice(a, m, 0.0) == pytest.approx(2 * 2 / 6)
    assert pedetect.continuous_dice(np.zeros(4), np.zeros(4, dtype=np.uint8), 0.0) == 1.0
    with pytest.raises(ValueError):
        pedetect.continuous_dice(np.zeros(3), np.zeros(4, dtype=np.uint8), 1.0)


def test_attention_map_is_max_normalized():
    rng = np.random.default_rng(1)
    f = rng.uniform(0, 1, (3, 4, 5))
    w = np.array([0.5, -0.2, 1.0])
    raw = np.maximum(np.tensordot(w, f, axes=1), 0)
    np.testing.assert_allclose(pedetect.attention_map(f, w), raw / raw.max(), atol=1e-12)


def test_desk_config_round_trips_and_rejects_bad_scenario():
    c = pedetect.desk_config()
    assert pedetect.validate_config(c) == c
    c["scenario"] = 7
    with pytest.raises(pedetect.ConfigError):
        pedetect.validate_config(c)


def tiny_config(tmp_path):
    c = pedetect.desk_config()
    c["corpus"].update(study_count=6, test_study_count=4, volume_shape=[16, 32, 32])
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(c))
    return path


def test_gen_is_idempotent(tmp_path):
    path = tiny_config(tmp_path)
    first = pedetect.gen(path)
    again = pedetect.gen(path)
    assert first["generated"] and not again["generated"]
    assert first["checksum"] == again["checksum"]
    assert first["studies"] == 10


def test_missing_corpus_is_a_data_error(tmp_path):
    with pytest.raises(pedetect.DataError):
        pedetect.run_scenario(tiny_config(tmp_path))


@pytest.mark.skipif("PEDETECT_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_exit_codes(tmp_path):
    cli = os.environ["PEDETECT_CLI"]
    assert subprocess.run([cli, "--help"], capture_output=True).returncode == 0
    assert subprocess.run([cli, "gen", "--config", str(tmp_path / "none.json")], capture_output=True).returncode == 2
    path = tiny_config(tmp_path)
    assert subprocess.run([cli, "train-stage1", "--config", str(path)], capture_output=True).returncode == 3
