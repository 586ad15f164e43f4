import filecmp

import numpy as np
import pytest
import yaml

from qgface.cli import OUT_ENV, main


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    return all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth-data", "--ids", "6", "--per-id", "4", "--seed", "1", "--size", "24",
                 "--probes-per-id", "1", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"epochs": 2, "lr_drop_epochs": [1], "batch_size": 8, "image_size": [24, 24],
                                   "encoder": {"embedding_dim": 16, "widths": [8, 8, 16, 16]}}))
    assert main(["train", "--config", str(cfg), "--data", str(synth / "train"), "--out", str(out),
                 "--set", "quality.b=0.4"]) == 0
    return out


def test_synth_data_is_deterministic(tmp_path):
    args = ["synth-data", "--ids", "50", "--per-id", "10", "--seed", "1", "--size", "24", "--probes-per-id", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert _tree_equal(tmp_path / "a", tmp_path / "b")
    assert len(list((tmp_path / "a" / "train").iterdir())) == 50


def test_train_writes_run_directory(trained):
    for name in ("checkpoint.pt", "config.yaml", "metrics.csv", "quality.csv", "contrastive.csv"):
        assert (trained / name).is_file()
    assert yaml.safe_load((trained / "config.yaml").read_text())["quality"]["b"] == 0.4


def test_train_missing_data_root_names_path(tmp_path, capsys):
    missing = tmp_path / "no-such-root"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err.strip()
    assert str(missing) in err and len(err.splitlines()) == 1


def test_bad_config_key_is_single_line_error(tmp_path, synth, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("quality:\n  nonsense: 1\n")
    assert main(["train", "--config", str(cfg), "--data", str(synth / "train"), "--out", str(tmp_path)]) == 1
    assert "nonsense" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["eval", "--protocol", "nah", "--checkpoint", "x", "--manifest", "y"],
                                  ["train"], ["synth-data", "--frobnicate"]])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("protocol,csv_name", [("verification", "verification.csv"),
                                               ("identification", "identification.csv"),
                                               ("gap", "gap_summary.csv")])
def test_eval_protocols(protocol, csv_name, synth, trained, tmp_path, capsys):
    out = tmp_path / protocol
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.pt"), "--manifest",
                 str(synth / "eval" / "manifest.txt"), "--protocol", protocol, "--far", "0.1", "--out", str(out)]) == 0
    assert (out / csv_name).read_text().splitlines()[0].count(",") >= 2
    assert protocol in capsys.readouterr().out


def test_eval_is_deterministic(synth, trained, tmp_path):
    for run in ("a", "b"):
        main(["eval", "--checkpoint", str(trained / "checkpoint.pt"), "--manifest",
              str(synth / "eval" / "manifest.txt"), "--protocol", "verification", "--out", str(tmp_path / run)])
    assert _tree_equal(tmp_path / "a", tmp_path / "b")


def test_eval_missing_checkpoint(synth, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--manifest", str(synth / "eval" / "manifest.txt"),
               "--protocol", "gap"])
    assert rc == 1 and "none.pt" in capsys.readouterr().err


def test_default_out_dir_from_environment(synth, trained, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env-out"))
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.pt"), "--manifest",
                 str(synth / "eval" / "manifest.txt"), "--protocol", "gap"]) == 0
    assert (tmp_path / "env-out" / "eval" / "gap_summary.csv").is_file()


def test_preview_aug(synth, tmp_path):
    from PIL import Image

    out = tmp_path / "grid.png"
    assert main(["preview-aug", "--data", str(synth / "train"), "--n", "6", "--columns", "3", "--out", str(out)]) == 0
    # default config renders 112x112 pairs: 2 rows x 3 columns x 2 images
    assert Image.open(out).size == (3 * 2 * 112, 2 * 112)


def test_diagnose_writes_csvs_and_plots(synth, trained, tmp_path):
    out = tmp_path / "diag"
    assert main(["diagnose", "--checkpoint", str(trained / "checkpoint.pt"), "--data", str(synth / "train"),
                 "--manifest", str(synth / "eval" / "manifest.txt"), "--out", str(out)]) == 0
    for stem in ("gst_vs_quality", "quality_hist", "queue_trace", "gap_hist"):
        assert (out / f"{stem}.csv").is_file() and (out / f"{stem}.png").is_file()
    assert (out / "gap_summary.csv").read_text().startswith("tier,n_probes,mean_matched")


def test_gap_on_toy_checkpoint(toy_runs, tmp_path, capsys):
    from qgface.data import write_manifest

    _, _, run_dir = toy_runs.get(0, "qgface")
    manifest = toy_runs.data[0][2]
    write_manifest(manifest, tmp_path / "m" / "manifest.txt")
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.pt"), "--manifest",
                 str(tmp_path / "m" / "manifest.txt"), "--protocol", "gap", "--out", str(tmp_path / "e")]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("gap tier d1")]
    assert len(lines) == 1
    assert "mean matched" in lines[0] and "mean best unmatched" in lines[0]


def test_augmented_stream_has_lower_norm_after_training(toy_runs):
    from qgface.augment import AugmentConfig, make_pair_batch
    from qgface.encoder import embed_images

    state, _, _ = toy_runs.get(0, "qgface")
    images = toy_runs.data[0][1][:200]
    cfg = AugmentConfig(p_per_transform=1.0, jpeg_quality_range=(10, 20), input_size=(48, 48))
    originals, augmented = make_pair_batch(images, cfg, np.random.default_rng(0))
    n_o = np.linalg.norm(embed_images(state.encoder, originals), axis=1).mean()
    n_a = np.linalg.norm(embed_images(state.encoder, augmented), axis=1).mean()
    assert n_a < n_o
