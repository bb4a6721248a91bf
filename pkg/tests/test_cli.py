import json

import numpy as np
import pytest

from mkunet.cli import main
from mkunet.modelio import read_image, save_checkpoint, write_pgm
from mkunet.network import build_network, preset
from mkunet.training import synth_dataset


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def train_tiny(tmp_path, capsys, name="m.mkun", seed="3", epochs="1", count="6"):
    ckpt = tmp_path / name
    hist = tmp_path / (name + ".csv")
    code, out, err = run([
        "train", "--synth", count, "--img-size", "32", "--epochs", epochs,
        "--batch", "4", "--variant", "t", "--seed", seed, "--scales", "1.0",
        "--out", str(ckpt), "--history", str(hist)], capsys)
    assert code == 0, err
    return ckpt, hist


class TestSummary:
    def test_std_params_and_macs(self, capsys):
        code, out, _ = run(["summary", "--variant", "std", "--input-size", "256"],
                           capsys)
        assert code == 0
        assert "total_params 268266" in out
        assert "total_macs 544147968" in out

    def test_params_only_without_input_size(self, capsys):
        code, out, _ = run(["summary", "--variant", "t"], capsys)
        assert code == 0
        assert "total_params 25313" in out
        assert "total_macs" not in out

    def test_kernel_ablation_delta(self, capsys):
        def total(kernels):
            code, out, _ = run(["summary", "--variant", "std", "--kernels", kernels,
                                "--format", "json"], capsys)
            assert code == 0
            return json.loads(out)["total_params"]

        delta = total("1,3,5") - total("3")
        assert abs(delta - 35_000) <= 3_500  # ~0.035M within 10%

    def test_exactly_one_of_variant_channels(self, capsys):
        code, _, err = run(["summary"], capsys)
        assert code == 1
        code, _, err = run(["summary", "--variant", "t",
                            "--channels", "1,2,3,4,5"], capsys)
        assert code == 1

    def test_explicit_channels(self, capsys):
        code, out, _ = run(["summary", "--channels", "4,8,16,24,32"], capsys)
        assert code == 0
        assert "total_params 25313" in out

    def test_unknown_variant_is_usage_error(self, capsys):
        code, _, _ = run(["summary", "--variant", "q"], capsys)
        assert code == 1

    def test_unknown_flag_is_usage_error(self, capsys):
        code, _, _ = run(["summary", "--variant", "t", "--bogus"], capsys)
        assert code == 1

    def test_json_format_parses(self, capsys):
        code, out, _ = run(["summary", "--variant", "t", "--input-size", "64",
                            "--format", "json"], capsys)
        doc = json.loads(out)
        assert doc["convention"] == "mac"
        assert doc["total_params"] == 25313


class TestHelp:
    @pytest.mark.parametrize("cmd", ["summary", "train", "predict", "eval",
                                     "gradcheck", "synth"])
    def test_subcommand_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "--" in capsys.readouterr().out

    def test_top_level_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0


class TestSynth:
    def test_deterministic_directories(self, tmp_path, capsys):
        for sub in ("a", "b"):
            code, _, _ = run(["synth", "--out", str(tmp_path / sub), "--count", "3",
                              "--size", "32", "--seed", "5"], capsys)
            assert code == 0
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*.pgm")):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_layout(self, tmp_path, capsys):
        run(["synth", "--out", str(tmp_path / "d"), "--count", "2", "--size", "32",
             "--seed", "1"], capsys)
        assert sorted(p.name for p in (tmp_path / "d" / "images").iterdir()) == \
            ["0000.pgm", "0001.pgm"]
        assert (tmp_path / "d" / "masks" / "0001.pgm").exists()


class TestTrain:
    def test_writes_checkpoint_and_history(self, tmp_path, capsys):
        ckpt, hist = train_tiny(tmp_path, capsys)
        assert ckpt.exists()
        lines = hist.read_text().strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_dice"
        assert len(lines) == 2

    def test_deterministic_history(self, tmp_path, capsys):
        _, h1 = train_tiny(tmp_path, capsys, name="a.mkun")
        _, h2 = train_tiny(tmp_path, capsys, name="b.mkun")
        assert h1.read_text() == h2.read_text()

    def test_missing_data_dir_is_runtime_error(self, tmp_path, capsys):
        code, _, err = run(["train", "--data", str(tmp_path / "nope"),
                            "--out", str(tmp_path / "x.mkun")], capsys)
        assert code == 2
        assert err

    def test_data_and_synth_mutually_exclusive(self, tmp_path, capsys):
        code, _, _ = run(["train", "--data", "d", "--synth", "3",
                          "--out", str(tmp_path / "x.mkun")], capsys)
        assert code == 1

    def test_trains_from_dataset_dir(self, tmp_path, capsys):
        run(["synth", "--out", str(tmp_path / "d"), "--count", "6", "--size", "32",
             "--seed", "2"], capsys)
        code, out, err = run([
            "train", "--data", str(tmp_path / "d"), "--img-size", "32",
            "--epochs", "1", "--batch", "4", "--variant", "t", "--seed", "1",
            "--scales", "1.0", "--out", str(tmp_path / "d.mkun")], capsys)
        assert code == 0, err


class TestPredictAndEval:
    def test_predict_writes_mask(self, tmp_path, capsys):
        ckpt, _ = train_tiny(tmp_path, capsys)
        run(["synth", "--out", str(tmp_path / "d"), "--count", "1", "--size", "32",
             "--seed", "9"], capsys)
        img = tmp_path / "d" / "images" / "0000.pgm"
        out_mask = tmp_path / "pred.pgm"
        code, _, err = run(["predict", "--ckpt", str(ckpt), "--image", str(img),
                            "--out", str(out_mask)], capsys)
        assert code == 0, err
        data = read_image(out_mask).data
        assert set(np.unique(data)) <= {0.0, 1.0}

    def test_predict_prob_mode_monotone(self, tmp_path, capsys):
        ckpt, _ = train_tiny(tmp_path, capsys)
        run(["synth", "--out", str(tmp_path / "d"), "--count", "1", "--size", "32",
             "--seed", "9"], capsys)
        img = tmp_path / "d" / "images" / "0000.pgm"
        out_mask = tmp_path / "prob.pgm"
        code, _, _ = run(["predict", "--ckpt", str(ckpt), "--image", str(img),
                          "--out", str(out_mask), "--prob"], capsys)
        assert code == 0
        raw = out_mask.read_bytes()
        assert raw.startswith(b"P5")

    def test_predict_indivisible_dims(self, tmp_path, capsys):
        ckpt, _ = train_tiny(tmp_path, capsys)
        bad = tmp_path / "odd.pgm"
        write_pgm(bad, np.zeros((30, 30), np.uint8))
        code, _, err = run(["predict", "--ckpt", str(ckpt), "--image", str(bad),
                            "--out", str(tmp_path / "o.pgm")], capsys)
        assert code == 2
        assert "32x32" in err  # required padded size stated

    def test_predict_missing_checkpoint(self, tmp_path, capsys):
        code, _, _ = run(["predict", "--ckpt", str(tmp_path / "none.mkun"),
                          "--image", "x", "--out", "y"], capsys)
        assert code == 2

    def test_eval_prints_table_and_means(self, tmp_path, capsys):
        ckpt, _ = train_tiny(tmp_path, capsys)
        run(["synth", "--out", str(tmp_path / "d"), "--count", "3", "--size", "32",
             "--seed", "4"], capsys)
        code, out, err = run(["eval", "--ckpt", str(ckpt),
                              "--data", str(tmp_path / "d")], capsys)
        assert code == 0, err
        assert "mean_dice" in out and "mean_iou" in out
        assert "0000" in out

    def test_eval_empty_dir(self, tmp_path, capsys):
        ckpt, _ = train_tiny(tmp_path, capsys)
        (tmp_path / "empty").mkdir()
        code, _, _ = run(["eval", "--ckpt", str(ckpt),
                          "--data", str(tmp_path / "empty")], capsys)
        assert code == 2

    def test_best_checkpoint_beats_initial(self, tmp_path, capsys):
        # training-progress property: eval(best) >= eval(init) on the val data
        from mkunet.training import evaluate

        data = synth_dataset(12, 32, seed=6)
        init = build_network(preset("t"), seed=3)
        init_path = tmp_path / "init.mkun"
        save_checkpoint(init, init_path)
        ckpt, _ = train_tiny(tmp_path, capsys, seed="3", epochs="4", count="12")
        from mkunet.modelio import load_checkpoint

        best = evaluate(load_checkpoint(ckpt), data).mean_dice
        first = evaluate(load_checkpoint(init_path), data).mean_dice
        assert best >= first


class TestGradcheckCommand:
    def test_single_block_passes(self, capsys):
        code, out, _ = run(["gradcheck", "--block", "ca"], capsys)
        assert code == 0
        assert "ca" in out and "pass" in out
        assert "max_rel_err" in out

    def test_zero_tolerance_fails_with_exit_3(self, capsys):
        code, out, _ = run(["gradcheck", "--block", "sa", "--tol", "0"], capsys)
        assert code == 3
        assert "FAIL" in out

    def test_unknown_block_is_usage_error(self, capsys):
        code, _, _ = run(["gradcheck", "--block", "conv9"], capsys)
        assert code == 1
