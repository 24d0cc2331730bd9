import numpy as np
import pytest

from expertnet import cli
from expertnet.data import encode_pgm
from expertnet.presets import CANONICAL_TEXT

SMALL_NET = ("input c=3 h=32 w=32\n"
             "conv name=Conv1 k=3 out=4 stride=2 act=relu\n"
             "exfeat name=ExFeat1\n"
             "add name=Add1 skip=Conv1\n"
             "conv name=Conv2 k=3 out=8 stride=2 act=relu\n"
             "fc name=FC1 out=16 act=relu\n"
             "classifier classes=2\n")


def run(argv):
    return cli.main(argv)


@pytest.fixture()
def small_config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_NET)
    return path


@pytest.fixture()
def trained(tmp_path, tiny_tree, small_config):
    model = tmp_path / "model.bin"
    log = tmp_path / "metrics.tsv"
    code = run(["train", "--data", str(tiny_tree), "--config", str(small_config),
                "--epochs", "3", "--batch", "8", "--seed", "1",
                "--out", str(model), "--log", str(log)])
    assert code == 0
    return model, log


class TestSynthCommand:
    def test_writes_tree(self, tmp_path, capsys):
        code = run(["synth", "--out", str(tmp_path / "d"), "--classes", "4",
                    "--per-class", "50", "--size", "32", "--seed", "7"])
        out = capsys.readouterr().out
        assert code == 0
        assert "seed: 7" in out
        files = list((tmp_path / "d").rglob("*.pgm"))
        assert len(files) == 200

    def test_rerun_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run(["synth", "--out", str(tmp_path / name), "--classes", "2",
                        "--per-class", "5", "--size", "32", "--seed", "3"]) == 0
        for f in sorted((tmp_path / "a").rglob("*.pgm")):
            twin = tmp_path / "b" / f.relative_to(tmp_path / "a")
            assert f.read_bytes() == twin.read_bytes()

    def test_single_class_is_usage_error(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path / "d"), "--classes", "1"]) == 1

    def test_unknown_flag_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["synth", "--out", str(tmp_path / "d"), "--bogus", "1"])
        assert exc.value.code == 1


class TestSeedResolution:
    def test_env_fallback(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("EXPERTNET_SEED", "123")
        run(["synth", "--out", str(tmp_path / "d"), "--classes", "2",
             "--per-class", "3", "--size", "16"])
        assert "seed: 123" in capsys.readouterr().out

    def test_explicit_seed_wins(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("EXPERTNET_SEED", "123")
        run(["synth", "--out", str(tmp_path / "d"), "--classes", "2",
             "--per-class", "3", "--size", "16", "--seed", "9"])
        assert "seed: 9" in capsys.readouterr().out

    def test_default_zero(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("EXPERTNET_SEED", raising=False)
        run(["synth", "--out", str(tmp_path / "d"), "--classes", "2",
             "--per-class", "3", "--size", "16"])
        assert "seed: 0" in capsys.readouterr().out


class TestParamsCommand:
    def test_canonical_audit(self, tmp_path, capsys):
        cfg = tmp_path / "canonical.cfg"
        cfg.write_text(CANONICAL_TEXT)
        assert run(["params", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        for token in ("2,432", "9,248", "86,144", "18,496", "55,392",
                      "110,720", "212,152", "424,192", "524,800", "525,312",
                      "total: 4,471,679"):
            assert token in out
        # rounded-count mismatches against the printed reference are flagged
        assert "ExFeat2" in out and "ExFeat3" in out and "ExFeat4" in out
        assert "deltas vs printed reference table: ExFeat2, ExFeat3, ExFeat4" in out

    def test_desk_total(self, tmp_path, capsys, small_config):
        assert run(["params", "--config", str(small_config)]) == 0
        out = capsys.readouterr().out
        assert "total:" in out

    def test_parse_failure_exit_1(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("input c=3 h=32 w=32\nwhat is this\n")
        assert run(["params", "--config", str(bad)]) == 1


class TestGradcheckCommand:
    def test_all_ops_pass(self, capsys):
        assert run(["gradcheck", "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 10

    def test_single_op(self, capsys):
        assert run(["gradcheck", "--seed", "3", "--op", "elective"]) == 0
        out = capsys.readouterr().out
        assert "elective[literal]" in out and "elective[nearest]" in out
        assert "conv2d" not in out

    def test_unknown_op(self):
        assert run(["gradcheck", "--seed", "3", "--op", "nosuch"]) == 1


class TestTrainCommand:
    def test_writes_model_log_and_figure(self, trained):
        model, log = trained
        assert model.exists() and model.stat().st_size > 0
        lines = log.read_text().splitlines()
        assert lines[0].startswith("# lr=0.001")
        assert log.with_suffix(".png").exists()

    def test_batch_zero_usage_error(self, tiny_tree, small_config, tmp_path):
        assert run(["train", "--data", str(tiny_tree), "--config",
                    str(small_config), "--batch", "0",
                    "--out", str(tmp_path / "m.bin")]) == 1

    def test_missing_dataset_exit_2(self, small_config, tmp_path):
        assert run(["train", "--data", str(tmp_path / "nope"), "--config",
                    str(small_config), "--epochs", "1",
                    "--out", str(tmp_path / "m.bin")]) == 2

    def test_config_parse_failure_exit_1(self, tiny_tree, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense\n")
        assert run(["train", "--data", str(tiny_tree), "--config", str(bad),
                    "--out", str(tmp_path / "m.bin")]) == 1

    def test_class_count_mismatch_exit_2(self, synth_tree, small_config, tmp_path):
        # small config declares 2 classes; the tree has 4
        assert run(["train", "--data", str(synth_tree), "--config",
                    str(small_config), "--epochs", "1",
                    "--out", str(tmp_path / "m.bin")]) == 2

    def test_manifest_written(self, tiny_tree, small_config, tmp_path):
        manifest = tmp_path / "split.tsv"
        assert run(["train", "--data", str(tiny_tree), "--config",
                    str(small_config), "--epochs", "1", "--batch", "8",
                    "--seed", "1", "--out", str(tmp_path / "m.bin"),
                    "--manifest", str(manifest)]) == 0
        rows = [l.split("\t") for l in manifest.read_text().splitlines()]
        assert len(rows) == 24
        assert {r[2] for r in rows} == {"train", "val", "test"}


class TestEvalCommand:
    def test_accuracy_and_matrix(self, trained, tiny_tree, capsys):
        model, _ = trained
        code = run(["eval", "--data", str(tiny_tree), "--model", str(model),
                    "--seed", "1"])
        out = capsys.readouterr().out
        assert code == 0
        assert "accuracy:" in out
        acc = float(out.split("accuracy:")[1].split()[0])
        assert 0.0 <= acc <= 100.0

    def test_class_mismatch_exit_2(self, trained, synth_tree):
        model, _ = trained  # 2-class model, 4-class tree
        assert run(["eval", "--data", str(synth_tree), "--model",
                    str(model), "--seed", "1"]) == 2

    def test_unsplittable_dataset_exit_2(self, trained, tmp_path):
        model, _ = trained
        root = tmp_path / "midget"
        for c in ("a", "b"):
            (root / c).mkdir(parents=True)
            (root / c / "one.pgm").write_bytes(
                encode_pgm(np.zeros((32, 32), dtype=np.uint8)))
        assert run(["eval", "--data", str(root), "--model", str(model),
                    "--seed", "1"]) == 2

    def test_bad_model_file_exit_2(self, tiny_tree, tmp_path):
        bogus = tmp_path / "junk.bin"
        bogus.write_bytes(b"not a model")
        assert run(["eval", "--data", str(tiny_tree), "--model",
                    str(bogus)]) == 2


class TestDumpFeaturesCommand:
    def test_writes_channel_maps(self, trained, tiny_tree, tmp_path, capsys):
        model, _ = trained
        image = next(iter(sorted(tiny_tree.rglob("*.pgm"))))
        out_dir = tmp_path / "maps"
        code = run(["dump-features", "--model", str(model), "--image",
                    str(image), "--layers", "ExFeat1,Conv1",
                    "--out", str(out_dir)])
        assert code == 0
        exfeat_maps = sorted(out_dir.glob("ExFeat1_*.pgm"))
        assert len(exfeat_maps) == 4  # ExFeat1 emits its input depth
        assert len(sorted(out_dir.glob("Conv1_*.pgm"))) == 4
        text = capsys.readouterr().out
        assert "ExFeat1: 4 maps of 16x16" in text

    def test_unknown_layer_lists_valid_names(self, trained, tiny_tree,
                                             tmp_path, capsys):
        model, _ = trained
        image = next(iter(sorted(tiny_tree.rglob("*.pgm"))))
        code = run(["dump-features", "--model", str(model), "--image",
                    str(image), "--layers", "Nope", "--out",
                    str(tmp_path / "maps")])
        assert code == 1
        assert "ExFeat1" in capsys.readouterr().err

    def test_montage_figure(self, trained, tiny_tree, tmp_path):
        model, _ = trained
        image = next(iter(sorted(tiny_tree.rglob("*.pgm"))))
        out_dir = tmp_path / "maps"
        assert run(["dump-features", "--model", str(model), "--image",
                    str(image), "--layers", "Conv1", "--out", str(out_dir),
                    "--montage"]) == 0
        assert (out_dir / "Conv1_montage.png").exists()


class TestCrossvalCommand:
    def test_reports_folds_and_mean(self, tiny_tree, small_config, capsys):
        code = run(["crossval", "--data", str(tiny_tree), "--config",
                    str(small_config), "--folds", "2", "--epochs", "2",
                    "--batch", "8", "--seed", "4"])
        out = capsys.readouterr().out
        assert code == 0
        assert "fold 0:" in out and "fold 1:" in out
        assert "mean accuracy:" in out

    def test_too_many_folds_exit_2(self, tiny_tree, small_config):
        assert run(["crossval", "--data", str(tiny_tree), "--config",
                    str(small_config), "--folds", "13", "--epochs", "1"]) == 2


class TestDeterminism:
    def test_identical_flags_identical_artifacts(self, tiny_tree, small_config,
                                                 tmp_path):
        outputs = []
        for name in ("x", "y"):
            model = tmp_path / f"{name}.bin"
            log = tmp_path / f"{name}.tsv"
            assert run(["train", "--data", str(tiny_tree), "--config",
                        str(small_config), "--epochs", "2", "--batch", "8",
                        "--seed", "5", "--out", str(model),
                        "--log", str(log)]) == 0
            outputs.append((model.read_bytes(), log.read_bytes()))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]
