import json
import subprocess
import sys

import pytest

from spkid.cli import EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from spkid.metrics import read_metrics_csv

TINY = ["--set", "max_iter=4", "--set", "batch_size=4", "--set", "eval_interval=2",
        "--set", "max_len_s=1.0", "--set", "model_dim=16", "--set", "n_heads=2",
        "--set", "n_layers=1", "--set", "ffn_dim=32",
        "--set", "conv_layers=8:10:5,8:3:2,8:3:2,8:3:2,8:3:2,8:2:2,8:2:2",
        "--set", "n_clusters=5", "--set", "kmeans_iters=10", "--set", "num_distractors=3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert run(["synth", "--speakers", "3", "--clips", "10", "--duration", "1",
                "--out", str(out), "--seed", "1"]) == EXIT_OK
    return out


class TestUsage:
    def test_no_arguments(self, capsys):
        assert run([]) == EXIT_USAGE
        assert "usage:" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [["bogus"], ["synth", "--nope"], ["synth"],
                                      ["split", "--manifest", "m.jsonl", "--ratios", "1,2"]])
    def test_bad_arguments(self, argv, capsys):
        assert run(argv) == EXIT_USAGE
        assert "usage:" in capsys.readouterr().err

    def test_help(self, capsys):
        assert run(["--help"]) == EXIT_OK
        assert "gradcheck" in capsys.readouterr().out

    def test_invalid_value(self, tmp_path):
        assert run(["synth", "--speakers", "2", "--clips", "5", "--duration", "-1",
                    "--out", str(tmp_path)]) == EXIT_USAGE


class TestDataErrors:
    def test_unknown_config_key(self, corpus, tmp_path):
        argv = ["finetune", "--manifest", str(corpus / "manifest.jsonl"), "--out",
                str(tmp_path), "--set", "bogus=1"]
        # config text is input data, like a manifest
        assert run(argv) == EXIT_DATA

    def test_missing_manifest(self, tmp_path):
        assert run(["finetune", "--manifest", str(tmp_path / "none.tsv"),
                    "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_corrupt_checkpoint(self, corpus, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"SPKIDCKP" + b"\x00" * 3)
        assert run(["evaluate", "--ckpt", str(bad), "--manifest",
                    str(corpus / "manifest.jsonl"), "--out", str(tmp_path)]) == EXIT_DATA

    def test_not_a_wav(self, tmp_path, trained):
        junk = tmp_path / "junk.wav"
        junk.write_bytes(b"hello")
        assert run(["predict", "--ckpt", str(trained), "--wav", str(junk)]) == EXIT_DATA


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus.parent / "run"
    assert run(["finetune", "--manifest", str(corpus / "manifest.jsonl"),
                "--out", str(out), "--seed", "0", *TINY]) == EXIT_OK
    return out / "best.ckpt"


class TestPipeline:
    def test_synth_writes_manifest(self, corpus):
        lines = (corpus / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 30

    def test_finetune_outputs(self, trained):
        for name in ("best.ckpt", "trainlog.csv", "config.txt"):
            assert (trained.parent / name).exists()

    def test_evaluate_writes_reports(self, corpus, trained, tmp_path):
        out = tmp_path / "eval"
        assert run(["evaluate", "--ckpt", str(trained), "--manifest",
                    str(corpus / "manifest.jsonl"), "--out", str(out)]) == EXIT_OK
        report = read_metrics_csv(out / "metrics.csv")
        assert report.labels == ["R01", "R02", "R03"]
        assert 0.0 <= report.macro_f1 <= 1.0
        assert (out / "curves.csv").read_text().startswith("step,TL,VL\n")

    def test_predict_json_lines(self, corpus, trained, capsys):
        wavs = sorted(corpus.glob("R0*/*.wav"))[:2]
        assert run(["predict", "--ckpt", str(trained), "--wav", *map(str, wavs)]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 2
        for line, wav in zip(lines, wavs):
            row = json.loads(line)
            assert row["path"] == str(wav) and row["label"] in ("R01", "R02", "R03")
            assert abs(sum(row["probs"]) - 1.0) < 1e-4

    def test_pretrain_then_finetune(self, corpus, tmp_path):
        manifest = str(corpus / "manifest.jsonl")
        assert run(["pretrain", "--objective", "hubert", "--manifest", manifest,
                    "--out", str(tmp_path / "pre"), *TINY]) == EXIT_OK
        assert run(["finetune", "--manifest", manifest, "--out", str(tmp_path / "ft"),
                    "--init", str(tmp_path / "pre" / "best.ckpt"), *TINY]) == EXIT_OK

    def test_split_in_place(self, corpus, tmp_path):
        manifest = tmp_path / "m.jsonl"
        manifest.write_text((corpus / "manifest.jsonl").read_text())
        assert run(["split", "--manifest", str(manifest), "--ratios", "0.6,0.2,0.2"]) == EXIT_OK
        splits = [json.loads(line)["split"] for line in manifest.read_text().splitlines()]
        assert splits.count("train") == 18 and splits.count("test") == 6

    def test_module_entry_point(self):
        done = subprocess.run([sys.executable, "-m", "spkid"], capture_output=True, text=True)
        assert done.returncode == EXIT_USAGE and "usage:" in done.stderr


class TestGradcheck:
    # The composed encoder case carries central-difference truncation error
    # between 1.7e-4 and 1e-2 depending on the seed, so the outcome hinges on --tol.
    def test_loose_tolerance_passes(self, capsys):
        assert run(["gradcheck", "--seeds", "1", "--tol", "1e-2"]) == EXIT_OK
        err = capsys.readouterr().err
        assert err.count("PASS") == 29 and "FAIL" not in err

    def test_failure_exits_nonzero(self, capsys):
        assert run(["gradcheck", "--seeds", "2", "--tol", "1e-4"]) == EXIT_RUNTIME
        err = capsys.readouterr().err
        assert "FAIL tiny_encoder" in err
        assert all(line.startswith("PASS") for line in err.splitlines()
                   if line.startswith(("PASS", "FAIL")) and "tiny_encoder" not in line)
