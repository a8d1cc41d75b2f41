import csv
import json
import subprocess
import sys

import pytest

from cstnet.cli import main

TINY = {
    "synthetic": {"n_pairs": 24, "n_test": 8, "n_abx_triples": 6},
    "encoder": {"channels": 8},
    "train": {"epochs": 2, "batch_size": 8},
    "probe": {"epochs": 2},
}


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-synthetic -> train -> eval-retrieval -> layer-sweep -> train-ctc-probe -> eval-per."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    data, run = root / "data", root / "run"
    assert main(["gen-synthetic", *c, "--out-dir", str(data)]) == 0
    assert main(["train", *c, "--manifest", str(data / "manifest_train.tsv"), "--out-dir", str(run)]) == 0
    ck = str(run / "checkpoint.cstn")
    assert main(["eval-retrieval", "--checkpoint", ck, "--manifest", str(data / "manifest_test.tsv"), "--out-dir", str(run)]) == 0
    items = str(data / "abx" / "items.tsv")
    assert main(["layer-sweep", "--items", items, "--checkpoint", ck, "--out-dir", str(run)]) == 0
    assert main(["eval-abx", "--items", items, "--checkpoint", ck, "--layer", "6", "--out-dir", str(run)]) == 0
    probe_args = ["--train-labels", str(data / "phones_train.tsv"), "--test-labels", str(data / "phones_test.tsv")]
    assert main(["train-ctc-probe", *c, *probe_args, "--checkpoint", ck, "--layers", "0,5", "--out-dir", str(run)]) == 0
    assert main(["eval-per", "--probe", str(run / "probe_L5.npz"), "--labels", str(data / "phones_test.tsv"), "--checkpoint", ck, "--out-dir", str(run)]) == 0
    return root, data, run


class TestPipeline:
    def test_artifacts(self, pipeline):
        _, data, run = pipeline
        for name in ("epochs.csv", "checkpoint.cstn", "config.json", "retrieval.csv", "layer_sweep.csv", "abx.csv", "per.csv", "per_eval.csv"):
            assert (run / name).exists(), name
        assert len(rows(run / "epochs.csv")) == 3
        assert [r[0] for r in rows(run / "retrieval.csv")] == ["direction", "speech->text", "text->speech"]
        assert [r[0] for r in rows(run / "layer_sweep.csv")[1:]] == [str(i) for i in range(14)]
        assert [r[0] for r in rows(run / "per.csv")[1:]] == ["input", "L5"]
        assert json.loads((run / "config.json").read_text())["encoder"]["channels"] == 8

    def test_saved_probe_reproduces_report(self, pipeline):
        _, _, run = pipeline
        assert rows(run / "per.csv")[2][1] == rows(run / "per_eval.csv")[1][1]

    def test_training_deterministic(self, pipeline, tmp_path):
        root, data, run = pipeline
        out = tmp_path / "again"
        assert main(["train", "--config", str(root / "cfg.json"), "--manifest", str(data / "manifest_train.tsv"), "--out-dir", str(out)]) == 0
        assert (out / "epochs.csv").read_bytes() == (run / "epochs.csv").read_bytes()
        assert (out / "checkpoint.cstn").read_bytes() == (run / "checkpoint.cstn").read_bytes()

    def test_seed_changes_training(self, pipeline, tmp_path):
        root, data, run = pipeline
        out = tmp_path / "s1"
        main(["train", "--config", str(root / "cfg.json"), "--seed", "1", "--manifest", str(data / "manifest_train.tsv"), "--out-dir", str(out)])
        assert (out / "epochs.csv").read_bytes() != (run / "epochs.csv").read_bytes()

    def test_dump_features(self, pipeline, tmp_path):
        _, data, run = pipeline
        feat = data / "features" / "utt00000.feat"
        assert main(["dump-features", str(feat), "--layer", "6", "--checkpoint", str(run / "checkpoint.cstn"), "--out-dir", str(tmp_path)]) == 0
        from cstnet.dsp import load_features

        f = load_features(tmp_path / "utt00000.L6.feat")
        assert f.frame_hop_ms == 20 and f.dim == 8


class TestFrontend:
    def test_extract_fbank(self, tmp_path):
        from cstnet.dsp import load_features, sine, write_wav

        write_wav(tmp_path / "tone.wav", sine(440, 0.5))
        assert main(["extract-fbank", str(tmp_path / "tone.wav"), "--out-dir", str(tmp_path / "o")]) == 0
        assert load_features(tmp_path / "o" / "tone.feat").data.shape == (48, 40)

    def test_wav_corpus_trains(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**TINY, "synthetic": {"n_pairs": 8, "n_test": 2, "n_abx_triples": 0}, "train": {"epochs": 1, "batch_size": 4}}))
        assert main(["gen-synthetic", "--config", str(cfg), "--with-wav", "--out-dir", str(tmp_path / "d")]) == 0
        assert main(["train", "--config", str(cfg), "--manifest", str(tmp_path / "d" / "manifest_train.tsv"), "--out-dir", str(tmp_path / "r")]) == 0


class TestErrors:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code == 2

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"learning_rate": 1}}))
        assert main(["gen-synthetic", "--config", str(tmp_path / "c.json"), "--out-dir", str(tmp_path)]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and "unknown config key train.learning_rate" in err[0]

    def test_missing_file(self, tmp_path, capsys):
        assert main(["eval-abx", "--items", str(tmp_path / "none.tsv"), "--out-dir", str(tmp_path)]) == 1
        assert capsys.readouterr().err.startswith("cstnet eval-abx: error:")

    def test_bad_wav(self, tmp_path, capsys):
        (tmp_path / "x.wav").write_bytes(b"junk")
        assert main(["extract-fbank", str(tmp_path / "x.wav"), "--out-dir", str(tmp_path)]) == 1
        assert "malformed" in capsys.readouterr().err

    def test_usage_errors(self, tmp_path):
        items = tmp_path / "i.tsv"
        items.write_text("")
        assert main(["layer-sweep", "--items", str(items), "--out-dir", str(tmp_path)]) == 2
        assert main(["dump-features", "x.feat", "--layer", "20", "--random-init", "--out-dir", str(tmp_path)]) == 2
        assert main(["train-ctc-probe", "--train-labels", "a", "--test-labels", "b", "--layers", "x", "--out-dir", str(tmp_path)]) in (1, 2)

    def test_gradcheck_ops(self, capsys):
        assert main(["gradcheck", "--ops-only"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out and all(line.startswith("PASS") for line in out)

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "cstnet.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "gen-synthetic" in res.stdout
        for cmd in ("extract-fbank", "dump-features", "eval-retrieval", "eval-abx", "layer-sweep", "train-ctc-probe", "eval-per", "gradcheck"):
            assert cmd in res.stdout
