import builtins
import io
import json

import pytest

from attriclean import cli, storage


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {"n_clean": 4, "n_label_noise": 2, "n_bleeding": 2, "n_effects": 0,
            "song_length": 1.0, "master_seed": 3}
    (root / "spec.json").write_text(json.dumps(spec))
    refs = {**spec, "n_clean": 2, "n_label_noise": 0, "n_bleeding": 0, "master_seed": 4, "prefix": "ref"}
    (root / "refs.json").write_text(json.dumps(refs))
    assert cli.main(["synth", "--spec", str(root / "spec.json"), "--out", str(root / "corpus")]) == 0
    assert cli.main(["synth", "--spec", str(root / "refs.json"), "--out", str(root / "refs")]) == 0
    assert cli.main(["train", "--corpus", str(root / "corpus"), "--refs", str(root / "refs"),
                     "--out", str(root / "ckpt"), "--epochs", "2"]) == 0
    return root


class OpenSpy:
    def __init__(self, monkeypatch):
        self.paths = []
        real = builtins.open

        def spy(file, *args, **kwargs):
            self.paths.append(str(file))
            return real(file, *args, **kwargs)

        monkeypatch.setattr(builtins, "open", spy)
        monkeypatch.setattr(io, "open", spy)


def test_synth_writes_ledger_beside_corpus(workspace):
    ledger = storage.read_ledger(workspace / "corpus.ledger.json")
    assert len(ledger) == 8
    assert sorted(p.name for p in (workspace / "corpus").iterdir()) == sorted(ledger)


@pytest.mark.parametrize("verb", ["attribute", "fad", "clsfilter"])
def test_scoring_never_opens_ledger(monkeypatch, workspace, verb):
    spy = OpenSpy(monkeypatch)
    out = workspace / f"{verb}.out"
    args = {"attribute": ["--ckpt", str(workspace / "ckpt")],
            "fad": ["--ratio", "0.5"], "clsfilter": ["--ratio", "0.5"]}[verb]
    code = cli.main([verb, "--corpus", str(workspace / "corpus"), "--refs", str(workspace / "refs"),
                     "--out", str(out)] + args)
    assert code == 0
    assert spy.paths, "spy saw no file access"
    assert not any("ledger" in p for p in spy.paths)


def test_attribute_filter_retrain_eval(workspace, capsys):
    matrix = workspace / "attr.atm"
    assert cli.main(["attribute", "--ckpt", str(workspace / "ckpt"), "--corpus", str(workspace / "corpus"),
                     "--refs", str(workspace / "refs"), "--out", str(matrix)]) == 0
    assert storage.is_matrix_file(matrix)
    assert cli.main(["filter", "--scores", str(matrix), "--ratio", "0.75"]) == 0
    kept = json.loads((workspace / "attr.atm.retained.json").read_text())
    assert len(kept["retained"]) == 6
    assert cli.main(["filter", "--scores", f"{matrix}.scores.tsv", "--ratio", "0.75",
                     "--mode", "per-target", "--out", str(workspace / "pt.json")]) == 0
    per = json.loads((workspace / "pt.json").read_text())["retained"]
    assert set(per) == {"vocals", "bass", "drums", "other"}
    assert cli.main(["retrain", "--corpus", str(workspace / "corpus"), "--retained",
                     str(workspace / "pt.json"), "--refs", str(workspace / "refs"),
                     "--out", str(workspace / "ckpt2"), "--epochs", "1"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(workspace / "ckpt2"), "--eval", str(workspace / "refs")]) == 0
    assert "mean" in json.loads(capsys.readouterr().out)
    assert cli.main(["report", "--retained", str(workspace / "attr.atm.retained.json"),
                     "--ledger", str(workspace / "corpus.ledger.json")]) == 0
    assert "clean" in capsys.readouterr().out


def test_unified_filter_from_matrix_matches_table(workspace):
    matrix = workspace / "attr2.atm"
    cli.main(["attribute", "--ckpt", str(workspace / "ckpt"), "--corpus", str(workspace / "corpus"),
              "--refs", str(workspace / "refs"), "--out", str(matrix)])
    cli.main(["filter", "--scores", str(matrix), "--ratio", "0.5", "--out", str(workspace / "m.json")])
    cli.main(["filter", "--scores", f"{matrix}.scores.tsv", "--ratio", "0.5", "--out", str(workspace / "t.json")])
    assert (json.loads((workspace / "m.json").read_text())["retained"]
            == json.loads((workspace / "t.json").read_text())["retained"])


def test_run_and_report(workspace, capsys):
    cfg = {"corpus": {"n_clean": 4, "n_label_noise": 2, "n_bleeding": 2, "n_effects": 0,
                      "song_length": 1.0, "master_seed": 9},
           "methods": ["fad"], "ratios": [0.5], "seeds": [1], "n_refs": 2, "n_eval": 2, "epochs": 1}
    (workspace / "run.json").write_text(json.dumps(cfg))
    assert cli.main(["run", "--config", str(workspace / "run.json"), "--out", str(workspace / "run")]) == 0
    assert (workspace / "run" / "report.json").is_file()
    capsys.readouterr()
    assert cli.main(["report", "--run", str(workspace / "run")]) == 0
    assert "fad" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["fad", "--corpus", "x", "--refs", "y", "--out", "z", "--ratio", "0"],
    ["fad", "--corpus", "x", "--refs", "y", "--out", "z", "--ratio", "1.5"],
    ["frobnicate"],
    ["report"],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert cli.main(argv) == 2


def test_bad_config_file_exits_2(tmp_path):
    (tmp_path / "c.json").write_text('{"ratios": [2.0]}')
    assert cli.main(["run", "--config", str(tmp_path / "c.json")]) == 2
    (tmp_path / "s.json").write_text('{"n_clean": -1}')
    assert cli.main(["synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 2


def test_missing_inputs_exit_3(tmp_path):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none"), "--eval", str(tmp_path / "none")]) == 3
    assert cli.main(["fad", "--corpus", str(tmp_path / "a"), "--refs", str(tmp_path / "b"),
                     "--out", str(tmp_path / "o")]) == 3
