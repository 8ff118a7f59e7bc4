import json
from pathlib import Path

import numpy as np
import pytest

from dmmh.cli import GRADCHECK_DEFAULTS, main
from dmmh.data import load_dataset, validate_manifest, load_manifest
from dmmh.hamming import CodeBank, pack, rank
from dmmh.model import DMMH, ModelConfig


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A short synth -> train -> encode run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--classes", "3", "--per-class", "40", "--dims", "16,8",
                 "--sigma", "0.15", "--seed", "3", "--out", str(root / "ds")]) == 0
    manifest = root / "ds" / "manifest.json"
    ckpt = root / "model.ckpt"
    assert main(["train", "--manifest", str(manifest), "--checkpoint", str(ckpt),
                 "--epochs", "5", "--d-model", "8", "--seq-len", "4", "--seed", "3"]) == 0
    banks = {}
    for split in ("query", "retrieval"):
        banks[split] = root / f"{split}.codes"
        assert main(["encode", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                     "--split", split, "--out", str(banks[split])]) == 0
    return {"root": root, "manifest": manifest, "ckpt": ckpt, **banks}


class TestSynth:
    def test_example(self, capsys, tmp_path):
        code, lines = run(capsys, "synth", "--classes", 3, "--per-class", 100, "--dims", "64,32",
                          "--seed", 7, "--out", tmp_path / "s")
        assert code == 0
        path = Path(lines[0]["manifest"])
        validate_manifest(load_manifest(path))
        ds = load_dataset(path)
        assert sum(len(ds.split(s)[2]) for s in ("training", "retrieval", "query")) == 300

    def test_missing_dims(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["synth", "--classes", "3", "--per-class", "10", "--out", str(tmp_path)])
        assert e.value.code == 2

    def test_bad_per_class(self, capsys, tmp_path):
        code, _ = run(capsys, "synth", "--classes", 3, "--per-class", 1, "--dims", "4",
                      "--out", tmp_path)
        assert code == 2

    def test_rerun_identical(self, capsys, tmp_path):
        for name in ("a", "b"):
            run(capsys, "synth", "--classes", 2, "--per-class", 10, "--dims", "5,3",
                "--seed", 11, "--out", tmp_path / name)
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestTrain:
    def test_log_shape(self, capsys, pipeline, tmp_path):
        code, lines = run(capsys, "train", "--manifest", pipeline["manifest"],
                          "--checkpoint", tmp_path / "m.ckpt", "--epochs", 4, "--d-model", 8,
                          "--seq-len", 4)
        assert code == 0
        assert lines[0]["event"] == "config"
        epochs = [l for l in lines if "epoch" in l]
        assert [l["epoch"] for l in epochs] == [0, 1, 2, 3]
        assert lines[-1]["event"] == "done"
        assert lines[-1]["final_loss"] < lines[-1]["initial_loss"]
        assert (tmp_path / "m.ckpt").exists()

    def test_bad_code_length(self, capsys, pipeline, tmp_path):
        code, _ = run(capsys, "train", "--manifest", pipeline["manifest"],
                      "--checkpoint", tmp_path / "m.ckpt", "--bits", 20)
        assert code == 2
        assert not (tmp_path / "m.ckpt").exists()

    def test_resume_rejected(self, capsys, pipeline, tmp_path):
        code = main(["train", "--manifest", str(pipeline["manifest"]),
                     "--checkpoint", str(tmp_path / "m.ckpt"), "--resume"])
        assert code == 2
        assert "not supported" in capsys.readouterr().err

    def test_unknown_config_key(self, capsys, pipeline, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochz": 3}))
        code, _ = run(capsys, "--config", cfg, "train", "--manifest", pipeline["manifest"],
                      "--checkpoint", tmp_path / "m.ckpt")
        assert code == 2

    def test_config_echo_reloads_to_same_run(self, capsys, pipeline, tmp_path):
        code, lines = run(capsys, "train", "--manifest", pipeline["manifest"],
                          "--checkpoint", tmp_path / "a.ckpt", "--epochs", 2, "--d-model", 8,
                          "--seq-len", 4, "--seed", 5)
        assert code == 0
        echoed = dict(lines[0]["config"], checkpoint=str(tmp_path / "b.ckpt"))
        (tmp_path / "echo.json").write_text(json.dumps(echoed))
        code, again = run(capsys, "train", "--config", tmp_path / "echo.json")
        assert code == 0
        assert again[0]["config"]["seed"] == 5
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_flag_overrides_config(self, capsys, pipeline, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"epochs": 1, "d_model": 8, "seq_len": 2}))
        code, lines = run(capsys, "train", "--config", tmp_path / "c.json", "--epochs", 2,
                          "--manifest", pipeline["manifest"], "--checkpoint", tmp_path / "m")
        assert code == 0
        assert lines[0]["config"]["epochs"] == 2
        assert lines[0]["config"]["seq_len"] == 2

    def test_missing_manifest(self, capsys, tmp_path):
        code, _ = run(capsys, "train", "--checkpoint", tmp_path / "m")
        assert code == 2


class TestEncode:
    def test_size_matches_split(self, pipeline):
        ds = load_dataset(pipeline["manifest"])
        bank = CodeBank.load(pipeline["query"])
        _, labels, ids = ds.split("query")
        assert len(bank) == len(ids)
        np.testing.assert_array_equal(bank.ids, ids)
        np.testing.assert_array_equal(bank.labels, labels)

    def test_twice_identical(self, capsys, pipeline, tmp_path):
        for threads in (1, 3):
            code, _ = run(capsys, "--threads", threads, "encode", "--checkpoint", pipeline["ckpt"],
                          "--manifest", pipeline["manifest"], "--split", "query",
                          "--out", tmp_path / f"q{threads}.codes")
            assert code == 0
            assert (tmp_path / f"q{threads}.codes").read_bytes() == pipeline["query"].read_bytes()

    def test_unknown_split(self, capsys, pipeline, tmp_path):
        code, _ = run(capsys, "encode", "--checkpoint", pipeline["ckpt"],
                      "--manifest", pipeline["manifest"], "--split", "validation",
                      "--out", tmp_path / "x")
        assert code == 2

    def test_missing_checkpoint_file(self, capsys, pipeline, tmp_path):
        code, _ = run(capsys, "encode", "--checkpoint", tmp_path / "nope",
                      "--manifest", pipeline["manifest"], "--split", "query", "--out", tmp_path / "x")
        assert code == 2


class TestQuery:
    def test_self_match(self, capsys, pipeline):
        bank = CodeBank.load(pipeline["retrieval"])
        target = int(bank.ids[7])
        code, lines = run(capsys, "query", "--codes", pipeline["retrieval"], "--id", target,
                          "--topk", 3)
        assert code == 0
        assert lines[0]["rank"] == 1
        assert lines[0]["distance"] == 0
        # ties at distance 0 are broken by id, so the target is among the zero-distance block
        zero = [l["id"] for l in lines if l["distance"] == 0]
        full = rank(bank.words[7], bank)
        assert target in full.ids[full.distances == 0]
        assert zero == [int(i) for i in full.ids[:len(zero)]]

    @pytest.mark.parametrize("topk", [1, 5, 10_000])
    def test_topk_length(self, capsys, pipeline, topk):
        n = len(CodeBank.load(pipeline["retrieval"]))
        code, lines = run(capsys, "query", "--codes", pipeline["retrieval"], "--code", "1" * 16,
                          "--topk", topk)
        assert code == 0
        assert len(lines) == min(topk, n)
        assert [l["rank"] for l in lines] == list(range(1, len(lines) + 1))

    def test_matches_full_rank(self, capsys, pipeline, rng):
        bank = CodeBank.load(pipeline["retrieval"])
        for _ in range(5):
            bits = rng.integers(0, 2, 16)
            code, lines = run(capsys, "query", "--codes", pipeline["retrieval"],
                              "--code", "".join(map(str, bits)), "--topk", 25)
            assert code == 0
            oracle = rank(pack(np.where(bits == 1, 1, -1)), bank)[:25].pairs()
            assert [(l["id"], l["distance"]) for l in lines] == oracle

    def test_cross_bank_id(self, capsys, pipeline):
        q = CodeBank.load(pipeline["query"])
        code, lines = run(capsys, "query", "--codes", pipeline["retrieval"],
                          "--query-codes", pipeline["query"], "--id", int(q.ids[0]), "--topk", 2)
        assert code == 0 and len(lines) == 2

    @pytest.mark.parametrize("extra", [[], ["--id", 0, "--code", "1" * 16], ["--code", "101"],
                                       ["--id", 10**9], ["--code", "1" * 16, "--topk", 0]])
    def test_bad_args(self, capsys, pipeline, extra):
        code, _ = run(capsys, "query", "--codes", pipeline["retrieval"], *extra)
        assert code == 2


class TestEval:
    def test_report(self, capsys, pipeline, tmp_path):
        code, lines = run(capsys, "eval", "--query", pipeline["query"],
                          "--retrieval", pipeline["retrieval"], "--report", tmp_path / "r.json")
        assert code == 0
        rep = lines[0]
        assert 0.0 <= rep["map"] <= 1.0
        assert rep["bits"] == 16
        assert set(rep["precision_at"]) == {"1", "10", "100"}
        assert json.loads((tmp_path / "r.json").read_text()) == rep

    def test_paper_reference(self, capsys, tmp_path, rng):
        codes = np.where(rng.integers(0, 2, (30, 64)) == 1, 1, -1)
        labels = np.eye(3, dtype=np.uint8)[rng.integers(0, 3, 30)]
        CodeBank.from_codes(codes, labels).save(tmp_path / "b.codes")
        code, lines = run(capsys, "eval", "--query", tmp_path / "b.codes",
                          "--retrieval", tmp_path / "b.codes", "--paper-ref", "MIR-Flickr25K")
        assert code == 0
        assert lines[0]["paper_reference"] == {"dataset": "MIR-Flickr25K", "bits": 64,
                                               "map": 0.8694}

    def test_unknown_reference_dataset(self, capsys, pipeline):
        code, _ = run(capsys, "eval", "--query", pipeline["query"],
                      "--retrieval", pipeline["retrieval"], "--paper-ref", "CIFAR-10")
        assert code == 2

    def test_mismatched_bits(self, capsys, pipeline, tmp_path, rng):
        codes = np.where(rng.integers(0, 2, (5, 32)) == 1, 1, -1)
        CodeBank.from_codes(codes, np.eye(3, dtype=np.uint8)[[0, 1, 2, 0, 1]]).save(tmp_path / "b")
        code, _ = run(capsys, "eval", "--query", pipeline["query"], "--retrieval", tmp_path / "b")
        assert code == 2

    def test_corrupt_bank(self, capsys, pipeline, tmp_path):
        raw = pipeline["query"].read_bytes()
        (tmp_path / "bad").write_bytes(raw[:-3])
        code, _ = run(capsys, "eval", "--query", tmp_path / "bad",
                      "--retrieval", pipeline["retrieval"])
        assert code == 2

    def test_threads_identical(self, capsys, pipeline):
        outs = [run(capsys, "--threads", t, "eval", "--query", pipeline["query"],
                    "--retrieval", pipeline["retrieval"])[1] for t in (1, 4)]
        assert outs[0] == outs[1]


class TestGradcheck:
    def test_default_passes(self, capsys):
        code, lines = run(capsys, "gradcheck", "--instances", 2)
        assert code == 0
        summary = lines[-1]
        assert summary["event"] == "summary" and summary["passed"]
        net = DMMH(ModelConfig.from_dict(GRADCHECK_DEFAULTS))
        assert [l["param"] for l in lines[:-1]] == [n for n, _, _ in net.named_parameters()]
        assert all(l["max_rel_err"] < 1e-3 for l in lines[:-1])

    def test_corrupt_fails(self, capsys):
        code, lines = run(capsys, "gradcheck", "--instances", 1, "--corrupt")
        assert code == 1
        bad = [l["param"] for l in lines[:-1] if not l["passed"]]
        assert bad == ["hash.weight"]
        assert lines[-1]["passed"] is False
