import json

import numpy as np
import pytest

from supportset.cli import main
from supportset.corpus import read_corpus
from supportset.trainer import load_checkpoint

from conftest import tiny_config, tiny_corpus


def write_config(tmp_path, **overrides):
    cfg = tiny_config(**overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def gen_corpus(tmp_path, name="corpus.jsonl", **kw):
    """Write the conftest corpus through the generator CLI for realism."""
    args = dict(classes=4, per_class=4, video_len=6, caption_len=10,
                feature_dim=12, vocab_size=32, noise=0.1, seed=0)
    args.update(kw)
    path = tmp_path / name
    argv = ["gen-data", "--out", str(path)]
    for key, value in args.items():
        argv += [f"--{key.replace('_', '-')}", str(value)]
    assert main(argv) == 0
    return path


class TestGenData:
    def test_minimal_flags_write_matching_header(self, tmp_path):
        path = gen_corpus(tmp_path)
        corpus = read_corpus(path)
        assert corpus.header.feature_dim == 12
        assert corpus.header.vocab_size == 32
        assert corpus.header.num_classes == 4
        assert len(corpus) == 16

    def test_same_seed_twice_byte_identical(self, tmp_path):
        a = gen_corpus(tmp_path, "a.jsonl", seed=7)
        b = gen_corpus(tmp_path, "b.jsonl", seed=7)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        a = gen_corpus(tmp_path, "a.jsonl", seed=1)
        b = gen_corpus(tmp_path, "b.jsonl", seed=2)
        assert a.read_bytes() != b.read_bytes()

    def test_zero_classes_exit_2(self, tmp_path):
        rc = main(["gen-data", "--classes", "0", "--out", str(tmp_path / "c.jsonl")])
        assert rc == 2

    def test_spec_file_input(self, tmp_path):
        spec = {"num_classes": 2, "samples_per_class": 3, "video_len": 4,
                "caption_len_max": 8, "feature_dim": 6, "vocab_size": 16,
                "intra_class_noise": 0.0, "seed": 5}
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        out = tmp_path / "c.jsonl"
        assert main(["gen-data", "--spec", str(spec_path), "--out", str(out)]) == 0
        assert len(read_corpus(out)) == 6

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SUPPORTSET_SEED", "7")
        env_path = tmp_path / "env.jsonl"
        assert main(["gen-data", "--out", str(env_path)]) == 0
        monkeypatch.delenv("SUPPORTSET_SEED")
        flag_path = tmp_path / "flag.jsonl"
        assert main(["gen-data", "--seed", "7", "--out", str(flag_path)]) == 0
        assert env_path.read_bytes() == flag_path.read_bytes()


class TestTrainCommand:
    def test_train_writes_checkpoint_and_report(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        config = write_config(tmp_path, epochs=2)
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--config", str(config), "--corpus", str(corpus),
                     "--out", str(ckpt)]) == 0
        assert ckpt.exists()
        report = json.loads((tmp_path / "model.ckpt.report.json").read_text())
        assert len(report["epochs"]) == 2
        for epoch in report["epochs"]:
            assert np.isfinite(epoch["total"])

    def test_missing_corpus_exit_2(self, tmp_path):
        config = write_config(tmp_path)
        rc = main(["train", "--config", str(config),
                   "--corpus", str(tmp_path / "missing.jsonl"),
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 2

    def test_bad_config_exit_2(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"variant": "sideways"}))
        rc = main(["train", "--config", str(bad), "--corpus", str(corpus),
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 2

    def test_divergence_exit_3(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        config = write_config(tmp_path, epochs=3, learning_rate=1e8)
        rc = main(["train", "--config", str(config), "--corpus", str(corpus),
                   "--out", str(tmp_path / "m.ckpt")])
        assert rc == 3

    def test_seed_flag_overrides_config(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        config = write_config(tmp_path, epochs=1, seed=0)
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--config", str(config), "--corpus", str(corpus),
                     "--out", str(ckpt), "--seed", "3"]) == 0
        _, loaded_cfg, _ = load_checkpoint(ckpt)
        assert loaded_cfg.seed == 3


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One corpus + checkpoint shared by the read-only eval/export tests."""
    tmp_path = tmp_path_factory.mktemp("trained")
    corpus = gen_corpus(tmp_path)
    config = write_config(tmp_path, epochs=1, variant="cross")
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--config", str(config), "--corpus", str(corpus),
                 "--out", str(ckpt)]) == 0
    return tmp_path, corpus, ckpt


class TestEvalCommand:
    def test_emits_both_directions(self, trained, capsys):
        tmp_path, corpus, ckpt = trained
        out = tmp_path / "metrics.json"
        assert main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus),
                     "--ks", "1,5", "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "text->video" in stdout and "video->text" in stdout
        data = json.loads(out.read_text())
        for direction in ("text->video", "video->text"):
            assert set(data[direction]["recall_at"]) == {"1", "5"}
            assert data[direction]["median_rank"] >= 1.0

    def test_mismatched_corpus_exit_2(self, trained, tmp_path):
        _, _, ckpt = trained
        other = gen_corpus(tmp_path, "other.jsonl", feature_dim=8)
        assert main(["eval", "--ckpt", str(ckpt), "--corpus", str(other)]) == 2

    def test_garbage_checkpoint_exit_2(self, trained, tmp_path):
        _, corpus, _ = trained
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"not a checkpoint")
        assert main(["eval", "--ckpt", str(junk), "--corpus", str(corpus)]) == 2


class TestAblateCommand:
    def _grid(self, tmp_path, grid):
        path = tmp_path / "grid.json"
        path.write_text(json.dumps(grid))
        return path

    def test_variant_grid_emits_five_rows(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        base = tiny_config(epochs=1).to_dict()
        grid = self._grid(tmp_path, {
            "base": base,
            "axis": {"variant": ["none", "identity", "full", "hybrid", "cross"]}})
        out = tmp_path / "table.json"
        assert main(["ablate", "--grid", str(grid), "--corpus", str(corpus),
                     "--out", str(out)]) == 0
        rows = json.loads(out.read_text())["rows"]
        assert [r["name"] for r in rows] == [
            "variant=none", "variant=identity", "variant=full",
            "variant=hybrid", "variant=cross"]
        assert all(r["status"] == "ok" for r in rows)

    def test_parallel_matches_sequential(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        base = tiny_config(epochs=1).to_dict()
        grid = self._grid(tmp_path, {"base": base,
                                     "axis": {"variant": ["none", "cross"]}})
        seq, par = tmp_path / "seq.json", tmp_path / "par.json"
        assert main(["ablate", "--grid", str(grid), "--corpus", str(corpus),
                     "--out", str(seq)]) == 0
        assert main(["ablate", "--grid", str(grid), "--corpus", str(corpus),
                     "--out", str(par), "--parallel", "2"]) == 0
        assert seq.read_bytes() == par.read_bytes()

    def test_bad_grid_exit_2(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        grid = self._grid(tmp_path, {"rows": []})
        assert main(["ablate", "--grid", str(grid), "--corpus", str(corpus),
                     "--out", str(tmp_path / "t.json")]) == 2


class TestExportAttention:
    def test_rows_sum_to_one_in_emitted_file(self, trained):
        tmp_path, corpus, ckpt = trained
        out = tmp_path / "attn.json"
        assert main(["export-attention", "--ckpt", str(ckpt),
                     "--corpus", str(corpus), "--out", str(out)]) == 0
        data = json.loads(out.read_text())
        weights = np.array(data["weights"]).reshape(data["shape"])
        assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-6)
        assert np.allclose(np.diagonal(weights), 0.0)

    def test_none_variant_checkpoint_exit_2(self, tmp_path):
        corpus = gen_corpus(tmp_path)
        config = write_config(tmp_path, epochs=0, variant="none")
        ckpt = tmp_path / "none.ckpt"
        assert main(["train", "--config", str(config), "--corpus", str(corpus),
                     "--out", str(ckpt)]) == 0
        assert main(["export-attention", "--ckpt", str(ckpt),
                     "--corpus", str(corpus),
                     "--out", str(tmp_path / "attn.json")]) == 2

    def test_out_of_range_batch_index_exit_2(self, trained):
        tmp_path, corpus, ckpt = trained
        assert main(["export-attention", "--ckpt", str(ckpt),
                     "--corpus", str(corpus), "--batch-index", "99",
                     "--out", str(tmp_path / "attn2.json")]) == 2


class TestParser:
    def test_no_subcommand_exit_2(self):
        assert main([]) == 2

    def test_unknown_subcommand_exit_2(self):
        assert main(["frobnicate"]) == 2

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
