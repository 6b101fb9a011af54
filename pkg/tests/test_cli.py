"""End-to-end command-line behavior."""

import pytest

from retrohop.cli import RunConfig, dispatch, load_config

SMALL = [
    "--set", "fingerprint_size=128",
    "--set", "fingerprint_radius=1",
    "--set", "encoder_layers=0",
    "--set", "template_encoder_layers=0",
    "--set", "association_dim=16",
    "--set", "beta=0.2",
    "--set", "epochs=2",
    "--set", "batch_size=16",
    "--set", "dropout=0",
    "--set", "normalize_state=false",
    "--set", "normalize_memory=false",
    "--set", "lr=0.01",
]


@pytest.fixture
def corpus(tmp_path):
    reactions = tmp_path / "reactions.tsv"
    templates = tmp_path / "templates.tsv"
    rc = dispatch(
        ["--seed", "5", "synth",
         "--reactions-out", str(reactions), "--templates-out", str(templates),
         "--n-templates", "20", "--n-reactions", "80"]
    )
    assert rc == 0
    return reactions, templates


class TestConfig:
    def test_defaults_match_documented_values(self):
        cfg = RunConfig()
        assert cfg.beta == 0.03
        assert cfg.association_dim == 1024
        assert cfg.batch_size == 1024
        assert cfg.lr == 5e-4
        assert cfg.dropout == 0.2
        assert cfg.fingerprint_size == 4096
        assert cfg.fingerprint_radius == 2
        assert cfg.weight_decay == 1e-2

    def test_file_and_overrides(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("beta = 0.5\nepochs = 3  # comment\n")
        cfg = load_config(str(f), ["epochs=7", "normalize_state=false"])
        assert cfg.beta == 0.5
        assert cfg.epochs == 7  # flag wins over file
        assert cfg.normalize_state is False

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("learning_rate = 0.1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(str(f), [])

    def test_bad_value_rejected(self):
        with pytest.raises(ValueError, match="not a"):
            load_config(None, ["epochs=soon"])


class TestExitCodes:
    def test_usage_error_is_2(self):
        assert dispatch(["train"]) == 2  # missing required flags
        assert dispatch(["no-such-command"]) == 2

    def test_domain_error_is_1(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.tsv")
        rc = dispatch(["split", "--reactions", missing, "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_config_key_is_1(self, corpus, tmp_path):
        reactions, _ = corpus
        rc = dispatch(
            ["--set", "bogus=1", "split", "--reactions", str(reactions),
             "--out", str(tmp_path / "o")]
        )
        assert rc == 1


class TestSplitCommand:
    def test_deterministic_under_seed(self, corpus, tmp_path, capsys):
        reactions, _ = corpus
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        assert dispatch(["--seed", "7", "split", "--reactions", str(reactions), "--out", str(a)]) == 0
        assert dispatch(["--seed", "7", "split", "--reactions", str(reactions), "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        capsys.readouterr()


class TestIngest:
    def test_rejects_reported(self, tmp_path, capsys):
        src = tmp_path / "raw.tsv"
        src.write_text("r1\tCCO>>CC=O\t0\nnot a reaction\nr2\tC.C>>CC\t1\n")
        out = tmp_path / "clean.tsv"
        rej = tmp_path / "rejects.txt"
        rc = dispatch(["ingest", "--reactions", str(src), "--out", str(out),
                       "--rejects", str(rej)])
        assert rc == 0
        assert "2 kept, 1 rejected" in capsys.readouterr().out
        assert "line 2" in rej.read_text()


class TestApplicability:
    def test_export_format(self, corpus, tmp_path, capsys):
        reactions, templates = corpus
        out = tmp_path / "app.tsv"
        rc = dispatch(["applicability", "--reactions", str(reactions),
                       "--templates", str(templates), "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        n_reactions = len(reactions.read_text().strip().split("\n"))
        assert len(lines) == n_reactions
        assert lines[0].split("\t")[0] == "0"
        assert "pairs_screened" in capsys.readouterr().out


class TestPipeline:
    def _train(self, corpus, tmp_path, arch="mhn", seed="5"):
        reactions, templates = corpus
        model = tmp_path / f"{arch}.ckpt"
        rc = dispatch(
            ["--seed", seed, *SMALL, "train",
             "--reactions", str(reactions), "--templates", str(templates),
             "--arch", arch, "--model-out", str(model)]
        )
        assert rc == 0
        return model

    def test_train_evaluate_rank_bench_export(self, corpus, tmp_path, capsys):
        reactions, templates = corpus
        model = self._train(corpus, tmp_path)
        capsys.readouterr()

        out = tmp_path / "metrics.csv"
        rc = dispatch(
            ["--seed", "5", *SMALL, "evaluate", "--model", str(model),
             "--reactions", str(reactions), "--templates", str(templates),
             "--k", "1,10", "--out", str(out)]
        )
        assert rc == 0
        text = out.read_text()
        assert "method,k,accuracy,ci_low,ci_high,bucket" in text
        assert "# beta = 0.2" in text  # config snapshot embedded
        assert "pop-fpf" in text

        rc = dispatch(["rank", "--model", str(model), "--product", "CC=O", "--top", "3"])
        assert rc == 0
        ranked = capsys.readouterr().out.strip().split("\n")
        assert len(ranked) == 3 and "\t" in ranked[0]

        bench_out = tmp_path / "bench.csv"
        rc = dispatch(
            ["bench", "--model", str(model), "--reactions", str(reactions),
             "--templates", str(templates), "--budgets", "1,5",
             "--out", str(bench_out)]
        )
        assert rc == 0
        assert "budget,k,accuracy,mols_per_sec" in bench_out.read_text()

        emb_out = tmp_path / "emb.tsv"
        rc = dispatch(["export-embeddings", "--model", str(model), "--out", str(emb_out)])
        assert rc == 0
        assert emb_out.read_text().startswith("template_id\te0")

    def test_dnn_arch_trains(self, corpus, tmp_path, capsys):
        model = self._train(corpus, tmp_path, arch="dnn")
        assert model.exists()
        capsys.readouterr()

    def test_repeated_pipeline_is_byte_identical(self, corpus, tmp_path, capsys):
        reactions, templates = corpus
        outputs = []
        for tag in ("one", "two"):
            model = tmp_path / f"m_{tag}.ckpt"
            rc = dispatch(
                ["--seed", "9", "--workers", "1", *SMALL, "train",
                 "--reactions", str(reactions), "--templates", str(templates),
                 "--model-out", str(model)]
            )
            assert rc == 0
            out = tmp_path / f"metrics_{tag}.csv"
            rc = dispatch(
                ["--seed", "9", "--workers", "1", *SMALL, "evaluate",
                 "--model", str(model), "--reactions", str(reactions),
                 "--templates", str(templates), "--k", "1,10", "--out", str(out)]
            )
            assert rc == 0
            outputs.append(out.read_bytes())
        capsys.readouterr()
        assert outputs[0] == outputs[1]
