import json

import numpy as np
import pytest

from ganevade import cli, gan, harness, petk
from ganevade.harness import (ConfigError, CorpusConfig, ExperimentConfig,
                              FeatureConfig, GanStageConfig, PipelineState,
                              StageError, gen_corpus, ingest_dirs, load_corpus,
                              pipeline_preset, render_report,
                              report_without_runtime, run_pipeline,
                              split_indices)


def tiny_config(seed=7, attacks=("gan_byte", "benign_injection", "malgan_byte")):
    return ExperimentConfig(
        corpus=CorpusConfig(n_per_class=10, content_size=(400, 800)),
        feature_cfg=FeatureConfig(k_api=40, k_strings=40, hash_dim=64),
        gans={"byte_histogram": GanStageConfig(max_steps=20),
              "api": GanStageConfig(max_steps=10),
              "strings": GanStageConfig(max_steps=10)},
        attacks=list(attacks),
        gap_sweep=(0.01, 0.001),
        sweep_subsample=3,
        malgan_max_queries=300,
        seed=seed)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    report = run_pipeline(cfg, workdir)
    return cfg, workdir, report


class TestConfig:
    def test_roundtrip_preserves_hash(self):
        cfg = tiny_config()
        cfg2 = ExperimentConfig.from_dict(cfg.to_dict())
        assert cfg2.config_hash() == cfg.config_hash()

    def test_unknown_attack_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(attacks=["frobnicate"])

    def test_split_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(split=(0.5, 0.2, 0.2))

    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(detectors=[harness.DetectorSpec(
                "x", "logreg", ("registry",))])

    def test_schema_version_checked(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"schema_version": 99})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"no_such_field": 1})

    def test_load_config_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError):
            harness.load_config(p)


class TestCorpus:
    def test_gen_corpus_counts_and_labels(self, tmp_path):
        cfg = CorpusConfig(n_per_class=3, content_size=(200, 400))
        manifest = gen_corpus(cfg, 0, tmp_path / "c")
        labels = [r["label"] for r in manifest["files"]]
        assert labels.count("benign") == 3
        assert labels.count("malicious") == 3
        _, blobs = load_corpus(tmp_path / "c")
        for data in blobs.values():
            petk.parse(data, strict=True)

    def test_same_seed_identical_bytes(self, tmp_path):
        cfg = CorpusConfig(n_per_class=2, content_size=(200, 300))
        gen_corpus(cfg, 5, tmp_path / "a")
        gen_corpus(cfg, 5, tmp_path / "b")
        _, ba = load_corpus(tmp_path / "a")
        _, bb = load_corpus(tmp_path / "b")
        assert ba == bb

    def test_class_profiles_separate_histograms(self, tmp_path):
        cfg = CorpusConfig(n_per_class=5, content_size=(2000, 3000))
        gen_corpus(cfg, 1, tmp_path / "c")
        _, blobs = load_corpus(tmp_path / "c")
        from ganevade.features import byte_histogram
        high = {name: byte_histogram(b).freq[0x80:].sum()
                for name, b in blobs.items()}
        ben = np.mean([v for k, v in high.items() if k.startswith("benign")])
        mal = np.mean([v for k, v in high.items() if k.startswith("malicious")])
        assert mal > ben + 0.2

    def test_ingest_dirs(self, tmp_path):
        bdir, mdir = tmp_path / "b", tmp_path / "m"
        bdir.mkdir()
        mdir.mkdir()
        data = petk.synth_pe(petk.SynthSpec(
            sections=[petk.SectionSpec(".t", size=100)]))
        (bdir / "one.exe").write_bytes(data)
        (mdir / "two.exe").write_bytes(data)
        manifest = ingest_dirs(bdir, mdir, tmp_path / "out")
        labels = sorted(r["label"] for r in manifest["files"])
        assert labels == ["benign", "malicious"]


class TestSplits:
    def test_stratified_fractions(self):
        labels = ["benign"] * 100 + ["malicious"] * 100
        s = split_indices(labels, (0.8, 0.1, 0.1), seed=0)
        assert len(s["train"]) == 160
        assert len(s["val"]) == 20
        assert len(s["test"]) == 20
        all_idx = sorted(s["train"] + s["val"] + s["test"])
        assert all_idx == list(range(200))
        # stratification: 80 of each class in train
        assert sum(1 for i in s["train"] if labels[i] == "benign") == 80

    def test_seed_changes_assignment(self):
        labels = ["benign"] * 50 + ["malicious"] * 50
        a = split_indices(labels, (0.8, 0.1, 0.1), seed=0)
        b = split_indices(labels, (0.8, 0.1, 0.1), seed=1)
        assert a != b
        assert a == split_indices(labels, (0.8, 0.1, 0.1), seed=0)


class TestPresetScaling:
    def test_canonical_when_dims_match(self):
        p = pipeline_preset("byte_histogram", 256, GanStageConfig())
        assert p == gan.byte_preset()

    def test_scaled_variant_otherwise(self):
        p = pipeline_preset("api", 150, GanStageConfig())
        assert p.input_dim == 150
        assert p.noise_dim == gan.api_preset().noise_dim
        assert p.output_activation == "sigmoid"

    def test_explicit_hidden_override(self):
        stage = GanStageConfig(generator_hidden=[32, 32], critic_hidden=[16])
        p = pipeline_preset("strings", 80, stage)
        assert p.generator_hidden == (32, 32)
        assert p.critic_hidden == (16,)


class TestPipeline:
    def test_report_structure(self, tiny_run):
        cfg, workdir, report = tiny_run
        assert report["config_hash"] == cfg.config_hash()
        assert set(report["original_rates"]) == {d.name for d in cfg.detectors}
        assert set(report["attack_rates"]) == set(cfg.attacks)
        assert (workdir / "report.json").exists()
        assert (workdir / "corpus" / "manifest.json").exists()
        assert (workdir / "features" / "vocab_api.txt").exists()
        assert (workdir / "models" / "gan_byte_histogram.gevd").exists()
        assert (workdir / "attacks" / "gan_byte" / "manifest.json").exists()

    def test_query_ledger(self, tiny_run):
        _, _, report = tiny_run
        assert report["query_counts"]["gan_byte"] == 0
        assert report["query_counts"]["benign_injection"] == 0
        assert report["query_counts"]["malgan_byte"] > 0

    def test_gap_sweep_rows(self, tiny_run):
        cfg, _, report = tiny_run
        rows = report["gap_sweep"]
        assert len(rows) == len(cfg.gap_sweep) + 1
        assert rows[0]["gap"] == "exact"
        assert [r["gap"] for r in rows[1:]] == list(cfg.gap_sweep)

    def test_attack_files_strict_parseable(self, tiny_run):
        _, workdir, _ = tiny_run
        files = sorted((workdir / "attacks" / "gan_byte").glob("*.exe"))
        assert files
        for f in files:
            petk.parse(f.read_bytes(), strict=True)

    def test_rewritten_files_only_malicious(self, tiny_run):
        _, workdir, _ = tiny_run
        for f in (workdir / "attacks" / "gan_byte").glob("*.exe"):
            assert f.name.startswith("malicious_")

    def test_empty_attack_roster(self, tmp_path):
        cfg = tiny_config(attacks=())
        report = run_pipeline(cfg, tmp_path / "w")
        assert report["attack_rates"] == {}
        assert report["gap_sweep"] == []
        assert set(report["original_rates"]) == {d.name for d in cfg.detectors}

    def test_render_formats(self, tiny_run):
        _, _, report = tiny_run
        as_json = render_report(report, "json")
        assert json.loads(as_json) == json.loads(
            json.dumps(report, sort_keys=True))
        csv_text = render_report(report, "csv")
        assert csv_text.startswith("detector,attack,detection_rate")
        md = render_report(report, "markdown")
        assert md.startswith("| Detector |")
        with pytest.raises(ConfigError):
            render_report(report, "yaml")

    def test_runtime_excluded_helper(self, tiny_run):
        _, _, report = tiny_run
        stripped = report_without_runtime(report)
        assert "runtime_seconds" not in stripped
        assert stripped["config_hash"] == report["config_hash"]

    def test_stage_error_names_stage(self, tmp_path):
        state = PipelineState(cfg=tiny_config(), workdir=tmp_path)
        with pytest.raises(StageError) as exc:
            harness.stage_extract(state)   # corpus never loaded
        assert exc.value.stage == "extract"

    def test_dirs_kind_requires_paths(self, tmp_path):
        cfg = tiny_config()
        cfg.corpus.kind = "dirs"
        state = PipelineState(cfg=cfg, workdir=tmp_path)
        with pytest.raises(ConfigError):
            harness.stage_corpus(state)


class TestCapacityCap:
    def test_cap_zero_warns_and_truncates(self, tmp_path):
        cfg = tiny_config(attacks=("gan_api",))
        state = PipelineState(cfg=cfg, workdir=tmp_path)
        harness.stage_corpus(state)
        harness.stage_extract(state)
        preset = pipeline_preset("api", state.table.vocab_api.size,
                                 GanStageConfig())
        model = gan.build_gan(preset, seed=0)
        test_mal = [f for f in state.file_features if f.label == "malicious"]
        out = harness.attack_gan_indicator(model, test_mal, state.blobs,
                                           state.table, "api", 0, seed=0)
        assert out.warnings
        from ganevade.features import extract_imports
        for feats in test_mal:
            before = extract_imports(petk.parse(state.blobs[feats.name]))
            after = extract_imports(petk.parse(out.rewritten[feats.name]))
            assert after == before


class TestCli:
    def test_bad_config_exit_2(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"attacks": ["nope"]}))
        rc = cli.main(["pipeline", "--config", str(p),
                       "--workdir", str(tmp_path / "w")])
        assert rc == 2

    def test_report_before_run_exit_3(self, tmp_path):
        rc = cli.main(["report", "--workdir", str(tmp_path / "empty")])
        assert rc == 3

    def test_gen_corpus_exit_0(self, tmp_path, capsys):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"corpus": {"n_per_class": 2,
                                            "content_size": [200, 300]}}))
        rc = cli.main(["gen-corpus", "--config", str(p),
                       "--workdir", str(tmp_path / "w")])
        assert rc == 0
        assert (tmp_path / "w" / "corpus" / "manifest.json").exists()
        assert "4 files" in capsys.readouterr().out

    def test_seed_override_changes_hash(self, tmp_path):
        cfg = tiny_config()
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(cfg.to_dict()))

        class Args:
            config = str(p)
            seed = 1234

        loaded = cli._load_cfg(Args)
        assert loaded.seed == 1234
