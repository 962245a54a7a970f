"""End-to-end tests of the `tfr` command line: config handling, artifact
round trips, determinism, and the exit-code contract."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from tfrank.cli import main, _run
from tfrank.data import (
    CandidateBundle,
    EvalReport,
    ScoreTable,
    load_bundle,
    load_ground_truth,
    save_bundle,
)
from tfrank.errors import NonFinite, TooFewSamples, ValidationError
from tfrank.fixtures import fixture_path

# one tiny zoo shared by the pipeline tests; budgets are minimal because
# only plumbing is under test here, not ranking quality
SMOKE_CONFIG = {
    "seed": 7,
    "sources": [
        {"name": "a", "epochs": 2, "lr": 0.05,
         "generator": {"n": 24, "class_count": 3, "noise_sigma": 1.0,
                       "frequency": 4.0, "seed": 1}},
        {"name": "b", "epochs": 2, "lr": 0.05,
         "generator": {"n": 24, "class_count": 3, "noise_sigma": 1.0,
                       "frequency": 7.0, "seed": 1}},
        {"name": "c", "epochs": 0,
         "generator": {"n": 24, "class_count": 3, "noise_sigma": 1.0,
                       "frequency": 9.0, "seed": 1}},
    ],
    "targets": [
        {"name": "T1", "generator": {"n": 30, "class_count": 3,
                                     "noise_sigma": 1.2, "frequency": 4.0,
                                     "seed": 11}},
        {"name": "T2", "generator": {"n": 30, "class_count": 3,
                                     "noise_sigma": 1.5, "frequency": 6.0,
                                     "seed": 12}},
    ],
    "split": {"train_frac": 0.4, "val_frac": 0.2},
    "hyper_grid": {"learning_rates": [0.05], "epochs": [2]},
    "triplet": {"seed": 3, "triplets_per_anchor": 2},
}


def invoke(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env,
                              catch_exceptions=False)


def all_text(res) -> str:
    """stdout plus stderr; error messages go to the latter."""
    try:
        return res.output + res.stderr
    except ValueError:
        return res.output


@pytest.fixture(scope="module")
def zoo_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("zoo")
    cfg = root / "synth.json"
    cfg.write_text(json.dumps(SMOKE_CONFIG), encoding="utf-8")
    res = invoke("synth", "--config", cfg, "--out-dir", root / "out")
    assert res.exit_code == 0, res.output
    return root / "out"


@pytest.fixture(scope="module")
def scores_dir(zoo_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("scores")
    for t in ("T1", "T2"):
        res = invoke("score", "--target", zoo_dir / f"target_{t}.tft",
                     "--bundles", zoo_dir / "bundles" / t,
                     "--out-dir", root / t, "--seed", 0)
        assert res.exit_code == 0, res.output
    return root


class TestScore:
    def test_writes_one_table_per_metric(self, scores_dir):
        names = sorted(p.name for p in (scores_dir / "T1").iterdir())
        assert names == [
            "score_leep.json", "score_logme.json", "score_nleep.json",
            "score_ours-sum.json", "score_ours.json", "score_parc.json"]

    def test_tables_parse_and_carry_argmax(self, scores_dir):
        for path in (scores_dir / "T1").glob("score_*.json"):
            raw = json.loads(path.read_text(encoding="utf-8"))
            table = ScoreTable.from_json_dict(raw)
            assert raw["argmax"] == table.argmax_model()
            assert set(table.scores) == {"a", "b", "c"}

    def test_prints_best_candidate_per_metric(self, zoo_dir, tmp_path):
        res = invoke("score", "--target", zoo_dir / "target_T1.tft",
                     "--bundles", zoo_dir / "bundles" / "T1",
                     "--out-dir", tmp_path, "--metrics", "ours,parc")
        assert res.exit_code == 0
        lines = res.output.strip().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("ours: best candidate ")
        assert lines[1].startswith("parc: best candidate ")

    def test_byte_identical_across_runs(self, zoo_dir, tmp_path):
        digests = []
        for tag in ("r1", "r2"):
            out = tmp_path / tag
            res = invoke("score", "--target", zoo_dir / "target_T1.tft",
                         "--bundles", zoo_dir / "bundles" / "T1",
                         "--out-dir", out, "--seed", 3)
            assert res.exit_code == 0
            digests.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                            for p in out.iterdir()})
        assert digests[0] == digests[1]

    def test_unknown_metric_exits_2(self, zoo_dir, tmp_path):
        res = invoke("score", "--target", zoo_dir / "target_T1.tft",
                     "--bundles", zoo_dir / "bundles" / "T1",
                     "--out-dir", tmp_path, "--metrics", "ours,bogus")
        assert res.exit_code == 2
        assert "bogus" in all_text(res)

    def test_missing_bundle_dir_exits_2(self, zoo_dir, tmp_path):
        res = invoke("score", "--target", zoo_dir / "target_T1.tft",
                     "--bundles", tmp_path / "nowhere",
                     "--out-dir", tmp_path / "o")
        assert res.exit_code == 2

    def test_leep_without_source_probs_exits_3_naming_bundle(
            self, zoo_dir, tmp_path):
        src = load_bundle(zoo_dir / "bundles" / "T1" / "a.tfb")
        pool = tmp_path / "pool"
        pool.mkdir()
        stripped = CandidateBundle(
            model_id="noprobs", source_dataset=src.source_dataset,
            architecture=src.architecture, embeddings=src.embeddings)
        save_bundle(stripped, pool / "noprobs.tfb")
        save_bundle(src, pool / "a.tfb")
        res = invoke("score", "--target", zoo_dir / "target_T1.tft",
                     "--bundles", pool, "--out-dir", tmp_path / "o",
                     "--metrics", "leep")
        assert res.exit_code == 3
        assert "noprobs" in all_text(res)

    def test_config_file_drives_run(self, zoo_dir, tmp_path):
        cfg = tmp_path / "score.json"
        cfg.write_text(json.dumps({
            "target": str(zoo_dir / "target_T1.tft"),
            "bundles": str(zoo_dir / "bundles" / "T1"),
            "out_dir": str(tmp_path / "out"),
            "metrics": ["parc"],
        }), encoding="utf-8")
        res = invoke("score", "--config", cfg)
        assert res.exit_code == 0
        assert (tmp_path / "out" / "score_parc.json").exists()

    def test_flag_overrides_config_value(self, zoo_dir, tmp_path):
        cfg = tmp_path / "score.json"
        cfg.write_text(json.dumps({
            "target": str(zoo_dir / "target_T1.tft"),
            "bundles": str(zoo_dir / "bundles" / "T1"),
            "out_dir": str(tmp_path / "from_config"),
            "metrics": ["parc"],
        }), encoding="utf-8")
        res = invoke("score", "--config", cfg,
                     "--out-dir", tmp_path / "from_flag")
        assert res.exit_code == 0
        assert (tmp_path / "from_flag" / "score_parc.json").exists()
        assert not (tmp_path / "from_config").exists()

    def test_unknown_config_key_exits_2(self, zoo_dir, tmp_path):
        cfg = tmp_path / "score.json"
        cfg.write_text(json.dumps({
            "target": str(zoo_dir / "target_T1.tft"),
            "bundles": str(zoo_dir / "bundles" / "T1"),
            "out_dir": str(tmp_path / "o"),
            "typo_key": 1,
        }), encoding="utf-8")
        res = invoke("score", "--config", cfg)
        assert res.exit_code == 2
        assert "typo_key" in all_text(res)

    def test_malformed_config_exits_2(self, tmp_path):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json", encoding="utf-8")
        res = invoke("score", "--config", cfg)
        assert res.exit_code == 2


class TestSynth:
    def test_default_config_layout(self, tmp_path):
        res = invoke("synth", "--out-dir", tmp_path, "--seed", 1)
        assert res.exit_code == 0
        manifest = json.loads(
            (tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["seed"] == 1
        assert len(manifest["config"]["sources"]) == 5
        bundles = list(tmp_path.glob("bundles/*/*.tfb"))
        assert len(bundles) == 5
        assert len(list(tmp_path.glob("target_*.tft"))) == 1
        truth = load_ground_truth(tmp_path / "ground_truth.csv")
        assert len(truth.rows) == 5 and len(truth.columns) == 1

    def test_same_seed_byte_identical(self, tmp_path):
        hashes = []
        for tag in ("r1", "r2"):
            out = tmp_path / tag
            res = invoke("synth", "--out-dir", out, "--seed", 9)
            assert res.exit_code == 0
            manifest = json.loads(
                (out / "manifest.json").read_text(encoding="utf-8"))
            for rel, digest in manifest["artifacts"].items():
                got = hashlib.sha256((out / rel).read_bytes()).hexdigest()
                assert got == digest, rel
            hashes.append(manifest["artifacts"])
        assert hashes[0] == hashes[1]

    def test_different_seed_changes_artifacts(self, tmp_path):
        manifests = []
        for seed in (1, 2):
            out = tmp_path / f"s{seed}"
            assert invoke("synth", "--out-dir", out,
                          "--seed", seed).exit_code == 0
            manifests.append(json.loads(
                (out / "manifest.json").read_text(encoding="utf-8")))
        assert manifests[0]["artifacts"] != manifests[1]["artifacts"]

    def test_two_sources_exit_2(self, tmp_path):
        cfg = tmp_path / "two.json"
        small = dict(SMOKE_CONFIG, sources=SMOKE_CONFIG["sources"][:2])
        cfg.write_text(json.dumps(small), encoding="utf-8")
        res = invoke("synth", "--config", cfg, "--out-dir", tmp_path / "o")
        assert res.exit_code == 2

    def test_tfr_seed_env_fallback(self, tmp_path):
        cfg = tmp_path / "fast.json"
        cfg.write_text(json.dumps(SMOKE_CONFIG), encoding="utf-8")
        res = invoke("synth", "--config", cfg, "--out-dir", tmp_path / "o",
                     env={"TFR_SEED": "42"})
        assert res.exit_code == 0, res.output
        manifest = json.loads(
            (tmp_path / "o" / "manifest.json").read_text(encoding="utf-8"))
        # config carries seed=7; the env fallback must not override it
        assert manifest["seed"] == 7
        res = invoke("synth", "--config", cfg, "--out-dir", tmp_path / "o2",
                     "--seed", 5, env={"TFR_SEED": "42"})
        assert res.exit_code == 0
        manifest = json.loads(
            (tmp_path / "o2" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["seed"] == 5

    def test_env_seed_used_when_config_silent(self, tmp_path):
        cfg = tmp_path / "fast.json"
        body = dict(SMOKE_CONFIG)
        del body["seed"]
        cfg.write_text(json.dumps(body), encoding="utf-8")
        res = invoke("synth", "--config", cfg, "--out-dir", tmp_path / "o",
                     env={"TFR_SEED": "42"})
        assert res.exit_code == 0, res.output
        manifest = json.loads(
            (tmp_path / "o" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["seed"] == 42

    def test_non_integer_env_seed_exits_2(self, tmp_path):
        cfg = tmp_path / "fast.json"
        body = dict(SMOKE_CONFIG)
        del body["seed"]
        cfg.write_text(json.dumps(body), encoding="utf-8")
        res = invoke("synth", "--config", cfg, "--out-dir", tmp_path / "o",
                     env={"TFR_SEED": "abc"})
        assert res.exit_code == 2


class TestEval:
    def test_round_trip_from_scores(self, zoo_dir, scores_dir, tmp_path):
        out = tmp_path / "eval.json"
        res = invoke("eval", "--scores-dir", scores_dir,
                     "--ground-truth", zoo_dir / "ground_truth.csv",
                     "--out", out, "--csv-out", tmp_path / "eval.csv")
        assert res.exit_code == 0, res.output
        report = EvalReport.from_json_dict(
            json.loads(out.read_text(encoding="utf-8")))
        assert set(report.targets) == {"T1", "T2"}
        assert set(report.metrics) == {
            "ours", "ours-sum", "leep", "nleep", "logme", "parc"}
        header = (tmp_path / "eval.csv").read_text().splitlines()[0]
        assert header.startswith("target,")

    def test_published_fixture_reproduces_rank_row(self, tmp_path):
        out = tmp_path / "eval.json"
        res = invoke("eval", "--tau-table",
                     fixture_path("tau_source_datasets.csv"), "--out", out)
        assert res.exit_code == 0, res.output
        report = EvalReport.from_json_dict(
            json.loads(out.read_text(encoding="utf-8")))
        expected = {"LogME": 4.00, "PARC": 4.00, "SFDA": 5.82, "NCTI": 4.91,
                    "LEEP": 3.91, "NLEEP": 3.45, "Ours": 1.91}
        for m, want in expected.items():
            assert abs(report.avg_ranks[m] - want) < 0.005, m
        assert 0.001 <= report.friedman_p <= 0.005

    def test_self_evaluation_gives_tau_one(self, zoo_dir, tmp_path):
        truth = load_ground_truth(zoo_dir / "ground_truth.csv")
        sdir = tmp_path / "scores"
        # three monotone transforms of the truth itself; every tau must be 1
        transforms = {"oracle": lambda v: v, "oracle10": lambda v: 10 * v,
                      "oracle_exp": lambda v: np.exp(v / 50.0)}
        for t in truth.columns:
            (sdir / t).mkdir(parents=True)
            col = truth.column(t)
            for name, f in transforms.items():
                table = ScoreTable(metric_name=name,
                                   scores={k: f(v) for k, v in col.items()})
                (sdir / t / f"score_{name}.json").write_text(
                    json.dumps(table.to_json_dict()), encoding="utf-8")
        out = tmp_path / "eval.json"
        res = invoke("eval", "--scores-dir", sdir,
                     "--ground-truth", zoo_dir / "ground_truth.csv",
                     "--out", out)
        assert res.exit_code == 0, res.output
        report = EvalReport.from_json_dict(
            json.loads(out.read_text(encoding="utf-8")))
        for t in report.targets:
            for name in transforms:
                assert report.per_target_tau[(t, name)] == pytest.approx(1.0)

    def test_metric_missing_on_one_target_gets_lowest_rank(self, tmp_path):
        csv = tmp_path / "tau.csv"
        csv.write_text(
            "target,m1,m2,m3\nT1,0.9,0.5,0.1\nT2,,0.4,0.2\nT3,0.8,0.3,0.6\n",
            encoding="utf-8")
        out = tmp_path / "eval.json"
        res = invoke("eval", "--tau-table", csv, "--out", out)
        assert res.exit_code == 0, res.output
        report = EvalReport.from_json_dict(
            json.loads(out.read_text(encoding="utf-8")))
        assert report.per_target_tau[("T2", "m1")] is None
        assert report.ordinal_ranks[("T2", "m1")] == 3

    def test_single_target_exits_3(self, tmp_path):
        csv = tmp_path / "tau.csv"
        csv.write_text("target,m1,m2\nT1,0.9,0.5\n", encoding="utf-8")
        res = invoke("eval", "--tau-table", csv, "--out", tmp_path / "o.json")
        assert res.exit_code == 3

    def test_needs_out(self, tmp_path):
        csv = tmp_path / "tau.csv"
        csv.write_text("target,m1,m2\nT1,0.9,0.5\nT2,0.1,0.4\n",
                       encoding="utf-8")
        res = invoke("eval", "--tau-table", csv)
        assert res.exit_code == 2

    def test_needs_some_input(self, tmp_path):
        res = invoke("eval", "--out", tmp_path / "o.json")
        assert res.exit_code == 2


class TestReport:
    def test_best_source_queries_from_shipped_tables(self):
        res = invoke("report", "--ground-truth",
                     fixture_path("source_dataset_auc.csv"),
                     "--best-source-for", "OCT")
        assert res.exit_code == 0, res.output
        assert "best source for OCT: RadImageNet (96.93)" in res.output
        res = invoke("report", "--ground-truth",
                     fixture_path("architecture_auc.csv"),
                     "--best-source-for", "Derma")
        assert res.exit_code == 0
        assert "best source for Derma: ConvNeXt (92.93)" in res.output

    def test_imagenet_to_blood_value(self):
        truth = load_ground_truth(fixture_path("source_dataset_auc.csv"))
        assert truth.get("ImageNet", "Blood") == pytest.approx(99.85)
        res = invoke("report", "--ground-truth",
                     fixture_path("source_dataset_auc.csv"),
                     "--best-source-for", "Blood")
        assert "best source for Blood: ImageNet (99.85)" in res.output

    def test_head_to_head_comparison_excludes_self_targets(self):
        res = invoke("report", "--ground-truth",
                     fixture_path("source_dataset_auc.csv"),
                     "--compare", "Breast,OrganS")
        assert res.exit_code == 0, res.output
        assert "Breast beats OrganS on 7 of 9 targets" in res.output

    def test_eval_report_rendering(self, zoo_dir, scores_dir, tmp_path):
        ev = tmp_path / "eval.json"
        assert invoke("eval", "--scores-dir", scores_dir, "--ground-truth",
                      zoo_dir / "ground_truth.csv",
                      "--out", ev).exit_code == 0
        out = tmp_path / "report.txt"
        res = invoke("report", "--eval-report", ev, "--out", out)
        assert res.exit_code == 0, res.output
        text = out.read_text(encoding="utf-8")
        assert res.output == text
        assert "avg rank" in text
        assert "Friedman chi2" in text
        assert "critical difference" in text

    def test_unknown_target_exits_2(self):
        res = invoke("report", "--ground-truth",
                     fixture_path("source_dataset_auc.csv"),
                     "--best-source-for", "NoSuchTarget")
        assert res.exit_code == 2

    def test_unknown_source_in_compare_exits_2(self):
        res = invoke("report", "--ground-truth",
                     fixture_path("source_dataset_auc.csv"),
                     "--compare", "Breast,NoSuchSource")
        assert res.exit_code == 2

    def test_needs_an_input(self):
        res = invoke("report")
        assert res.exit_code == 2

    def test_deterministic_output(self, zoo_dir):
        outs = {invoke("report", "--ground-truth",
                       zoo_dir / "ground_truth.csv").output
                for _ in range(2)}
        assert len(outs) == 1


class TestValidate:
    def test_accepts_every_artifact_kind(self, zoo_dir, scores_dir, tmp_path):
        ev = tmp_path / "eval.json"
        assert invoke("eval", "--scores-dir", scores_dir, "--ground-truth",
                      zoo_dir / "ground_truth.csv",
                      "--out", ev).exit_code == 0
        res = invoke("validate",
                     zoo_dir / "target_T1.tft",
                     zoo_dir / "bundles" / "T1" / "a.tfb",
                     zoo_dir / "ground_truth.csv",
                     scores_dir / "T1" / "score_ours.json",
                     ev)
        assert res.exit_code == 0, res.output
        assert res.output.count(": OK") == 5

    def test_corrupt_bundle_exits_2(self, zoo_dir, tmp_path):
        blob = bytearray((zoo_dir / "bundles" / "T1" / "a.tfb").read_bytes())
        blob[0] ^= 0xFF
        bad = tmp_path / "bad.tfb"
        bad.write_bytes(bytes(blob))
        res = invoke("validate", bad)
        assert res.exit_code == 2
        assert "INVALID" in res.output

    def test_missing_file_exits_2(self, tmp_path):
        res = invoke("validate", tmp_path / "ghost.tfb")
        assert res.exit_code == 2
        assert "missing" in res.output

    def test_mixed_good_and_bad(self, zoo_dir, tmp_path):
        res = invoke("validate", zoo_dir / "ground_truth.csv",
                     tmp_path / "ghost.tfb")
        assert res.exit_code == 2
        assert ": OK" in res.output


class TestExitCodeMapping:
    def test_validation_error_maps_to_2(self):
        with pytest.raises(SystemExit) as exc:
            _run(lambda: (_ for _ in ()).throw(ValidationError("x")))
        assert exc.value.code == 2

    def test_precondition_error_maps_to_3(self):
        with pytest.raises(SystemExit) as exc:
            _run(lambda: (_ for _ in ()).throw(TooFewSamples("x")))
        assert exc.value.code == 3

    def test_numeric_error_maps_to_4(self):
        with pytest.raises(SystemExit) as exc:
            _run(lambda: (_ for _ in ()).throw(NonFinite("x")))
        assert exc.value.code == 4

    def test_success_passes_through(self):
        assert _run(lambda: None) is None
