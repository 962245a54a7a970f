"""Extractor tests: container conformance against the scoring package,
triplet-rule parity, autodiff-vs-analytic gradient checks, layer maps,
and the CLI."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
from click.testing import CliRunner
from PIL import Image

import tfextract as tx
from tfextract.cli import main as cli_main

import tfrank
from tfrank.score import TripletConfig as ScoreTripletConfig
from tfrank.score import (
    s_fu,
    sample_triplets as score_sample_triplets,
    triplet_loss_and_embedding_grads,
)

GOLDEN = json.loads(
    (Path(__file__).parent / "golden" / "shufflenet_norms.json").read_text())


def write_image_folder(root, rng_seed, n_per_class=5, classes=("class_a", "class_b"),
                       side=64):
    rng = np.random.default_rng(rng_seed)
    for c, cname in enumerate(classes):
        d = Path(root) / cname
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            arr = rng.integers(0, 255, size=(side, side, 3), dtype=np.uint8)
            arr[:, :, c % 3] = np.clip(arr[:, :, c % 3].astype(int) + 90,
                                       0, 255)
            Image.fromarray(arr).save(d / f"img_{i}.png")
    return Path(root)


@pytest.fixture(scope="module")
def golden_folder(tmp_path_factory):
    root = tmp_path_factory.mktemp("imgs")
    return write_image_folder(root, GOLDEN["image_rng_seed"])


@pytest.fixture(scope="module")
def small_model():
    return tx.build_model(GOLDEN["architecture"],
                          init_seed=GOLDEN["init_seed"])


@pytest.fixture(scope="module")
def extracted(tmp_path_factory, golden_folder, small_model):
    out = tmp_path_factory.mktemp("bundles") / "small.tfb"
    ds = tx.load_image_folder(golden_folder)
    report = tx.extract_bundle(
        small_model, ds, tx.TripletConfig(seed=GOLDEN["triplet_seed"]), out,
        architecture=GOLDEN["architecture"], model_id="small",
        source_dataset="synthetic")
    return out, ds, report


class TestConformance:
    def test_bundle_loads_through_primary_loader(self, extracted):
        out, ds, _ = extracted
        bundle = tfrank.load_bundle(out)
        assert bundle.model_id == "small"
        assert bundle.embeddings.shape == (10, 1024)
        assert bundle.source_probs.shape == (10, 1000)
        assert bundle.has_grad_norms

    def test_verify_bundle_passes(self, extracted):
        out, _, report = extracted
        again = tx.verify_bundle(out)
        assert again == report
        assert again.n == 10 and again.Z == 1000
        assert "OK" in again.summary()

    def test_triplet_indices_match_primary(self, extracted):
        _, ds, _ = extracted
        for seed in (0, GOLDEN["triplet_seed"], 99):
            for tpa in (1, 3):
                ours = tx.sample_triplets(
                    ds.labels, tx.TripletConfig(seed=seed,
                                                triplets_per_anchor=tpa))
                primary = score_sample_triplets(
                    ds.labels, ScoreTripletConfig(seed=seed,
                                                  triplets_per_anchor=tpa))
                assert ours == primary

    def test_golden_norms(self, extracted):
        _, _, report = extracted
        assert report.grad_norms[0] == pytest.approx(
            GOLDEN["grad_norm_conv1"], abs=1e-4)
        assert report.grad_norms[1] == pytest.approx(
            GOLDEN["grad_norm_conv2"], abs=1e-4)

    def test_extraction_is_deterministic(self, tmp_path, golden_folder,
                                         extracted):
        out, _, _ = extracted
        model = tx.build_model(GOLDEN["architecture"],
                               init_seed=GOLDEN["init_seed"])
        ds = tx.load_image_folder(golden_folder)
        again = tmp_path / "again.tfb"
        tx.extract_bundle(model, ds,
                          tx.TripletConfig(seed=GOLDEN["triplet_seed"]),
                          again, architecture=GOLDEN["architecture"],
                          model_id="small", source_dataset="synthetic")
        assert again.read_bytes() == Path(out).read_bytes()


class TestTripletLoss:
    def test_grads_match_primary_analytic(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n, d = int(rng.integers(6, 14)), int(rng.integers(3, 9))
            y = rng.integers(0, 3, size=n)
            y[:2] = [0, 1]
            X = rng.normal(size=(n, d))
            cfg = tx.TripletConfig(margin=float(rng.uniform(0.05, 0.8)),
                                   triplets_per_anchor=2,
                                   seed=int(rng.integers(1000)))
            trips = tx.sample_triplets(y, cfg)
            for reduction in (tx.REDUCTION_MEAN_NONZERO,
                              tx.REDUCTION_MEAN_ALL):
                want_loss, want_grad = triplet_loss_and_embedding_grads(
                    X, trips, cfg.margin, reduction)
                emb = torch.tensor(X, requires_grad=True)
                loss = tx.triplet_loss(emb, trips, cfg.margin, reduction)
                loss.backward()
                assert float(loss.detach()) == pytest.approx(want_loss,
                                                             abs=1e-12)
                np.testing.assert_allclose(emb.grad.numpy(), want_grad,
                                           atol=1e-12)

    def test_all_satisfied_margins_give_zero(self):
        emb = torch.tensor([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]],
                           requires_grad=True)
        trips = [(0, 1, 2), (2, 3, 0)]
        loss = tx.triplet_loss(emb, trips, margin=0.05)
        loss.backward()
        assert float(loss.detach()) == 0.0
        assert emb.grad.abs().sum() == 0.0


class TestSampling:
    def test_structure(self):
        y = np.array([0, 0, 1, 1])
        trips = tx.sample_triplets(y, tx.TripletConfig(triplets_per_anchor=1))
        assert len(trips) == 4
        for a, p, q in trips:
            assert y[a] == y[p] and a != p and y[a] != y[q]

    def test_seed_determinism(self):
        y = np.array([0, 0, 0, 1, 1, 2])
        one = tx.sample_triplets(y, tx.TripletConfig(seed=9))
        two = tx.sample_triplets(y, tx.TripletConfig(seed=9))
        assert one == two
        assert one != tx.sample_triplets(y, tx.TripletConfig(seed=10))

    def test_single_class_rejected(self):
        with pytest.raises(tx.NoValidTriplet):
            tx.sample_triplets(np.zeros(6, dtype=int))


class TestContainer:
    def make_bundle(self, path, norms=(0.5, 0.25)):
        emb = np.arange(12, dtype=np.float64).reshape(4, 3)
        probs = np.full((4, 2), 0.5)
        tx.write_bundle(path, embeddings=emb, source_probs=probs,
                        grad_norms=norms, meta={"model_id": "m"})
        return path

    def test_round_trip(self, tmp_path):
        path = self.make_bundle(tmp_path / "b.tfb")
        report = tx.verify_bundle(path)
        assert (report.n, report.D, report.Z) == (4, 3, 2)
        assert report.grad_norms == (0.5, 0.25)
        assert report.meta["model_id"] == "m"

    def test_truncated_file_rejected(self, tmp_path):
        path = self.make_bundle(tmp_path / "b.tfb")
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(tx.MalformedHeader):
            tx.verify_bundle(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = self.make_bundle(tmp_path / "b.tfb")
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(tx.MalformedHeader):
            tx.verify_bundle(path)

    def test_negative_norm_rejected(self, tmp_path):
        path = self.make_bundle(tmp_path / "b.tfb")
        blob = bytearray(path.read_bytes())
        blob[-16:] = struct.pack("<dd", -1.0, 0.5)
        path.write_bytes(bytes(blob))
        with pytest.raises(tx.InvariantViolation):
            tx.verify_bundle(path)

    def test_unnormalized_probs_rejected(self, tmp_path):
        path = tmp_path / "b.tfb"
        emb = np.zeros((2, 2))
        probs = np.full((2, 3), 0.9)
        tx.write_bundle(path, embeddings=emb, source_probs=probs,
                        grad_norms=None, meta={})
        with pytest.raises(tx.InvariantViolation):
            tx.verify_bundle(path)


class TestDatasets:
    def test_labels_follow_sorted_directories(self, tmp_path):
        write_image_folder(tmp_path, 1, n_per_class=2,
                           classes=("zebra", "ant"))
        ds = tx.load_image_folder(tmp_path)
        assert ds.class_names == ("ant", "zebra")
        assert ds.labels.tolist() == [0, 0, 1, 1]
        assert ds.images.shape == (4, 3, 224, 224)
        assert ds.images.dtype == torch.float32

    def test_needs_two_classes(self, tmp_path):
        write_image_folder(tmp_path, 1, classes=("only",))
        with pytest.raises(tx.DatasetError):
            tx.load_image_folder(tmp_path)

    def test_empty_class_rejected(self, tmp_path):
        write_image_folder(tmp_path, 1)
        (tmp_path / "class_c").mkdir()
        with pytest.raises(tx.DatasetError):
            tx.load_image_folder(tmp_path)

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(tx.DatasetError):
            tx.load_image_folder(tmp_path / "nowhere")


class TestLayerMaps:
    def test_all_nine_ship(self):
        assert len(tx.LAYER_MAPS) == 9

    def test_unknown_architecture(self):
        with pytest.raises(tx.UnknownArchitecture):
            tx.get_layer_map("alexnet")

    def test_override_wins(self):
        custom = tx.ArchLayerMap("mystery", None, "stem", "block.conv")
        assert tx.get_layer_map("mystery", custom) is custom

    @pytest.mark.parametrize("architecture", sorted(tx.LAYER_MAPS))
    def test_map_matches_execution_order(self, architecture):
        # conv1/conv2 must be the first two convolutions to fire
        model = tx.build_model(architecture, init_seed=0)
        lm = tx.get_layer_map(architecture)
        tx.validate_map(model, lm)
        names = {mod: n for n, mod in model.named_modules()}
        fired = []
        hooks = [mod.register_forward_hook(
            lambda mo, i, o: fired.append(names[mo]))
            for mod in model.modules() if isinstance(mod, nn.Conv2d)]
        with torch.no_grad():
            model(torch.zeros(1, 3, 224, 224))
        for h in hooks:
            h.remove()
        assert fired[:2] == [lm.conv1, lm.conv2]


class TestDegenerateModels:
    def test_headless_model_gets_no_probs(self, tmp_path, golden_folder):
        model = tx.build_model(GOLDEN["architecture"], init_seed=1)
        model.fc = nn.Identity()
        lm = tx.ArchLayerMap(GOLDEN["architecture"], None, "conv1.0",
                             "stage2.0.branch1.0")
        ds = tx.load_image_folder(golden_folder)
        out = tmp_path / "headless.tfb"
        report = tx.extract_bundle(model, ds, tx.TripletConfig(), out,
                                   architecture=GOLDEN["architecture"],
                                   layer_map=lm)
        assert report.Z == 0
        assert tfrank.load_bundle(out).source_probs is None

    def test_frozen_conv1_surfaces_downstream(self, tmp_path, golden_folder):
        model = tx.build_model(GOLDEN["architecture"], init_seed=1)
        ds = tx.load_image_folder(golden_folder)
        out = tmp_path / "frozen.tfb"
        model.get_submodule("conv1.0").weight.requires_grad_(False)
        report = tx.extract_bundle(model, ds, tx.TripletConfig(), out,
                                   architecture=GOLDEN["architecture"])
        assert report.grad_norms[0] == 0.0
        with pytest.raises(Exception) as err:
            s_fu(*report.grad_norms)
        assert "zero" in str(err.value).lower()


class TestCli:
    def test_extract_and_verify(self, tmp_path, golden_folder):
        out = tmp_path / "cli.tfb"
        runner = CliRunner()
        res = runner.invoke(cli_main, [
            "extract", "--model", GOLDEN["architecture"],
            "--data", str(golden_folder), "--out", str(out),
            "--seed", str(GOLDEN["triplet_seed"]), "--margin", "0.05",
            "--init-seed", str(GOLDEN["init_seed"])],
            catch_exceptions=False)
        assert res.exit_code == 0, res.output
        assert "OK" in res.output
        res = runner.invoke(cli_main, ["verify", str(out)],
                            catch_exceptions=False)
        assert res.exit_code == 0
        assert "n=10" in res.output

    def test_unknown_model_exits_two(self, tmp_path, golden_folder):
        res = CliRunner().invoke(cli_main, [
            "extract", "--model", "not_a_model",
            "--data", str(golden_folder),
            "--out", str(tmp_path / "x.tfb")])
        assert res.exit_code == 2
