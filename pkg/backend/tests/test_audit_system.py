import csv
import json

import numpy as np
import pytest

import audit_system
from audit_system import AuditSystem
from config import Config
from conftest import OracleDetector, oracle_explainer
from dataset_processor import load_manifest, read_heatmap
from detectors import load_detector, training_scores
from errors import DatasetError, OutputExistsError
from models import RunConfig


def _system(out, command, **fields):
    config = Config()
    config.EPOCHS = 2
    config.AE_HIDDEN = 8
    config.AE_BOTTLENECK = 2
    config.BACKBONE_WIDTHS = (16,)
    return AuditSystem(config, RunConfig(command=command, out=str(out), seed=fields.pop("seed", 7), **fields))


@pytest.fixture
def kde_dir(tmp_path, stripe_dir):
    system = _system(tmp_path / "kde", "fit", data=str(stripe_dir))
    system.prepare_output()
    system.fit("kde")
    return tmp_path / "kde"


class TestRunBookkeeping:
    """Test output handling and run metadata"""

    def test_non_empty_output_needs_force(self, tmp_path):
        (tmp_path / "keep.txt").write_text("x")
        with pytest.raises(OutputExistsError):
            _system(tmp_path, "fit").prepare_output()
        _system(tmp_path, "fit", force=True).prepare_output()

    def test_metadata_lists_artifacts(self, tmp_path, stripe_dir):
        system = _system(tmp_path / "run", "fit", data=str(stripe_dir))
        system.prepare_output()
        system.fit("kde")
        metadata = json.loads(system.write_metadata().read_text())
        assert metadata["seed"] == 7
        assert metadata["config"]["command"] == "fit"
        assert metadata["artifacts"] == ["model.hlw", "model.json"]

    def test_missing_data_argument(self, tmp_path):
        with pytest.raises(DatasetError):
            _system(tmp_path, "fit").fit("kde")


class TestCommands:
    """Test each orchestrated command"""

    def test_synth_is_deterministic(self, tmp_path, small_stripe_spec):
        for name in ("a", "b"):
            system = _system(tmp_path / name, "synth")
            system.prepare_output()
            system.synth(small_stripe_spec)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_fit_each_kind(self, tmp_path, stripe_dir):
        for kind in ("kde", "autoencoder", "deep"):
            system = _system(tmp_path / kind, "fit", data=str(stripe_dir))
            system.prepare_output()
            detector = system.fit(kind)
            assert load_detector(tmp_path / kind).kind == detector.kind == kind

    def test_unknown_kind(self, tmp_path, small_stripe):
        with pytest.raises(ValueError):
            _system(tmp_path, "fit").fit_detector("svm", small_stripe)

    def test_scores_match_reloaded_model(self, tmp_path, stripe_dir, kde_dir):
        system = _system(tmp_path / "scores", "score", data=str(stripe_dir), model=str(kde_dir))
        system.prepare_output()
        path = system.score("test")
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        dataset = load_manifest(stripe_dir)
        model = load_detector(kde_dir)
        assert [r["sample_id"] for r in rows] == [s.sample_id for s in dataset.test]
        for row, sample in zip(rows, dataset.test):
            assert float(row["score"]) == model.score(sample.image)

    def test_explain_writes_heatmaps(self, tmp_path, stripe_dir, kde_dir):
        system = _system(tmp_path / "maps", "explain", data=str(stripe_dir), model=str(kde_dir))
        system.prepare_output()
        written = system.explain("test")
        assert len(written) == 2 * 10
        values = read_heatmap(tmp_path / "maps" / "heatmaps" / "test_0009.hm")
        assert values.shape == (8, 8)
        assert np.all(np.isfinite(values))

    def test_evaluate_with_oracle(self, tmp_path, stripe_dir, monkeypatch):
        oracle = OracleDetector(load_manifest(stripe_dir))
        monkeypatch.setattr(audit_system, "load_detector", lambda path: oracle)
        monkeypatch.setattr(audit_system, "explain", oracle_explainer)
        system = _system(tmp_path / "eval", "evaluate", data=str(stripe_dir), model="unused")
        system.prepare_output()
        report = system.evaluate()
        record = report.classes[0]
        assert (record.detection_accuracy, record.explanation_accuracy, record.clever_hans_score) == (1.0, 1.0, 0.0)
        assert (tmp_path / "eval" / "report.json").exists()
        assert (tmp_path / "eval" / "report.txt").exists()

    def test_bag_from_scratch(self, tmp_path, stripe_dir):
        system = _system(tmp_path / "bag", "bag", data=str(stripe_dir))
        system.prepare_output()
        bag = system.bag()
        assert [m.kind for m in bag.members] == ["kde", "autoencoder", "deep"]
        reloaded = load_detector(tmp_path / "bag")
        sample = load_manifest(stripe_dir).test[-1].image
        assert reloaded.score(sample) == pytest.approx(bag.score(sample), rel=1e-9)

    def test_bag_standardized_on_training_scores(self, tmp_path, stripe_dir):
        system = _system(tmp_path / "bag", "bag", data=str(stripe_dir))
        system.prepare_output()
        bag = system.bag()
        train = load_manifest(stripe_dir).train_matrix()
        for member, standardizer in zip(bag.members, bag.standardizers):
            z = (training_scores(member, train) - standardizer.mean) / standardizer.std
            assert abs(z.mean()) <= 1e-9
            assert abs(z.var() - 1.0) <= 1e-9

    def test_bag_from_members(self, tmp_path, stripe_dir, kde_dir):
        system = _system(tmp_path / "bag", "bag", data=str(stripe_dir))
        system.prepare_output()
        bag = system.bag([str(kde_dir)])
        assert [m.kind for m in bag.members] == ["kde"]

    def test_diag_kde_table(self, tmp_path, stripe_dir):
        system = _system(tmp_path / "diag", "diag-kde", data=str(stripe_dir))
        system.prepare_output()
        with open(system.diag_kde(), newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["gamma", "mean_abs_residual", "max_abs_residual"]
        assert len(rows) == 6
        means = [float(r[1]) for r in rows[1:]]
        assert all(a >= b for a, b in zip(means, means[1:]))
