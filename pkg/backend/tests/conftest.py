import os
import sys

import numpy as np
import pytest

# Add the backend directory to Python path so we can import modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from dataset_processor import ClassDataset, Sample, generate_synthetic
from detectors import AnomalyDetector, KdeModel
from models import SynthSpec
from neural_network import NeuralizedModel, SquaredDistance
from relevance import Heatmap


@pytest.fixture
def rng():
    """Seeded generator for test data"""
    return np.random.default_rng(1234)


@pytest.fixture
def small_stripe_spec():
    """A small stripe class that builds in milliseconds"""
    return SynthSpec(kind="stripe", image_size=(8, 8), n_train=20, n_val=6,
                     n_val_outliers=4, n_test=10, stripe_width=2, seed=7)


@pytest.fixture
def small_stripe(small_stripe_spec):
    """In-memory dataset for the small stripe class"""
    _, dataset = generate_synthetic(small_stripe_spec)
    return dataset


@pytest.fixture
def stripe_dir(tmp_path, small_stripe_spec):
    """Small stripe class written to disk"""
    out = tmp_path / "stripe"
    generate_synthetic(small_stripe_spec, out)
    return out


@pytest.fixture
def tiny_dataset():
    """Hand-built 1x2 dataset with two masked test outliers"""
    def sample(values, label, mask=None, sid=""):
        return Sample(image=np.array([values], dtype=np.float64), label=label,
                      mask=None if mask is None else np.array([mask], dtype=np.uint8), sample_id=sid)

    return ClassDataset(
        class_name="tiny",
        train=[sample([0.5, 0.5], 0, sid="train_0"), sample([0.6, 0.4], 0, sid="train_1"),
               sample([0.4, 0.6], 0, sid="train_2")],
        val=[sample([0.5, 0.55], 0, sid="val_0")],
        test=[sample([0.5, 0.5], 0, sid="test_0"), sample([0.55, 0.45], 0, sid="test_1"),
              sample([0.1, 0.5], 1, [1, 0], sid="test_2"), sample([0.5, 0.95], 1, [0, 1], sid="test_3")],
    )


class OracleDetector(AnomalyDetector):
    """Scores by label lookup; its explainer returns the ground-truth mask"""

    kind = "oracle"

    def __init__(self, dataset: ClassDataset):
        super().__init__(dataset.image_shape, dataset.class_name)
        self._scores = {s.image.tobytes(): float(s.label) for s in dataset.test}
        self._masks = {s.image.tobytes(): s.mask for s in dataset.test}

    def neuralize(self, x=None) -> NeuralizedModel:
        return NeuralizedModel([SquaredDistance(np.zeros((1, self.input_dim)))], self.input_shape)

    def score(self, x) -> float:
        return self._scores[np.asarray(x).tobytes()]


def oracle_explainer(detector, x, lrp=None, sample_id=""):
    """Heatmap equal to the sample's mask"""
    mask = detector._masks[np.asarray(x).tobytes()]
    values = np.zeros(detector.input_shape) if mask is None else mask.astype(np.float64)
    return Heatmap(values=values, detector_kind=detector.kind, sample_id=sample_id)


@pytest.fixture
def oracle(tiny_dataset):
    return OracleDetector(tiny_dataset)


@pytest.fixture
def two_point_kde():
    """KDE on the 1-D training set {-1, +1}"""
    return KdeModel(np.array([[-1.0], [1.0]]), gamma=0.7)
