import os
from unittest.mock import patch

import numpy as np
import pytest

from config import Config
from errors import (
    DatasetError,
    DegenerateScoreError,
    HansLensError,
    NumericalError,
    OutputExistsError,
    ShapeError,
    TrainingDivergedError,
)
from random_streams import rng_for


class TestEnvironmentConfiguration:
    """Test environment and configuration setup"""

    def test_config_defaults(self):
        """Test default configuration values"""
        config = Config()

        assert config.LRP_GAMMA == 0.25
        assert config.LRP_EPSILON == 1e-9
        assert config.KDE_GRID_EXPONENTS == tuple(range(-8, 9))
        assert config.ADAM_STEP == 1e-3
        assert config.ADAM_BETA1 == 0.9
        assert config.ADAM_BETA2 == 0.999
        assert config.ADAM_EPSILON == 1e-8
        assert config.BATCH_SIZE == 32
        assert config.AE_HIDDEN == 128
        assert config.AE_BOTTLENECK == 16
        assert config.JACOBI_TOLERANCE == 1e-12

    @patch.dict(os.environ, {'HANSLENS_THREADS': '4', 'HANSLENS_LOG_LEVEL': 'DEBUG'})
    def test_config_environment_variables(self):
        """Test that config reads environment variables"""
        config = Config()
        assert config.THREADS == 4
        assert config.LOG_LEVEL == 'DEBUG'

    @pytest.mark.parametrize("value", ["0", "-3", "many"])
    def test_thread_count_clamps(self, value):
        """Test that unusable thread counts fall back to one worker"""
        with patch.dict(os.environ, {'HANSLENS_THREADS': value}):
            assert Config().THREADS == 1


class TestErrorHierarchy:
    """Test that library errors can be caught as builtins"""

    def test_value_errors(self):
        for error in (DatasetError, ShapeError, DegenerateScoreError):
            assert issubclass(error, HansLensError)
            assert issubclass(error, ValueError)

    def test_training_diverged_carries_epoch(self):
        error = TrainingDivergedError(epoch=3, loss=float("nan"))
        assert isinstance(error, NumericalError)
        assert isinstance(error, RuntimeError)
        assert error.epoch == 3
        assert "epoch 3" in str(error)

    def test_output_exists_is_file_exists(self):
        assert issubclass(OutputExistsError, FileExistsError)


class TestRandomStreams:
    """Test seeded stream splitting"""

    def test_same_seed_and_stream_repeat(self):
        a = rng_for(7, "synth/base").random(5)
        b = rng_for(7, "synth/base").random(5)
        assert np.array_equal(a, b)

    def test_streams_are_independent(self):
        a = rng_for(7, "shuffle").random(5)
        b = rng_for(7, "backbone").random(5)
        assert not np.array_equal(a, b)

    def test_seeds_differ(self):
        assert not np.array_equal(rng_for(1, "x").random(5), rng_for(2, "x").random(5))

    def test_consumer_order_does_not_matter(self):
        """Drawing from one stream first leaves the other stream untouched"""
        first = rng_for(3, "b").random(4)
        rng_for(3, "a").random(100)
        assert np.array_equal(first, rng_for(3, "b").random(4))

    def test_large_seed_accepted(self):
        rng_for(2**64 - 1, "x").random()

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            rng_for(-1, "x")
