"""
Tests for seed derivation and the thread-capped map.
"""

import numpy as np
import pytest

from protomargin.parallel import THREADS_ENV, map_ordered, worker_threads
from protomargin.seeding import STREAMS, derive_seed, stream_rng


class TestSeeding:
    """Tests for derive_seed and stream_rng."""

    def test_deterministic(self):
        """Test that the same inputs give the same seed."""
        assert derive_seed(7, "data", 3) == derive_seed(7, "data", 3)

    def test_streams_independent(self):
        """Test that stream names and sub-keys separate seeds."""
        seeds = {derive_seed(7, name) for name in STREAMS}
        seeds |= {derive_seed(7, "data", i) for i in range(50)}
        seeds.add(derive_seed(8, "data"))

        assert len(seeds) == len(STREAMS) + 50 + 1

    def test_seed_range(self):
        """Test that derived seeds are nonnegative 63-bit integers."""
        for master in range(20):
            seed = derive_seed(master, "init")
            assert 0 <= seed < 2**63

    def test_negative_master_seed(self):
        """Test that negative seeds are rejected."""
        with pytest.raises(ValueError, match="nonnegative"):
            derive_seed(-1, "data")

    def test_stream_rng_reproducible(self):
        """Test that equal streams draw equal numbers."""
        a = stream_rng(3, "batching").uniform(size=5)
        b = stream_rng(3, "batching").uniform(size=5)

        np.testing.assert_array_equal(a, b)


class TestParallel:
    """Tests for worker_threads and map_ordered."""

    def test_default_single_thread(self, monkeypatch):
        """Test that the cap defaults to one thread."""
        monkeypatch.delenv(THREADS_ENV, raising=False)

        assert worker_threads() == 1

    def test_env_cap(self, monkeypatch):
        """Test that the environment variable sets the cap."""
        monkeypatch.setenv(THREADS_ENV, "4")

        assert worker_threads() == 4

    @pytest.mark.parametrize("raw", ["0", "-2", "many"])
    def test_invalid_env(self, monkeypatch, raw):
        """Test that non-positive or non-numeric caps are rejected."""
        monkeypatch.setenv(THREADS_ENV, raw)

        with pytest.raises(ValueError, match=THREADS_ENV):
            worker_threads()

    @pytest.mark.parametrize("threads", [1, 2, 8])
    def test_order_preserved(self, threads):
        """Test that results come back in input order for any thread count."""
        assert map_ordered(lambda x: x * x, range(30), threads) == [x * x for x in range(30)]

    def test_empty(self):
        """Test that an empty input gives an empty list."""
        assert map_ordered(str, [], 4) == []
