import numpy as np
import pytest
import torch

from evseg.errors import InvalidArgumentError
from evseg.events import EventStream
from evseg.reconstruct import Reconstructor, percentile_normalize
from evseg.serialization import module_checksum


def stream_of(records, width=6, height=5, t_start=0.0, t_end=1.0):
    if not records:
        return EventStream.empty(width, height, t_start, t_end)
    t, x, y, p = zip(*records)
    return EventStream(np.array(t, float), np.array(x), np.array(y), np.array(p, np.int8),
                       width, height, t_start, t_end).validate()


class TestIntegrator:
    def test_empty_stream_is_mid_gray(self):
        r = Reconstructor(kind="integrator")
        img = r.reconstruct(EventStream.empty(6, 5))
        assert img.shape == (5, 6)
        np.testing.assert_allclose(img, 0.5)

    def test_positive_events_make_unique_maximum(self):
        r = Reconstructor(kind="integrator")
        s = stream_of([(0.1, 3, 4, 1), (0.2, 3, 4, 1), (0.9, 3, 4, 1)], width=6, height=6)
        img = r.reconstruct(s)
        assert img[4, 3] == img.max()
        assert (img == img.max()).sum() == 1

    def test_deterministic(self):
        r = Reconstructor(kind="integrator", decay=0.4)
        s = stream_of([(0.1, 1, 1, 1), (0.6, 2, 3, -1)])
        prior = np.full((5, 6), 0.25)
        a = r.reconstruct(s, prior=prior)
        b = r.reconstruct(s, prior=prior.copy())
        assert a.tobytes() == b.tobytes()

    def test_polarity_antisymmetry(self):
        r = Reconstructor(kind="integrator")
        recs = [(0.1, 1, 1, 1), (0.3, 2, 2, 1), (0.5, 4, 3, -1), (0.8, 0, 0, 1)]
        s = stream_of(recs)
        flipped = stream_of([(t, x, y, -p) for (t, x, y, p) in recs])
        np.testing.assert_allclose(r.reconstruct(flipped), 1.0 - r.reconstruct(s), atol=1e-12)

    def test_prior_geometry_mismatch(self):
        r = Reconstructor(kind="integrator", decay=0.5)
        with pytest.raises(InvalidArgumentError):
            r.reconstruct(stream_of([(0.1, 0, 0, 1)]), prior=np.zeros((3, 3)))

    def test_range(self):
        rng = np.random.default_rng(0)
        n = 300
        s = EventStream.from_arrays(np.sort(rng.uniform(0, 1, n)), rng.integers(0, 6, n),
                                    rng.integers(0, 5, n), rng.choice([-1, 1], n),
                                    width=6, height=5, t_start=0.0, t_end=1.0)
        img = Reconstructor(kind="integrator").reconstruct(s)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestRecurrent:
    def test_deterministic_and_frozen(self):
        r = Reconstructor(kind="recurrent")
        s = stream_of([(0.1, 1, 1, 1), (0.4, 2, 2, -1), (0.9, 3, 3, 1)])
        before = None
        a = r.reconstruct(s)
        before = module_checksum(r.net)
        b = r.reconstruct(s)
        assert a.tobytes() == b.tobytes()
        assert module_checksum(r.net) == before
        assert not any(p.requires_grad for p in r.net.parameters())

    def test_prior_threads_through(self):
        r = Reconstructor(kind="recurrent")
        s = stream_of([(0.1, 1, 1, 1)])
        a = r.reconstruct(s)
        b = r.reconstruct(s, prior=a)
        assert a.shape == b.shape
        assert not np.array_equal(a, b)

    def test_output_in_unit_interval(self):
        r = Reconstructor(kind="recurrent")
        s = stream_of([(0.1, 1, 1, 1), (0.2, 4, 2, -1)])
        img = r.reconstruct(s)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestIdentity:
    def test_returns_frame(self):
        r = Reconstructor(kind="identity")
        frame = np.random.default_rng(1).uniform(0, 1, (4, 4))
        out = r.reconstruct(None, frame=frame)
        np.testing.assert_array_equal(out, frame)

    def test_requires_frame(self):
        with pytest.raises(InvalidArgumentError):
            Reconstructor(kind="identity").reconstruct(stream_of([(0.1, 0, 0, 1)]))


def test_unknown_kind_rejected():
    with pytest.raises(InvalidArgumentError):
        Reconstructor(kind="magic")


def test_percentile_normalize_flat_input():
    np.testing.assert_allclose(percentile_normalize(np.full((4, 4), 3.7)), 0.5)
