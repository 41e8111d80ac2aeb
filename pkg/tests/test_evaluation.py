import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rddpm import chain as c
from rddpm import evaluation as ev
from rddpm.datasets import block_center, default_toy_reference, haar_orthogonal, sphere_log_area, uniform_sphere
from rddpm.equivariance import random_rotation
from rddpm.geometry import sphere
from rddpm.model import ScoreNet


def uniform_logp(n):
    return lambda x: np.full(np.shape(x)[0], -sphere_log_area(n))


def random_net(n, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    net = ScoreNet(n, (8,), rng)
    for p in net.params() + net.params(True):
        p[...] = scale * rng.standard_normal(p.shape)
    return net


class TestNll:
    def test_no_steps_is_prior(self):
        rng = np.random.default_rng(42)
        x = uniform_sphere(3, rng, 10)
        est = ev.nll(sphere(3), ScoreNet(3), x, c.NoiseSchedule(1.0, 0, 1, 1), c.ZERO_DRIFT, uniform_logp(3), 5, rng)
        np.testing.assert_allclose(est.per_point, math.log(4 * math.pi), rtol=0, atol=1e-14)
        assert est.mean_nll == pytest.approx(math.log(4 * math.pi), abs=1e-14)

    def test_zero_score_cancels_on_sphere(self):
        # With s = 0 the reverse and forward densities coincide pathwise on a sphere.
        rng = np.random.default_rng(42)
        x = uniform_sphere(2, rng, 20)
        sch = c.NoiseSchedule(4.0, 30, 0.01, 1.0)
        est = ev.nll(sphere(2), ScoreNet(2), x, sch, c.ZERO_DRIFT, uniform_logp(2), 4, rng)
        np.testing.assert_allclose(est.per_point, math.log(2 * math.pi), atol=1e-10)

    @pytest.mark.filterwarnings("ignore:.*likelihood paths dropped")
    def test_more_paths_less_variance(self):
        m = sphere(2)
        sch = c.NoiseSchedule(4.0, 20, 0.01, 1.0)
        net = random_net(2, 0)
        x = np.tile([1.0, 0.0], (40, 1))
        spreads = []
        for paths in (10, 100):
            est = ev.nll(m, net, x, sch, c.ZERO_DRIFT, uniform_logp(2), paths, np.random.default_rng(paths))
            spreads.append(np.var(est.per_point))
        assert spreads[1] < spreads[0]

    def test_all_paths_fail(self):
        rng = np.random.default_rng(42)
        sch = c.NoiseSchedule(1.0, 3, 60.0, 60.0)
        with pytest.warns(RuntimeWarning):
            with pytest.raises(ev.AllPathsFailed):
                ev.nll(sphere(3), ScoreNet(3), uniform_sphere(3, rng, 3), sch, c.ZERO_DRIFT, uniform_logp(3), 2, rng)

    def test_csv(self, tmp_path):
        est = ev.NllEstimate(1.0, np.array([1.0, np.nan]), 3, 0.0, np.array([3, 0]))
        ev.write_nll_csv(tmp_path / "n.csv", est)
        lines = (tmp_path / "n.csv").read_text().splitlines()
        assert lines == ["point_index,nll,paths_used", "0,1.0,3", "1,,0"]


class TestTraces:
    def test_identity(self):
        out = ev.trace_powers(np.eye(4), [1, 2])
        assert out[1][0] == 4 and out[2][0] == 4

    def test_so10_centers(self):
        one = ev.trace_powers(block_center(10, 1), [1, 2, 4, 5])
        np.testing.assert_allclose([one[p][0] for p in (1, 2, 4, 5)], [9, 7, 7, 9], atol=1e-12)
        five = ev.trace_powers(block_center(10, 5), [1, 2, 4, 5])
        np.testing.assert_allclose([five[p][0] for p in (1, 2, 4, 5)], [5, -5, -5, 5], atol=1e-12)

    def test_cube_of_center(self):
        assert ev.trace_powers(block_center(10, 1), [3])[3][0] == pytest.approx(6.0, abs=1e-12)

    def test_conjugation_invariance(self):
        rng = np.random.default_rng(42)
        s = haar_orthogonal(5, rng, 50)
        r = haar_orthogonal(5, rng)
        a = ev.trace_powers(s, [1, 2, 4, 5])
        b = ev.trace_powers(r @ s @ r.T, [1, 2, 4, 5])
        for p in a:
            np.testing.assert_allclose(a[p], b[p], atol=1e-12)

    def test_histograms(self):
        h = ev.trace_moments(haar_orthogonal(3, np.random.default_rng(0), 200), bins=20)
        assert set(h) == {1, 2, 4, 5}
        assert len(h[1].counts) == len(h[1].edges) - 1 == 20
        assert h[1].counts.sum() == 200 and np.all(np.diff(h[1].edges) > 0)

    def test_degenerate_histogram(self):
        h = ev.histogram(np.ones(5), "one", bins=4)
        assert h.counts.sum() == 5


class TestTr3:
    def test_zero_spread(self):
        s = np.broadcast_to(block_center(4, 1), (10, 4, 4))
        assert ev.tr3_concentration_check(s, 0.0).std == 0.0

    def test_quadratic_scaling(self):
        from rddpm.datasets import wrapped_normal_so

        rng = np.random.default_rng(42)
        centers = block_center(10, 1)[None]
        a = wrapped_normal_so(10, 1, 0.05, 4000, rng, centers=centers).points.reshape(-1, 10, 10)
        b = wrapped_normal_so(10, 1, 0.1, 4000, rng, centers=centers).points.reshape(-1, 10, 10)
        ratio = ev.tr3_concentration_check(b).std / ev.tr3_concentration_check(a).std
        assert 2.5 <= ratio <= 6.0


class TestWasserstein:
    def test_examples(self):
        x = np.random.default_rng(0).uniform(size=1000)
        assert ev.wasserstein1_1d(x, x) == 0.0
        assert ev.wasserstein1_1d([0.0], [2.5]) == 2.5
        assert ev.wasserstein1_1d(x, x + 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_unequal_sizes(self):
        assert ev.wasserstein1_1d([0.0, 1.0], [0.0, 0.0, 1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_metric_properties(self, seed):
        rng = np.random.default_rng(seed)
        a, b, d = (rng.normal(rng.normal(), 1.0, size=rng.integers(5, 50)) for _ in range(3))
        ab, ba = ev.wasserstein1_1d(a, b), ev.wasserstein1_1d(b, a)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert ab <= ev.wasserstein1_1d(a, d) + ev.wasserstein1_1d(d, b) + 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            ev.wasserstein1_1d([], [1.0])


class TestFailures:
    def test_forced_failure(self, tmp_path):
        rng = np.random.default_rng(42)
        sch = c.NoiseSchedule(1.0, 2, 40.0, 40.0)
        tb = c.simulate_forward(sphere(3), uniform_sphere(3, rng, 50), sch, c.ZERO_DRIFT, rng, on_failure="drop")
        rep = ev.failure_report(tb, (0, 10))
        assert rep.r_fail_fwd == 100.0 and rep.r_fail_bwd == 0.0
        ev.write_failures_csv(tmp_path / "f.csv", rep)
        assert (tmp_path / "f.csv").read_text().splitlines()[1] == "forward,50,50,100.0"

    def test_sphere_small_sigma(self):
        rng = np.random.default_rng(42)
        sch = c.NoiseSchedule(4.0, 20, 0.1 / math.sqrt(0.2), 0.1 / math.sqrt(0.2))
        tb = c.simulate_forward(sphere(3), uniform_sphere(3, rng, 2000), sch, c.ZERO_DRIFT, rng)
        assert ev.failure_report(tb).r_fail_fwd == 0.0

    def test_empty(self):
        assert ev.failure_report().r_fail_fwd == 0.0


class TestDihedralStats:
    def test_reference_and_rigid_copy(self):
        rng = np.random.default_rng(42)
        ref = default_toy_reference(5)
        rot = random_rotation(rng)
        moved = (ref.reshape(5, 3) @ rot.T + np.array([1.0, -2.0, 0.5])).ravel()
        out = ev.dihedral_and_rmsd_stats(np.stack([ref, moved]), {"ref": ref}, {"phi": (0, 1, 2, 3)}, bins=5)
        np.testing.assert_allclose(out["rmsd_ref"].values, 0.0, atol=1e-7)
        np.testing.assert_allclose(out["phi"].values[0], out["phi"].values[1], atol=1e-9)

    def test_right_angle(self):
        p = np.array([[1.0, 0, 0], [0, 0, 0], [0, 0, 1], [0, 1, 1]]).ravel()
        out = ev.dihedral_and_rmsd_stats(p[None], {}, {"phi": (0, 1, 2, 3)})
        assert abs(out["phi"].values[0]) == pytest.approx(90.0, abs=1e-10)
