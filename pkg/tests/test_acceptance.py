"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (see conftest). The trained-preset
criteria run the real command-line pipeline (train, then nll/generate) on the
shipped presets, so they take one to two hours on one core; deselect them with
``-m "not slow"``.
"""

import math
import time

import numpy as np
import pytest

from rddpm import chain as c
from rddpm import cli
from rddpm.config import load_config
from rddpm.datasets import default_toy_reference, haar_orthogonal, load_points_csv, uniform_sphere
from rddpm.equivariance import (
    EquivariantScore,
    apply_rigid,
    random_rotation,
    rmsd_potential,
    rotate_atoms,
    verify_invariant_transition,
)
from rddpm.evaluation import failure_report, nll, trace_powers, wasserstein1_1d
from rddpm.geometry import dihedral, sample_tangent_gaussian, special_orthogonal, sphere
from rddpm.model import ScoreNet
from rddpm.rngs import role_rng
from rddpm.solver import NewtonConfig, newton_project, refine_to_manifold, sphere_closed_form
from rddpm.trainer import batch_loss, path_bound_terms

LOG_2PI = math.log(2 * math.pi)


class TrainedPreset:
    """A preset trained through the CLI, with its dataset and best checkpoint."""

    def __init__(self, name, out_dir):
        self.name = name
        self.out = str(out_dir)
        t0 = time.perf_counter()
        assert cli.main(["train", "--config", name, "--out", self.out, "--quiet"]) == 0
        self.train_seconds = time.perf_counter() - t0
        self.cfg = load_config(name, {"run": {"out_dir": self.out}})
        self.m = cli.build_manifold(self.cfg)
        self.schedule = cli.build_schedule(self.cfg)
        self.newton = cli.build_newton(self.cfg)
        self.drift = cli.build_drift(self.cfg, self.m)
        self.ds = cli.build_dataset(self.cfg, self.m)
        saved, labels = load_points_csv(f"{self.out}/dataset.csv")
        np.testing.assert_array_equal(saved, self.ds.points)
        self.prior = cli.build_prior(self.cfg, self.m, self.ds)
        self.model = cli.load_model(self.cfg, self.m, f"{self.out}/ckpt_best.txt")

    def test_nll(self):
        return nll(self.m, self.model, self.ds.split("test"), self.schedule, self.drift, self.prior.logpdf,
                   self.cfg["nll"]["paths"], role_rng(self.cfg["run"]["seed"], "acceptance.nll"), self.newton)

    def bound(self):
        """Per-path ``Loss + C`` terms on fresh forward paths of the training points."""
        train = self.ds.split("train")
        rng = role_rng(self.cfg["run"]["seed"], "acceptance.bound")
        tb = c.simulate_forward(self.m, train, self.schedule, self.drift, rng, self.newton)
        loss, const = path_bound_terms(self.model, self.m, tb, self.schedule, None, self.prior.logpdf)
        return loss + const


@pytest.fixture(scope="module")
def circle(tmp_path_factory):
    return TrainedPreset("circle_uniform", tmp_path_factory.mktemp("circle_uniform"))


@pytest.fixture(scope="module")
def vmf(tmp_path_factory):
    return TrainedPreset("sphere_vmf", tmp_path_factory.mktemp("sphere_vmf"))


@pytest.fixture(scope="module")
def so3(tmp_path_factory):
    return TrainedPreset("so3_mixture", tmp_path_factory.mktemp("so3_mixture"))


# ---------------------------------------------------------------------------
# Fast criteria
# ---------------------------------------------------------------------------


def test_projection_bijection(criterion):
    rng = np.random.default_rng(2024)
    dh = dihedral(5, (0, 1, 2, 3), math.radians(-70))
    ref = refine_to_manifold(dh, default_toy_reference(5), target_tol=1e-10)
    cases = {
        "S1": (sphere(2), uniform_sphere(2, rng, 1000), c.ZERO_DRIFT),
        "S2": (sphere(3), uniform_sphere(3, rng, 1000), c.ZERO_DRIFT),
        "SO3": (special_orthogonal(3), haar_orthogonal(3, rng, 1000).reshape(-1, 9), c.ZERO_DRIFT),
        "dihedral": (dh, refine_to_manifold(dh, ref + 0.1 * rng.standard_normal((1000, 15)), target_tol=1e-10),
                     c.DriftSpec("rmsd_harmonic", 50.0, ref)),
    }
    worst, converged = 0.0, 0
    for m, x, drift in cases.values():
        for sigma in (0.05, 0.1):
            out = c.forward_step(m, x, sigma, drift, rng, NewtonConfig(tol=1e-10))
            g = c.g_map(m, x[out.ok], out.y[out.ok], sigma, c.drift_eval(drift, x[out.ok]))
            worst = max(worst, float(np.max(np.abs(g - out.v[out.ok]))))
            converged += int(out.ok.sum())
    ok = criterion("projection bijection", worst <= 1e-7, f"max|G(y)-v|={worst:.2e} over {converged} steps")
    assert ok


def test_sphere_consistency(criterion):
    rng = np.random.default_rng(2024)
    m = sphere(3)
    x = uniform_sphere(3, rng, 10000)
    step = sample_tangent_gaussian(m, x, rng)
    step *= 0.9 * rng.uniform(size=(10000, 1)) / np.linalg.norm(step, axis=1, keepdims=True)
    y_closed, ok_closed = sphere_closed_form(x, step)
    res = newton_project(m, x, x + step, NewtonConfig(tol=1e-12, max_steps=50))
    diff = float(np.max(np.abs(res.point - y_closed)))
    ok = criterion("sphere consistency", bool(ok_closed.all() and res.converged.all() and diff <= 1e-8),
                   f"max diff {diff:.2e}")
    assert ok


def test_density_normalization(criterion):
    th = 2 * math.pi * np.arange(2048) / 2048 - math.pi
    y = np.stack([np.cos(th), np.sin(th)], axis=1)
    x = np.tile([1.0, 0.0], (2048, 1))
    totals = []
    for sigma in (0.05, 0.1, 0.2, 0.3):
        q = np.exp(c.log_forward_transition(sphere(2), x, y, sigma, np.zeros_like(x)))
        totals.append(float(q.sum() * 2 * math.pi / 2048))
    ok = criterion("density normalization", all(0.99 <= t <= 1.001 for t in totals),
                   "integrals " + ", ".join(f"{t:.5f}" for t in totals))
    assert ok


def test_failure_rate_anchor(criterion):
    # Sphere rows of the reference settings: T = 4, N = 400, gamma_max = 1, so sigma_max = 0.1.
    m = sphere(3)
    sch = c.NoiseSchedule(4.0, 400, 0.01, 1.0)
    rng = np.random.default_rng(2024)
    fwd = c.simulate_forward(m, uniform_sphere(3, rng, 10000), sch, c.ZERO_DRIFT, rng, on_failure="drop")
    net = ScoreNet(3, (16,), rng)
    for p in net.params(True):
        p[...] = 0.1 * rng.standard_normal(p.shape)
    rev = c.simulate_reverse(m, uniform_sphere(3, rng, 10000), sch,
                             lambda z, t: net.forward(z, t / sch.T, True), c.ZERO_DRIFT, rng, on_failure="drop")
    rep = failure_report(fwd, rev)
    ok = criterion("failure-rate anchor", rep.r_fail_fwd == 0.0 and rep.r_fail_bwd == 0.0,
                   f"sigma_max={sch.sigmas.max():.3f} fwd {rep.r_fail_fwd:.2f}% bwd {rep.r_fail_bwd:.2f}% "
                   f"over {rep.forward_attempts}+{rep.reverse_attempts} paths")
    assert ok


def test_equivariance(criterion):
    rng = np.random.default_rng(2024)
    m = dihedral(5, (0, 1, 2, 3), math.radians(-70))
    ref = refine_to_manifold(m, default_toy_reference(5), target_tol=1e-10)
    net = ScoreNet(15, (32, 32), rng)
    for p in net.params():
        p[...] = 0.3 * rng.standard_normal(p.shape)
    score = EquivariantScore(net, ref)
    drift = c.DriftSpec("rmsd_harmonic", 50.0, ref)
    worst_score = worst_density = 0.0
    trials = 0
    while trials < 100:
        x = refine_to_manifold(m, ref + 0.1 * rng.standard_normal(15), target_tol=1e-12)
        out = c.forward_step(m, x, 0.03, drift, rng, NewtonConfig(tol=1e-12))
        if not out.ok:
            continue
        rot, w = random_rotation(rng), 2 * rng.standard_normal(3)
        s = score(x, 0.4)
        s_moved = score(apply_rigid(x, rot, w), 0.4)
        worst_score = max(worst_score, float(np.max(np.abs(s_moved - rotate_atoms(s, rot)))))
        for dr in (drift, c.ZERO_DRIFT):
            (q0, q1), (p0, p1) = verify_invariant_transition(m, x, out.y, 0.03, dr, lambda z: score(z, 0.4), rot, w)
            worst_density = max(worst_density, abs(q0 - q1), abs(p0 - p1))
        trials += 1
    ok = criterion("equivariance", worst_score <= 1e-8 and worst_density <= 1e-6,
                   f"score max {worst_score:.2e}, density max {worst_density:.2e} over {trials} trials")
    assert ok


def test_gradient_correctness(criterion):
    rng = np.random.default_rng(2024)
    worst_net = 0.0
    for _ in range(5):
        net = ScoreNet(4, (8,), rng)
        for p in net.params():
            p[...] = 0.5 * rng.standard_normal(p.shape)
        x, t, target = rng.standard_normal((6, 4)), rng.uniform(size=6), rng.standard_normal((6, 4))

        def loss():
            return 0.5 * np.sum((net.forward(x, t) - target) ** 2)

        out, cache = net.forward(x, t, return_cache=True)
        grads = net.backward(cache, out - target)
        params = net.params()
        for _ in range(10):
            i = rng.integers(len(params))
            j = rng.integers(params[i].size)
            flat = params[i].reshape(-1)
            old = flat[j]
            flat[j] = old + 1e-6
            up = loss()
            flat[j] = old - 1e-6
            down = loss()
            flat[j] = old
            fd = (up - down) / 2e-6
            an = grads[i].reshape(-1)[j]
            worst_net = max(worst_net, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    ref = default_toy_reference(5)
    worst_v = 0.0
    for _ in range(5):
        x = ref + 0.4 * rng.standard_normal(15)
        b = rmsd_potential(x, ref, 50.0)[1]
        fd = np.empty(15)
        for i in range(15):
            e = np.zeros(15)
            e[i] = 1e-6
            fd[i] = (rmsd_potential(x + e, ref, 50.0)[0] - rmsd_potential(x - e, ref, 50.0)[0]) / 2e-6
        worst_v = max(worst_v, float(np.max(np.abs(b + fd)) / np.max(np.abs(fd))))
    ok = criterion("gradient correctness", worst_net <= 1e-4 and worst_v <= 1e-4,
                   f"net rel err {worst_net:.2e}, potential rel err {worst_v:.2e}")
    assert ok


def test_loss_level(criterion):
    m = sphere(2)
    sch = c.NoiseSchedule(4.0, 200, 0.01, 1.0)
    rng = np.random.default_rng(2024)
    tb = c.simulate_forward(m, uniform_sphere(2, rng, 1000), sch, c.ZERO_DRIFT, rng)
    loss, _ = batch_loss(ScoreNet(2, (32,)), m, tb.points, sch, with_grad=False)
    per_step = loss / sch.N
    ok = criterion("loss level", 0.4 <= per_step <= 0.6, f"mean per-step loss {per_step:.4f}")
    assert ok


# ---------------------------------------------------------------------------
# Trained presets
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_circle_nll(circle, criterion):
    est = circle.test_nll()
    gap = abs(est.mean_nll - LOG_2PI)
    ok = criterion("analytic NLL recovery (circle)", gap <= 0.05,
                   f"test NLL {est.mean_nll:.4f} +- {est.standard_error:.4f} vs log 2pi {LOG_2PI:.5f}; "
                   f"train {circle.train_seconds / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_vmf_oracle_nll(vmf, criterion):
    test = vmf.ds.split("test")
    est = vmf.test_nll()
    oracle = float(-np.mean(vmf.ds.logpdf(test)))
    gap = abs(est.mean_nll - oracle)
    ok = criterion("oracle NLL (sphere vMF)", gap <= 0.15,
                   f"test NLL {est.mean_nll:.4f} +- {est.standard_error:.4f} vs exact {oracle:.4f}; "
                   f"train {vmf.train_seconds / 60:.1f} min")
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize("preset", ["circle", "vmf"])
def test_variational_bound(preset, request, criterion):
    run = request.getfixturevalue(preset)
    est = run.test_nll()
    terms = run.bound()
    bound = float(np.mean(terms))
    se = math.sqrt(est.standard_error**2 + float(np.var(terms, ddof=1)) / terms.size)
    ok = criterion(f"variational bound ({run.name})", est.mean_nll <= bound + 3 * se,
                   f"NLL {est.mean_nll:.4f} <= Loss+C {bound:.4f} + 3*{se:.4f}")
    assert ok


@pytest.mark.slow
def test_so3_mixture(so3, criterion):
    out = so3.out
    assert cli.main(["generate", "--config", "so3_mixture", "--out", out, "--count", "1000", "--quiet"]) == 0
    gen, _ = load_points_csv(f"{out}/samples.csv")
    test = so3.ds.split("test")
    tr_gen = trace_powers(gen.reshape(-1, 3, 3), [1])[1]
    tr_test = trace_powers(test.reshape(-1, 3, 3), [1])[1]
    w1 = wasserstein1_1d(tr_gen, tr_test)
    half = len(test) // 2
    floor = wasserstein1_1d(tr_test[:half], tr_test[half:])
    centers = so3.ds.centers.reshape(len(so3.ds.centers), 9)
    labels = np.argmin(((gen[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    frac = float(np.mean(labels == 0))
    ok = criterion("SO(3) mixture recovery", w1 <= 0.1 and abs(frac - 0.5) <= 0.05,
                   f"W1(tr S) {w1:.4f} (held-out floor {floor:.4f}), mode-0 share {frac:.3f}; "
                   f"train {so3.train_seconds / 60:.1f} min")
    assert ok
