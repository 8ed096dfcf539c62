import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smokeview.ensemble import (
    EnsembleConfig, EnsembleError, RunSet, average_views, compensated_mean, mse_decomposition, run_ensemble,
    single_run, variance_map, variance_map_raw,
)
from smokeview.image import CameraView, Image
from smokeview.splat.optim import OptimConfig, optimize
from smokeview.splat.render import render
from smokeview.splat.scene import GaussianScene, logit


def runset(rng, n, t=2, h=5, w=4):
    return RunSet([[Image(rng.uniform(size=(h, w, 3))) for _ in range(t)] for _ in range(n)])


@pytest.fixture(scope="module")
def tiny_views():
    truth = GaussianScene([[0, 0, 0], [0.3, 0.1, 0.2]], np.log(np.full((2, 3), 0.3)), np.tile([1.0, 0, 0, 0], (2, 1)),
                          logit([0.9, 0.8]), [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2]], [0.2, 0.2, 0.3])
    cams = [CameraView.look_at([4 * np.cos(a), -1, 4 * np.sin(a)], [0, 0, 0], [0, -1, 0], 20, 12, 12)
            for a in np.linspace(0, 2 * np.pi, 5, endpoint=False)]
    return [(render(truth, c), c) for c in cams[:4]], [cams[4]]


CFG = OptimConfig(iterations=25, budget=8, relocation_interval=10, loss_lambda=0.0)


def test_seeds():
    assert EnsembleConfig(3, 10).seeds() == [10, 11, 12]
    with pytest.raises(ValueError):
        EnsembleConfig(0)


def test_single_run_matches_direct(tiny_views):
    views, targets = tiny_views
    rs = run_ensemble(views, CFG, EnsembleConfig(1, 5), targets, keep_scenes=True)
    direct = optimize(views, CFG.with_seed(5))
    assert rs.scenes[0].equals(direct)
    assert rs.views[0][0] == render(direct, targets[0])
    assert average_views(rs)[0] == rs.views[0][0]


def test_equal_seeds_bitwise(tiny_views):
    views, targets = tiny_views
    rs = run_ensemble(views, CFG, EnsembleConfig(2), targets, seeds=[3, 3])
    assert rs.views[0] == rs.views[1]


def test_distinct_seeds_differ_and_parallel_matches(tiny_views):
    views, targets = tiny_views
    serial = run_ensemble(views, CFG, EnsembleConfig(3, 0, workers=1), targets)
    parallel = run_ensemble(views, CFG, EnsembleConfig(3, 0, workers=2), targets)
    assert serial.views == parallel.views
    assert serial.views[0][0] != serial.views[1][0]
    for k, seed in enumerate(serial.seeds):
        assert single_run(views, CFG, seed, targets)[1] == serial.views[k]


def test_run_errors_carry_index(tiny_views):
    views, targets = tiny_views
    bad = [(views[0][0], views[1][1]), (Image(np.zeros((3, 3, 3))), views[1][1])]
    with pytest.raises(EnsembleError, match="run 0"):
        run_ensemble(bad, CFG, EnsembleConfig(1), targets)
    with pytest.raises(ValueError):
        run_ensemble(views, CFG, EnsembleConfig(1), [])


def test_average_closed_form():
    rs = RunSet([[Image.constant(2, 2, (0.2,) * 3)], [Image.constant(2, 2, (0.6,) * 3)]])
    np.testing.assert_allclose(average_views(rs)[0].data, 0.4, atol=1e-15)


def test_average_idempotent_on_identical(rng):
    img = Image(rng.uniform(size=(3, 3, 3)))
    assert average_views(RunSet([[img]] * 5))[0] == img


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_average_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    rs = runset(rng, n)
    perm = rng.permutation(n)
    shuffled = RunSet([rs.views[k] for k in perm])
    for a, b in zip(average_views(rs), average_views(shuffled)):
        assert np.abs(a.data - b.data).max() <= 1e-12


def test_compensated_mean_matches_exact_sum(rng):
    import math

    stack = rng.uniform(size=(91, 6))
    exact = np.array([math.fsum(stack[:, i]) / 91 for i in range(6)])
    np.testing.assert_allclose(compensated_mean(stack), exact, atol=2e-16, rtol=0)


def test_rundset_validates(rng):
    with pytest.raises(ValueError):
        RunSet([[Image(np.zeros((2, 2, 3)))], [Image(np.zeros((3, 2, 3)))]])
    with pytest.raises(ValueError):
        RunSet([])


def test_variance_closed_forms(rng):
    img = Image(rng.uniform(0.3, 0.7, size=(4, 4, 3)))
    vmap, peak = variance_map(RunSet([[img]] * 3), 0)
    assert peak == 0 and not vmap.any()
    other = img.data.copy()
    other[..., 1] += 0.2
    rs = RunSet([[img], [Image(other)]])
    np.testing.assert_allclose(variance_map_raw(rs, 0), 0.1**2 / 3, atol=1e-15)
    vmap, peak = variance_map(rs, 0)
    assert peak == pytest.approx(0.01 / 3)
    np.testing.assert_allclose(vmap, 1.0)
    with pytest.raises(ValueError):
        variance_map(RunSet([[img]]), 0)


def test_variance_direct(rng):
    rs = runset(rng, 6)
    stack = rs.stack(1)
    expected = ((stack - stack.mean(axis=0)) ** 2).mean(axis=0).mean(axis=-1)
    np.testing.assert_allclose(variance_map_raw(rs, 1), expected, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10))
def test_mse_decomposition(seed, n):
    rng = np.random.default_rng(seed)
    rs = runset(rng, n)
    gt = Image(rng.uniform(size=(5, 4, 3)))
    per_run, of_mean, spread = mse_decomposition(rs, 0, gt)
    assert abs(per_run - (of_mean + spread)) <= 1e-9
    assert of_mean >= 0 and spread >= 0
    avg = average_views(rs)[0]
    assert -10 * np.log10(np.mean((avg.data - gt.data) ** 2)) >= -10 * np.log10(per_run) - 1e-9
