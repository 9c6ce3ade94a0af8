"""Tests for expected improvement, candidate proposal, and the BO loop."""

import csv
import logging
import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from coldpost import autodiff as ad
from coldpost.autodiff import Tensor
from coldpost.bo import (
    _MERGE_RADIUS,
    BOState,
    SearchBox,
    _ei_closed_form,
    _ei_graph,
    bo_loop,
    default_init_grid,
    expected_improvement,
    propose_candidates,
    write_bo_history_csv,
)
from coldpost.data import Rng
from coldpost.gp import GPHyperparams, GPModel, GPObservation

# Interior optimum of the synthetic quadratic objective used throughout.
_OPT_LOG_T = -7.5
_OPT_LOG_SIGMA = -5.0
_OPT_VALUE = 30.0


def _quadratic(t: float, sigma: float) -> float:
    return (
        -((math.log(t) - _OPT_LOG_T) ** 2)
        - ((math.log(sigma) - _OPT_LOG_SIGMA) ** 2)
        + _OPT_VALUE
    )


def _hyper(**kwargs) -> GPHyperparams:
    defaults = dict(mean=15.0, scale2=16.0, length=3.0, noise_var=1e-3)
    defaults.update(kwargs)
    return GPHyperparams(**defaults)


def _ei_quadrature(mean: float, variance: float, f_best: float) -> float:
    s = math.sqrt(variance)

    def integrand(y):
        return (y - f_best) * math.exp(-0.5 * ((y - mean) / s) ** 2) / (s * math.sqrt(2 * math.pi))

    value, _ = quad(integrand, f_best, np.inf)
    return value


@pytest.fixture(scope="module")
def quadratic_runs():
    """Ten seeded BO runs on the synthetic quadratic, 4 init + 9 x k=4."""
    runs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(10):
            state, best = bo_loop(
                _quadratic, SearchBox(), default_init_grid(), iterations=9, k=4, rng=Rng(seed)
            )
            runs.append((seed, state, best))
    return runs


class TestSearchBox:
    def test_defaults_match_reported_ranges(self):
        box = SearchBox()
        assert (box.t_low, box.t_high) == (1e-12, 1e-2)
        assert (box.sigma_low, box.sigma_high) == (1e-10, 1.0)

    def test_rejects_inverted_or_non_positive(self):
        with pytest.raises(ValueError, match="t_low < t_high"):
            SearchBox(t_low=1e-2, t_high=1e-12)
        with pytest.raises(ValueError, match="t_low < t_high"):
            SearchBox(t_low=0.0)
        with pytest.raises(ValueError, match="sigma_low < sigma_high"):
            SearchBox(sigma_low=2.0)

    def test_contains_is_inclusive(self):
        box = SearchBox()
        assert box.contains(1e-12, 1e-10)
        assert box.contains(1e-2, 1.0)
        assert not box.contains(2e-2, 0.5)
        assert not box.contains(1e-5, 2.0)

    def test_clip_log_clamps_into_bounds(self):
        box = SearchBox()
        (t_lo, t_hi), (s_lo, s_hi) = box.log_bounds()
        clipped = box.clip_log(np.array([t_lo - 5.0, s_hi + 5.0]))
        assert clipped[0] == t_lo and clipped[1] == s_hi

    def test_default_init_grid_inside_box(self):
        box = SearchBox()
        grid = default_init_grid()
        assert len(grid) == 4
        assert {t for t, _ in grid} == {1e-7, 1e-4}
        assert {s for _, s in grid} == {1e-6, 1e-1}
        assert all(box.contains(t, s) for t, s in grid)


class TestExpectedImprovement:
    def test_zero_spread_below_incumbent(self):
        assert expected_improvement(10.0, 0.0, 12.0) == 0.0

    def test_zero_spread_above_incumbent(self):
        assert expected_improvement(15.0, 0.0, 12.0) == 3.0

    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError, match="variance must be >= 0"):
            expected_improvement(10.0, -1e-6, 12.0)

    def test_at_incumbent_with_unit_spread(self):
        assert abs(expected_improvement(20.0, 1.0, 20.0) - 0.398942) < 1e-6

    def test_one_above_incumbent_with_unit_spread(self):
        # Phi(1) + phi(1), cross-checked against the quadrature oracle.
        closed = expected_improvement(21.0, 1.0, 20.0)
        assert abs(closed - 1.0833155) < 1e-6
        assert abs(closed - _ei_quadrature(21.0, 1.0, 20.0)) < 1e-9

    def test_matches_quadrature_on_random_sweep(self):
        rng = np.random.default_rng(41)
        for _ in range(60):
            mean = float(rng.uniform(-5.0, 5.0))
            variance = float(rng.uniform(0.01, 9.0))
            f_best = float(rng.uniform(-5.0, 5.0))
            closed = expected_improvement(mean, variance, f_best)
            assert abs(closed - _ei_quadrature(mean, variance, f_best)) < 1e-6

    def test_non_negative_and_monotone_in_mean(self):
        rng = np.random.default_rng(43)
        for _ in range(50):
            variance = float(rng.uniform(0.0, 4.0))
            f_best = float(rng.uniform(-3.0, 3.0))
            means = np.sort(rng.uniform(-6.0, 6.0, size=4))
            values = [expected_improvement(float(m), variance, f_best) for m in means]
            assert all(v >= 0.0 for v in values)
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


class TestEiGraph:
    def _model(self):
        obs = (
            GPObservation((-16.0, -13.0), 11.0),
            GPObservation((-7.0, -5.0), 24.0),
            GPObservation((-10.0, -9.0), 18.0),
        )
        return GPModel(obs, _hyper()), 24.0

    def test_matches_closed_form(self):
        model, f_best = self._model()
        rng = np.random.default_rng(47)
        points = rng.uniform(-25.0, -2.0, size=(30, 2))
        qt = Tensor(points[:, 0].copy(), requires_grad=True)
        qs = Tensor(points[:, 1].copy(), requires_grad=True)
        values = _ei_graph(model, qt, qs, f_best).data
        for point, value in zip(points, values):
            assert abs(value - _ei_closed_form(model, point, f_best)) < 1e-9

    def test_gradient_matches_finite_differences(self):
        model, f_best = self._model()
        points = np.array([(-8.0, -6.0), (-14.0, -11.0), (-20.0, -18.0)])
        qt = Tensor(points[:, 0].copy(), requires_grad=True)
        qs = Tensor(points[:, 1].copy(), requires_grad=True)
        ad.backward(ad.tensor_sum(_ei_graph(model, qt, qs, f_best)))
        h = 1e-6
        for j in range(points.shape[0]):
            for axis, grad in ((0, qt.grad[j]), (1, qs.grad[j])):
                hi = points[j].copy()
                lo = points[j].copy()
                hi[axis] += h
                lo[axis] -= h
                numeric = (
                    _ei_closed_form(model, hi, f_best) - _ei_closed_form(model, lo, f_best)
                ) / (2 * h)
                assert abs(grad - numeric) < 1e-4 * max(1.0, abs(numeric))


class TestProposeCandidates:
    def test_rejects_bad_k(self):
        model = GPModel((GPObservation((-8.0, -4.0), 20.0),), _hyper())
        state = BOState(observations=list(model.observations))
        with pytest.raises(ValueError, match="k must be >= 1"):
            propose_candidates(model, state, SearchBox(), k=0, rng=Rng(0))

    def test_corner_observation_proposal_in_box(self):
        box = SearchBox()
        (t_lo, _), (s_lo, _) = box.log_bounds()
        obs = (GPObservation((t_lo, s_lo), 12.0),)
        model = GPModel(obs, _hyper())
        state = BOState(observations=list(obs))
        cands = propose_candidates(model, state, box, k=1, rng=Rng(2))
        assert len(cands) == 1
        (t_lo, t_hi), (s_lo, s_hi) = box.log_bounds()
        assert t_lo <= cands[0][0] <= t_hi
        assert s_lo <= cands[0][1] <= s_hi

    def test_deterministic_given_rng(self):
        obs = (
            GPObservation((-16.0, -13.0), 11.0),
            GPObservation((-7.0, -5.0), 24.0),
        )
        model = GPModel(obs, _hyper())
        state = BOState(observations=list(obs))
        first = propose_candidates(model, state, SearchBox(), k=3, rng=Rng(9))
        second = propose_candidates(model, state, SearchBox(), k=3, rng=Rng(9))
        assert first == second

    def test_candidates_respect_merge_radius(self):
        obs = (
            GPObservation((-16.0, -13.0), 11.0),
            GPObservation((-7.0, -5.0), 24.0),
            GPObservation((-10.0, -9.0), 18.0),
            GPObservation((-5.5, -1.5), 16.0),
        )
        model = GPModel(obs, _hyper())
        state = BOState(observations=list(obs))
        cands = propose_candidates(model, state, SearchBox(), k=4, rng=Rng(11))
        assert 1 <= len(cands) <= 4
        for i, a in enumerate(cands):
            for b in cands[i + 1 :]:
                assert math.hypot(a[0] - b[0], a[1] - b[1]) >= _MERGE_RADIUS

    def test_top_candidate_beats_dense_grid(self):
        # The strongest proposal must dominate a 200x200 lattice of the EI
        # surface; lower-ranked proposals are distinct local maxima and carry
        # no such guarantee.
        box = SearchBox()
        obs = (
            GPObservation((-16.0, -13.0), 11.0),
            GPObservation((-7.0, -5.0), 24.0),
            GPObservation((-10.0, -9.0), 18.0),
            GPObservation((-5.5, -1.5), 16.0),
        )
        model = GPModel(obs, _hyper())
        state = BOState(observations=list(obs))
        f_best = state.best_psnr
        top = propose_candidates(model, state, box, k=1, rng=Rng(11))[0]
        top_ei = _ei_closed_form(model, np.array(top), f_best)
        assert top_ei > 0.0
        (t_lo, t_hi), (s_lo, s_hi) = box.log_bounds()
        t_grid = np.linspace(t_lo, t_hi, 200)
        s_grid = np.linspace(s_lo, s_hi, 200)
        lattice = np.array([(t, s) for t in t_grid for s in s_grid])
        means, variances = model.posterior_batch(lattice)
        grid_best = max(
            expected_improvement(float(m), float(max(v, 0.0)), f_best)
            for m, v in zip(means, variances)
        )
        assert top_ei >= grid_best - 1e-9

    def test_mirror_symmetric_observations_give_mirror_proposals(self):
        # Two mirror pairs with distinct values make the twin EI maxima
        # isolated points, so the top-2 proposal set must be mirror-symmetric.
        box = SearchBox()
        (t_lo, t_hi), (s_lo, s_hi) = box.log_bounds()
        center_t = 0.5 * (t_lo + t_hi)
        center_s = 0.5 * (s_lo + s_hi)

        def mirror(q):
            return (2 * center_t - q[0], 2 * center_s - q[1])

        obs = []
        for q, y in (((-8.0, -4.0), 20.0), ((-12.0, -7.0), 14.0)):
            obs.append(GPObservation(q, y))
            obs.append(GPObservation(mirror(q), y))
        model = GPModel(tuple(obs), _hyper())
        state = BOState(observations=list(obs))
        for seed in (5, 11, 23):
            cands = propose_candidates(model, state, box, k=2, rng=Rng(seed))
            assert len(cands) == 2
            for cand in cands:
                mirrored = mirror(cand)
                nearest = min(
                    math.hypot(mirrored[0] - q[0], mirrored[1] - q[1]) for q in cands
                )
                assert nearest <= 1e-6

    def test_zero_ei_falls_back_to_max_variance(self, caplog):
        # A near-perfectly correlated box collapses the posterior variance
        # everywhere while the mean stays below the incumbent, so EI is
        # identically zero and the proposal must switch to pure exploration.
        box = SearchBox()
        hyper = _hyper(length=1e6, noise_var=1e-6)
        obs = (
            GPObservation((-8.0, -4.0), 10.0),
            GPObservation((-20.0, -16.0), 20.0),
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = GPModel(obs, hyper)
            state = BOState(observations=list(obs))
            with caplog.at_level(logging.WARNING, logger="coldpost.bo"):
                cands = propose_candidates(model, state, box, k=3, rng=Rng(7))
        assert len(cands) == 1
        assert any("falling back" in record.message for record in caplog.records)
        (t_lo, t_hi), (s_lo, s_hi) = box.log_bounds()
        assert t_lo <= cands[0][0] <= t_hi
        assert s_lo <= cands[0][1] <= s_hi


class TestBOState:
    def test_best_psnr_requires_observations(self):
        with pytest.raises(ValueError, match="no successful observations"):
            BOState().best_psnr

    def test_best_point_tracks_argmax(self):
        state = BOState()
        state.observations.append(GPObservation((-5.0, -3.0), 18.0))
        state.observations.append(GPObservation((-7.0, -6.0), 23.0))
        state.observations.append(GPObservation((-9.0, -2.0), 21.0))
        assert state.best_psnr == 23.0
        t, sigma = state.best_point
        assert math.isclose(math.log(t), -7.0, rel_tol=1e-15)
        assert math.isclose(math.log(sigma), -6.0, rel_tol=1e-15)


class TestBoLoopValidation:
    def test_rejects_bad_arguments(self):
        box = SearchBox()
        with pytest.raises(ValueError, match="iterations"):
            bo_loop(_quadratic, box, default_init_grid(), iterations=-1, k=4, rng=Rng(0))
        with pytest.raises(ValueError, match="k >= 1"):
            bo_loop(_quadratic, box, default_init_grid(), iterations=1, k=0, rng=Rng(0))
        with pytest.raises(ValueError, match="non-empty"):
            bo_loop(_quadratic, box, [], iterations=1, k=4, rng=Rng(0))
        with pytest.raises(ValueError, match="outside the search box"):
            bo_loop(_quadratic, box, [(1.0, 0.5)], iterations=1, k=4, rng=Rng(0))


class TestBoLoopFailures:
    def test_failed_candidates_recorded_and_skipped(self):
        def flaky(t, sigma):
            if t > 1e-5:
                raise RuntimeError("boom")
            return 20.0 - abs(math.log(t) + 7.0)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state, _ = bo_loop(
                flaky, SearchBox(), default_init_grid(), iterations=1, k=2, rng=Rng(0)
            )
        init_rows = [row for row in state.rows if row.iteration == 0]
        assert [row.status for row in init_rows] == ["ok", "ok", "failed", "failed"]
        for row in init_rows:
            if row.status == "failed":
                assert row.psnr is None
        assert len(state.observations) == sum(1 for r in state.rows if r.status == "ok")

    def test_aborts_when_init_fails_entirely(self):
        def broken(t, sigma):
            raise RuntimeError("nope")

        with pytest.raises(RuntimeError, match="all initialization evaluations failed"):
            bo_loop(broken, SearchBox(), default_init_grid(), iterations=1, k=2, rng=Rng(0))

    def test_aborts_when_iteration_fails_entirely(self):
        calls = {"n": 0}

        def fails_later(t, sigma):
            calls["n"] += 1
            if calls["n"] <= 4:
                return 15.0 + calls["n"]
            raise RuntimeError("later")

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(RuntimeError, match="iteration 1"):
                bo_loop(
                    fails_later, SearchBox(), default_init_grid(), iterations=2, k=2, rng=Rng(0)
                )


class TestBoLoopBehavior:
    def test_constant_objective(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state, best = bo_loop(
                lambda t, s: 17.25, SearchBox(), default_init_grid(), iterations=2, k=2, rng=Rng(1)
            )
        assert state.best_psnr == 17.25
        box = SearchBox()
        assert all(box.contains(row.t, row.sigma) for row in state.rows)
        assert box.contains(*best)

    def test_parallel_matches_serial(self):
        kwargs = dict(
            box=SearchBox(), init=default_init_grid(), iterations=1, k=2, rng=Rng(6)
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            serial, best_serial = bo_loop(_quadratic, parallel=1, **kwargs)
            kwargs["rng"] = Rng(6)
            threaded, best_threaded = bo_loop(_quadratic, parallel=2, **kwargs)
        assert serial.rows == threaded.rows
        assert best_serial == best_threaded

    def test_finds_synthetic_optimum(self, quadratic_runs):
        # Spec'd competence budget: within 0.3 log-units of the optimum after
        # <= 8 iterations of k=4 on at least 9 of 10 seeds.
        hits = 0
        for _, state, _ in quadratic_runs:
            early = [
                row for row in state.rows if row.iteration <= 8 and row.status == "ok"
            ]
            best = max(early, key=lambda row: row.psnr)
            distance = math.hypot(
                best.log_t - _OPT_LOG_T, best.log_sigma - _OPT_LOG_SIGMA
            )
            hits += distance <= 0.3
        assert hits >= 9

    def test_beats_random_search(self, quadratic_runs):
        bo_regrets = []
        random_regrets = []
        (t_lo, t_hi), (s_lo, s_hi) = SearchBox().log_bounds()
        for seed, state, _ in quadratic_runs:
            assert len(state.observations) <= 40
            bo_regrets.append(_OPT_VALUE - state.best_psnr)
            sampler = np.random.default_rng(seed)
            log_t = sampler.uniform(t_lo, t_hi, 40)
            log_s = sampler.uniform(s_lo, s_hi, 40)
            values = [
                _quadratic(math.exp(a), math.exp(b)) for a, b in zip(log_t, log_s)
            ]
            random_regrets.append(_OPT_VALUE - max(values))
        assert np.median(bo_regrets) <= np.median(random_regrets)

    def test_incumbent_monotone(self, quadratic_runs):
        for _, state, _ in quadratic_runs:
            bests = [
                row.best_psnr_so_far
                for row in state.rows
                if row.best_psnr_so_far is not None
            ]
            assert all(b >= a for a, b in zip(bests, bests[1:]))

    def test_every_evaluation_inside_box(self, quadratic_runs):
        box = SearchBox()
        for _, state, best in quadratic_runs:
            assert all(box.contains(row.t, row.sigma) for row in state.rows)
            assert box.contains(*best)

    def test_best_point_matches_best_row(self, quadratic_runs):
        for _, state, best in quadratic_runs:
            top = max(
                (row for row in state.rows if row.status == "ok"),
                key=lambda row: row.psnr,
            )
            assert math.isclose(best[0], top.t, rel_tol=1e-12)
            assert math.isclose(best[1], top.sigma, rel_tol=1e-12)
            assert state.best_psnr == top.psnr


class TestReplayAndArtifacts:
    def test_bit_identical_replay(self, tmp_path):
        first_dir = tmp_path / "a"
        second_dir = tmp_path / "b"
        first_dir.mkdir()
        second_dir.mkdir()
        states = []
        for out in (first_dir, second_dir):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                state, _ = bo_loop(
                    _quadratic,
                    SearchBox(),
                    default_init_grid(),
                    iterations=2,
                    k=2,
                    rng=Rng(3),
                    artifacts_dir=out,
                )
            states.append(state)
        assert states[0].rows == states[1].rows
        first_csv = (first_dir / "bo_history.csv").read_bytes()
        second_csv = (second_dir / "bo_history.csv").read_bytes()
        assert first_csv == second_csv
        for name in ("gp_landscape_01.csv", "gp_landscape_02.csv"):
            assert (first_dir / name).read_bytes() == (second_dir / name).read_bytes()

    def test_history_csv_format(self, tmp_path):
        def flaky(t, sigma):
            if sigma > 1e-3:
                raise RuntimeError("boom")
            return 16.0

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state, _ = bo_loop(
                flaky, SearchBox(), default_init_grid(), iterations=1, k=2, rng=Rng(4)
            )
        path = tmp_path / "bo_history.csv"
        write_bo_history_csv(state.rows, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "iteration",
            "candidate_index",
            "T",
            "sigma",
            "log_T",
            "log_sigma",
            "psnr",
            "best_psnr_so_far",
            "status",
        ]
        assert len(rows) == 1 + len(state.rows)
        for text, row in zip(rows[1:], state.rows):
            assert int(text[0]) == row.iteration
            assert float(text[2]) == row.t
            assert float(text[4]) == row.log_t
            if row.status == "failed":
                assert text[6] == ""
            else:
                assert float(text[6]) == row.psnr
            assert text[8] == row.status

    def test_landscape_artifacts_written(self, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bo_loop(
                _quadratic,
                SearchBox(),
                default_init_grid(),
                iterations=1,
                k=1,
                rng=Rng(5),
                artifacts_dir=tmp_path,
            )
        landscape = tmp_path / "gp_landscape_01.csv"
        assert landscape.exists()
        with open(landscape, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 60 * 60
        assert (tmp_path / "bo_history.csv").exists()
