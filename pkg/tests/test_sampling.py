import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from hormone_recon import mgp, sampling
from hormone_recon.datagen import CycleCharacteristics, Waveform, generate_cohort, generate_series, lh_peak_days
from hormone_recon.evaluation import fit_scaler
from hormone_recon.hormones import OBS_WINDOW
from hormone_recon.sampling import CohortMember, NormalizedSchedule, Schedule, expected_distance

FAST = mgp.FitConfig(iterations=5, restarts=1, seed=3)


def psi_oracle(delta, sigma):
    """E|delta - sigma * eps| written out from the folded-normal mean."""
    if sigma == 0:
        return abs(delta)
    r = delta / sigma
    return sigma * math.sqrt(2 / math.pi) * math.exp(-r * r / 2) + delta * (1 - 2 * norm.cdf(-r))


# -- expected distance ---------------------------------------------------------


def test_expected_distance_anchors():
    assert expected_distance(0.0, 0.0, 1.0) == pytest.approx(2 / math.sqrt(2 * math.pi), rel=1e-14)
    assert expected_distance(0.0, 0.0, 1.0) == pytest.approx(0.79788, abs=1e-5)
    assert expected_distance(0.5, 0.0, 0.0) == 0.5
    assert expected_distance(-0.5, 0.0, 0.0) == 0.5
    with pytest.raises(ValueError):
        expected_distance(0.0, 0.0, -1.0)


def test_expected_distance_monte_carlo():
    eps = np.random.default_rng(0).standard_normal(1_000_000)
    mc = np.mean(np.abs(1.0 - 2.0 * eps))
    assert expected_distance(1.0, 0.0, 2.0) == pytest.approx(mc, rel=0.01)


@settings(max_examples=100, deadline=None)
@given(delta=st.floats(-10, 10), sigma=st.floats(0, 10))
def test_expected_distance_matches_folded_normal(delta, sigma):
    psi = expected_distance(delta, 0.0, sigma)
    assert psi >= 0.0
    assert psi >= abs(delta) - 1e-12  # Jensen
    assert psi == pytest.approx(psi_oracle(delta, sigma), rel=1e-9, abs=1e-12)


def test_expected_distance_monotone_in_sigma():
    sig = np.linspace(0, 5, 200)
    for delta in np.linspace(-3, 3, 13):
        psi = expected_distance(delta, 0.0, sig)
        assert np.all(np.diff(psi) >= -1e-12)


def test_expected_distance_limits():
    for delta in (-1.0, 0.3, 2.0):
        assert expected_distance(delta, 0.0, 1e-9) == pytest.approx(abs(delta), abs=1e-9)
        big = 1e4
        assert expected_distance(delta, 0.0, big) / (big * math.sqrt(2 / math.pi)) == pytest.approx(1.0, abs=1e-6)


def test_expected_distance_broadcasts():
    out = expected_distance(np.zeros((2, 3)), 0.0, np.array([0.0, 1.0, 2.0]))
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out[0], [0.0, 2 * norm.pdf(0), 4 * norm.pdf(0)])


# -- candidate phases ------------------------------------------------------------


def test_candidates_and_phase_mapping():
    c = sampling.candidate_phases()
    assert len(c) == 70 and len(set(c)) == 70
    assert c[0] == (0, 0.0) and c[-1] == (1, 34 / 35)
    assert sampling.phase_to_day((0, 0.5), 30) == 15
    assert sampling.phase_to_day((1, 0.5), 30) == 45


# -- population ED -----------------------------------------------------------------


def _member(truth, L, mean, std, seeds=(1, 2)):
    return CohortMember(id="x", truth=truth, cycle_length=L, seed_days=seeds, mean=mean, std=std)


def test_population_ed_single_individual():
    rng = np.random.default_rng(1)
    truth = rng.standard_normal((5, 105))
    mean, std = rng.standard_normal((5, 70)), rng.uniform(0.1, 1, (5, 70))
    m = _member(truth, 30.0, mean, std)
    cands = [(0, 0.5), (1, 0.2)]
    scores = sampling.population_ed([m], cands)
    for j, ph in enumerate(cands):
        day = sampling.phase_to_day(ph, 30.0)
        expected = sum(psi_oracle(truth[h, day - 1] - mean[h, day - 1], std[h, day - 1]) for h in range(5))
        assert scores[j] == pytest.approx(expected, rel=1e-10)


def test_population_ed_manual_two_by_two():
    # two individuals, one informative hormone each, two candidate days
    truth = np.zeros((5, 105))
    mean = np.zeros((5, 70))
    std = np.zeros((5, 70))
    a = _member(truth.copy(), 20.0, mean.copy(), std.copy())
    b = _member(truth.copy(), 30.0, mean.copy(), std.copy())
    # candidate (0, 0.5) -> day 10 for a, day 15 for b; (1, 0.0) -> day 20 for a, day 30 for b
    a.truth[0, 9], a.truth[0, 19] = 1.0, 0.0
    b.truth[4, 14], b.truth[4, 29] = -2.0, 0.5
    a.std[0, 19] = 1.0
    scores = sampling.population_ed([a, b], [(0, 0.5), (1, 0.0)])
    np.testing.assert_allclose(scores, [1.0 + 2.0, 2 / math.sqrt(2 * math.pi) + 0.5], rtol=1e-12)


def test_population_ed_duplicate_doubles():
    rng = np.random.default_rng(2)
    ms = [_member(rng.standard_normal((5, 105)), L, rng.standard_normal((5, 70)), rng.uniform(0, 1, (5, 70)))
          for L in (24.0, 31.0)]
    cands = sampling.candidate_phases()
    s1 = sampling.population_ed(ms, cands)
    s2 = sampling.population_ed(ms + ms, cands)
    np.testing.assert_allclose(s2, 2 * s1, rtol=1e-12)
    assert np.nanargmax(s1) == np.nanargmax(s2)


def test_population_ed_skips_out_of_window():
    m = _member(np.zeros((5, 105)), 35.5, np.zeros((5, 70)), np.ones((5, 70)))
    # (1, 0.99) lands on day 71 when the cycle is 35.5 days long
    s = sampling.population_ed([m], [(1, 0.99), (1, 0.5)])
    assert np.isnan(s[0]) and np.isfinite(s[1])


# -- greedy ED -------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_cohort():
    cohort = generate_cohort(3, seed=11)
    scaler = fit_scaler(cohort)
    return cohort, scaler


def _members(cohort, scaler, n=None):
    return [
        CohortMember(
            id=s.id,
            truth=scaler.apply(s.values),
            cycle_length=s.characteristics.cycle_length,
            seed_days=tuple(lh_peak_days(s, OBS_WINDOW)[:2]),
        )
        for s in cohort[:n]
    ]


def test_ed_budget_equal_to_seeds(toy_cohort):
    t = sampling.ed_greedy(_members(*toy_cohort), 2, fit_config=FAST)
    assert t.phases == () and t.budget == 2


def test_ed_one_step_matches_sweep(toy_cohort):
    cohort, scaler = toy_cohort
    members = _members(cohort, scaler, 2)
    t = sampling.ed_greedy(members, 3, fit_config=FAST)
    # independent sweep: refit on the seeds, score every candidate by hand
    cands = sampling.candidate_phases()
    scores = np.zeros(len(cands))
    for k, m in enumerate(_members(cohort, scaler, 2)):
        obs = mgp.ObservationSet.from_series(m.truth, m.seed_days)
        hyper = mgp.fit(obs, mgp.BLOCKWISE, config=sampling._member_fit_config(FAST, k), period=m.cycle_length)
        mean, var = mgp.posterior_marginals(hyper, obs, np.arange(1, 71))
        for j, ph in enumerate(cands):
            day = sampling.phase_to_day(ph, m.cycle_length)
            if not 1 <= day <= 70:
                scores[j] = np.nan
                continue
            scores[j] += sum(psi_oracle(m.truth[h, day - 1] - mean[h, day - 1], math.sqrt(var[h, day - 1]))
                             for h in range(5))
    assert t.phases == (cands[int(np.nanargmax(scores))],)
    assert t.scores[0] == pytest.approx(np.nanmax(scores), rel=1e-9)


def test_ed_budget_ten(toy_cohort):
    cohort, scaler = toy_cohort
    t = sampling.ed_greedy(_members(cohort, scaler), 10, fit_config=FAST)
    assert t.budget == 10 and len(set(t.phases)) == 8
    assert t.fitted_on == tuple(s.id for s in cohort)
    for s in cohort:
        sched = sampling.materialize(t, s)
        assert len(sched.days) == 10 and len(set(sched.days)) == 10
        assert set(lh_peak_days(s, OBS_WINDOW)[:2]) <= set(sched.days)
        assert all(1 <= d <= 70 for d in sched.days)
    again = sampling.ed_greedy(_members(cohort, scaler), 10, fit_config=FAST)
    assert again.phases == t.phases
    # prefix property: a smaller budget is the truncated greedy path
    assert t.truncate(5).phases == t.phases[:3]


def test_ed_budget_errors(toy_cohort):
    with pytest.raises(ValueError):
        sampling.ed_greedy(_members(*toy_cohort), 71, fit_config=FAST)
    with pytest.raises(ValueError):
        sampling.ed_greedy(_members(*toy_cohort), 1, fit_config=FAST)


# -- random schedules --------------------------------------------------------------


def test_random_schedule_contracts():
    rng = np.random.default_rng(0)
    assert sampling.random_schedule(2, (1, 70), [15, 44], rng).days == (15, 44)
    assert sampling.random_schedule(70, (1, 70), [15, 44], rng).days == tuple(range(1, 71))
    s = sampling.random_schedule(10, (1, 70), [15, 44], rng)
    assert len(s.days) == 10 and {15, 44} <= set(s.days) and s.origin == "random"
    with pytest.raises(ValueError):
        sampling.random_schedule(71, (1, 70), [15, 44], rng)
    with pytest.raises(ValueError):
        sampling.random_schedule(10, (1, 70), [15, 80], rng)


def test_random_schedule_every_day_within_three_se():
    # the per-day 3 s.e. band covers each of the 68 days with probability 0.997
    rng = np.random.default_rng(7)
    n = 10_000
    counts = np.zeros(71)
    for _ in range(n):
        counts[list(sampling.random_schedule(10, (1, 70), [15, 44], rng).days)] += 1
    p = 8 / 68
    se = math.sqrt(p * (1 - p) / n)
    others = np.delete(counts[1:], [14, 43]) / n
    assert np.all(np.abs(others - p) < 3 * se)


# -- schedules and materialization -------------------------------------------------


def test_schedule_invariants():
    assert Schedule((5, 1, 3), 3, "random").days == (1, 3, 5)
    with pytest.raises(ValueError):
        Schedule((1, 1, 3), 3, "random")
    with pytest.raises(ValueError):
        Schedule((1, 3), 3, "random")
    with pytest.raises(ValueError):
        NormalizedSchedule(((0, 1.0),))
    with pytest.raises(ValueError):
        NormalizedSchedule(((0, 0.5), (0, 0.5)))
    with pytest.raises(ValueError):
        NormalizedSchedule(((0, 0.5),)).truncate(4)


def test_materialize_collisions_take_nearest_free_day():
    days = sampling.materialize_days([15, 44], [(0, 0.5), (0, 15 / 30)], 30.0)
    # day 15 is a seed: the first phase takes 14 (backward first), the second 16
    assert days == (14, 15, 16, 44)
    assert sampling.materialize_days([10, 11], [(0, 0.5)], 20.0) == (9, 10, 11)


def test_materialize_depends_on_cycle_length():
    template = NormalizedSchedule(((0, 0.2), (0, 0.7), (1, 0.3), (1, 0.6)), 2)
    a = generate_series(CycleCharacteristics(15.0, 29.0), Waveform(), np.random.default_rng(0))
    b = generate_series(CycleCharacteristics(18.0, 35.0), Waveform(), np.random.default_rng(0))
    sa, sb = sampling.materialize(template, a), sampling.materialize(template, b)
    assert sa.days != sb.days
    assert len(sa.days) == len(sb.days) == 6
    assert {15, 44} <= set(sa.days)
