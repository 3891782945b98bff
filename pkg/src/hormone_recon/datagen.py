"""
Synthetic cohorts of daily hormone series.

Each individual draws an (ovulation day, cycle length) pair from a bivariate
Gaussian fitted to self-tracked cycles and is rendered as a strictly periodic
sum of phase-anchored Gaussian bumps on a normalized cycle clock.

Day convention: days are 1-based. Cycle ``c`` of an individual with cycle
length ``L`` covers the days in ``(c*L, (c+1)*L]`` and its ovulation (LH
peak) falls on the continuous time ``c*L + ovulation_day``.
"""

from dataclasses import dataclass, field

import numpy as np

from .hormones import HORMONE_NAMES, N_HORMONES, T_DAYS, Hormone

MAX_REJECTIONS = 10_000
MIN_CYCLE_LENGTH = 21.0
MAX_CYCLE_LENGTH = 45.0
MIN_PHASE_MARGIN = 3.0


class DegeneratePopulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PopulationGaussian:
    """Joint distribution of (ovulation day, cycle length) in days."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T):
            raise ValueError("population covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("population covariance must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class CycleCharacteristics:
    ovulation_day: float
    cycle_length: float

    def is_valid(self, max_cycle_length=MAX_CYCLE_LENGTH):
        return (
            MIN_CYCLE_LENGTH <= self.cycle_length <= max_cycle_length
            and MIN_PHASE_MARGIN <= self.ovulation_day <= self.cycle_length - MIN_PHASE_MARGIN
        )

    @property
    def ovulation_phase(self):
        return self.ovulation_day / self.cycle_length


@dataclass(frozen=True)
class Bump:
    """Gaussian bump on the normalized cycle clock.

    The center is ``center + ovulation_weight * u_ov`` where ``u_ov`` is the
    ovulation phase, so bumps can be pinned to cycle start, to ovulation, or
    to the middle of the luteal phase (``0.5 + 0.5 * u_ov``).
    """

    center: float
    ovulation_weight: float
    width: float
    amplitude: float

    def phase(self, ovulation_phase):
        return self.center + self.ovulation_weight * ovulation_phase


def _default_bumps():
    midluteal = dict(center=0.5, ovulation_weight=0.5)
    return {
        Hormone.E: (
            Bump(center=-0.08, ovulation_weight=1.0, width=0.04, amplitude=180.0),
            Bump(**midluteal, width=0.10, amplitude=100.0),
        ),
        Hormone.P: (Bump(**midluteal, width=0.12, amplitude=12.0),),
        Hormone.Ih: (Bump(**midluteal, width=0.12, amplitude=45.0),),
        Hormone.FSH: (
            Bump(center=0.0, ovulation_weight=1.0, width=0.03, amplitude=9.0),
            Bump(center=0.05, ovulation_weight=0.0, width=0.04, amplitude=4.0),
        ),
        Hormone.LH: (Bump(center=0.0, ovulation_weight=1.0, width=0.015, amplitude=40.0),),
    }


@dataclass(frozen=True)
class Waveform:
    """Per-hormone baselines and bump shapes, in raw hormone units.

    ``jitter`` is the standard deviation of the per-individual lognormal
    multiplier applied to every bump amplitude and width (0.1 gives roughly
    +/-10% variation).
    """

    baselines: tuple = (40.0, 0.5, 5.0, 5.0, 4.0)
    bumps: dict = field(default_factory=_default_bumps)
    jitter: float = 0.1

    def to_dict(self):
        return {
            "baselines": list(self.baselines),
            "jitter": self.jitter,
            "bumps": {
                HORMONE_NAMES[h]: [vars(b) for b in self.bumps[h]] for h in sorted(self.bumps)
            },
        }

    @classmethod
    def from_dict(cls, data):
        bumps = {
            Hormone[name]: tuple(Bump(**b) for b in items) for name, items in data["bumps"].items()
        }
        return cls(baselines=tuple(data["baselines"]), bumps=bumps, jitter=data["jitter"])


@dataclass
class IndividualSeries:
    id: str
    values: np.ndarray  # (5, T) raw units
    characteristics: CycleCharacteristics
    ovulation_days: list
    T: int = T_DAYS

    @property
    def days(self):
        return np.arange(1, self.T + 1)


def default_population_gaussian():
    """Gaussian approximation of the (ovulation day, cycle length) density."""
    return PopulationGaussian(mean=[15.5, 29.1], cov=[[25.5, 8.0], [8.0, 12.6]])


def sample_characteristics(pop, rng, max_cycle_length=MAX_CYCLE_LENGTH):
    """Draw one valid (ovulation day, cycle length) pair by rejection.

    Parameters
    ----------
    pop : PopulationGaussian
    rng : numpy.random.Generator
    max_cycle_length : float
        Upper rejection bound on the cycle length.

    Raises
    ------
    DegeneratePopulationError
        If no valid pair is found within ``MAX_REJECTIONS`` draws.
    """
    # eigh-based square root tolerates the degenerate zero-covariance case
    w, Q = np.linalg.eigh(pop.cov)
    root = Q * np.sqrt(np.clip(w, 0.0, None))
    for _ in range(MAX_REJECTIONS):
        ov, length = pop.mean + root @ rng.standard_normal(2)
        chars = CycleCharacteristics(float(ov), float(length))
        if chars.is_valid(max_cycle_length):
            return chars
    raise DegeneratePopulationError(
        f"no valid cycle characteristics after {MAX_REJECTIONS} draws from mean={pop.mean}"
    )


def cycle_bounds(chars, T=T_DAYS):
    """Integer (first, last) day of every cycle that starts within [1, T]."""
    L = chars.cycle_length
    bounds = []
    c = 0
    while np.floor(c * L) + 1 <= T:
        bounds.append((int(np.floor(c * L)) + 1, int(np.floor((c + 1) * L))))
        c += 1
    return bounds


def render_waveform(chars, wave, days, amp_scale=None, width_scale=None):
    """Evaluate the noise-free hormone curves at (possibly fractional) days.

    ``amp_scale`` and ``width_scale`` map hormone -> per-bump multipliers.
    """
    days = np.asarray(days, dtype=float)
    L = chars.cycle_length
    u_ov = chars.ovulation_phase
    n_cycles = int(np.ceil(days.max() / L)) + 2
    cycles = np.arange(-1, n_cycles)
    out = np.empty((N_HORMONES, days.size))
    for h in range(N_HORMONES):
        row = np.full(days.size, wave.baselines[h], dtype=float)
        for j, bump in enumerate(wave.bumps[Hormone(h)]):
            a = bump.amplitude * (amp_scale[h][j] if amp_scale else 1.0)
            s = bump.width * L * (width_scale[h][j] if width_scale else 1.0)
            centers = (cycles + bump.phase(u_ov)) * L
            z = (days[:, None] - centers[None, :]) / s
            row += a * np.exp(-0.5 * z * z).sum(axis=1)
        out[h] = row
    return out


def generate_series(chars, wave, rng, individual_id="0", T=T_DAYS):
    """Render one individual's ground-truth daily hormone matrix.

    The per-individual jitter multipliers are always drawn from ``rng`` (so
    the stream position does not depend on ``wave.jitter``) and scaled by
    ``wave.jitter``.
    """
    amp_scale, width_scale = {}, {}
    for h in range(N_HORMONES):
        n = len(wave.bumps[Hormone(h)])
        z = rng.standard_normal((2, n))
        amp_scale[h] = np.exp(wave.jitter * z[0])
        width_scale[h] = np.exp(wave.jitter * z[1])
    days = np.arange(1, T + 1)
    values = render_waveform(chars, wave, days, amp_scale, width_scale)

    L = chars.cycle_length
    lh = values[Hormone.LH]
    ovulation_days = []
    c = 0
    while True:
        center = c * L + chars.ovulation_day
        if int(np.floor(center + 0.5)) > T:
            break
        # the sampled day closest to the peak; neighbouring tails break exact half-day ties
        around = [d for d in (int(np.floor(center)), int(np.floor(center)) + 1) if 1 <= d <= T]
        ovulation_days.append(max(around, key=lambda d: lh[d - 1]))
        c += 1
    return IndividualSeries(
        id=str(individual_id),
        values=values,
        characteristics=chars,
        ovulation_days=ovulation_days,
        T=T,
    )


def individual_rng(seed, k):
    """Independent random stream for individual ``k`` of a cohort seeded by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(k)]))


def generate_cohort(n, pop=None, wave=None, seed=0, T=T_DAYS):
    """Generate ``n`` independent individuals; cohorts are prefix-stable in ``n``.

    Cycle lengths are additionally capped at ``T / 3`` so that every
    individual contains at least three full cycles.
    """
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    pop = default_population_gaussian() if pop is None else pop
    wave = Waveform() if wave is None else wave
    cap = min(MAX_CYCLE_LENGTH, T / 3.0)
    cohort = []
    for k in range(n):
        rng = individual_rng(seed, k)
        chars = sample_characteristics(pop, rng, max_cycle_length=cap)
        cohort.append(generate_series(chars, wave, rng, individual_id=f"ind{k:03d}", T=T))
    return cohort


def lh_peak_days(series, within=(1, T_DAYS)):
    """Day of maximum LH for every cycle fully contained in ``within``."""
    lo, hi = within
    if lo < 1 or hi > series.T or lo > hi:
        raise ValueError(f"day range {within} outside [1, {series.T}]")
    lh = series.values[Hormone.LH]
    peaks = []
    for first, last in cycle_bounds(series.characteristics, series.T):
        if first >= lo and last <= hi:
            peaks.append(int(first + np.argmax(lh[first - 1 : last])))
    return peaks
