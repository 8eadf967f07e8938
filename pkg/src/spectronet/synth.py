"""Synthetic LIBS-like data with known signal and noise components.

Every emitted shot is ``y = u_x + u_n``: the target signal ``u_x`` depends
only on the target's seed stream, the instrument noise ``u_n`` only on the
shot's seed stream. Noise is stationary and has a non-zero mean (a smooth
positive baseline scaled by a per-shot gain, plus white noise).

Component values are rounded to multiples of ``2**-32`` so that sums and
differences of signal and noise are exact in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .spectra import OXIDES, Dataset, SeedLike, Spectrum, rng_for

QUANTUM = 2.0 ** -32

WL_MIN, WL_MAX = 240.0, 905.0

# Composition map: oxide o collects the lines i with i % 8 == o.
#   wt%[o] = OXIDE_INTERCEPT[o] + OXIDE_SLOPE[o] * sum of those line amplitudes
OXIDE_INTERCEPT = np.array([40.0, 0.2, 8.0, 4.0, 1.0, 2.0, 1.0, 0.3])
OXIDE_SLOPE = np.array([6.0, 0.5, 3.0, 3.0, 2.5, 3.0, 1.0, 0.8])

# streams hanging off the dataset seed
_CATALOGUE, _TARGET, _SHOT = 0, 1, 2


def quantize(v) -> np.ndarray:
    return np.round(np.asarray(v, dtype=np.float64) / QUANTUM) * QUANTUM


def wavelength_grid(n: int) -> np.ndarray:
    return np.linspace(WL_MIN, WL_MAX, n)


@dataclass
class TargetProfile:
    peak_centers: np.ndarray
    peak_amplitudes: np.ndarray
    peak_widths: np.ndarray
    composition: np.ndarray = field(default_factory=lambda: OXIDE_INTERCEPT.copy())

    def __post_init__(self):
        self.peak_centers = np.asarray(self.peak_centers, dtype=np.float64)
        self.peak_amplitudes = np.asarray(self.peak_amplitudes, dtype=np.float64)
        self.peak_widths = np.asarray(self.peak_widths, dtype=np.float64)
        self.composition = np.asarray(self.composition, dtype=np.float64)
        if not (self.peak_centers.shape == self.peak_amplitudes.shape == self.peak_widths.shape):
            raise ValueError("peak centers, amplitudes and widths must have equal lengths")
        if np.any(self.peak_amplitudes < 0) or np.any(self.peak_widths <= 0):
            raise ValueError("amplitudes must be >= 0 and widths > 0")
        if self.composition.shape != (len(OXIDES),) or np.any(self.composition < 0):
            raise ValueError("composition must be 8 non-negative wt% values")


def default_baseline(grid: np.ndarray) -> np.ndarray:
    """Smooth positive baseline: a broad falling polynomial plus an exponential at the blue end."""
    t = (grid - grid[0]) / max(grid[-1] - grid[0], 1e-12)
    return 0.6 + 0.8 * (1.0 - t) ** 2 + 1.6 * np.exp(-t / 0.12)


@dataclass
class NoiseModel:
    baseline_profile: np.ndarray
    gain_sigma: float = 0.1
    white_sigma: float = 0.03

    def __post_init__(self):
        self.baseline_profile = np.asarray(self.baseline_profile, dtype=np.float64)
        if self.baseline_profile.ndim != 1 or not np.all(np.isfinite(self.baseline_profile)):
            raise ValueError("baseline_profile must be a finite 1-D vector")
        # on the same lattice as every noise draw, so the noise-free draw is the profile itself
        self.baseline_profile = quantize(self.baseline_profile)
        if not (np.isfinite(self.gain_sigma) and np.isfinite(self.white_sigma)):
            raise ValueError("noise scales must be finite")
        if self.gain_sigma < 0 or self.white_sigma < 0:
            raise ValueError("noise scales must be non-negative")

    @classmethod
    def default(cls, grid_size: int, gain_sigma: float = 0.1, white_sigma: float = 0.03) -> "NoiseModel":
        return cls(default_baseline(wavelength_grid(grid_size)), gain_sigma, white_sigma)


@dataclass
class SyntheticTruth:
    """Per-sample components, rows aligned with ``Dataset.samples``."""

    signal: np.ndarray
    noise: np.ndarray
    profiles: List[TargetProfile] = field(default_factory=list)


@dataclass(frozen=True)
class LineCatalogue:
    """Emission lines shared by every target: each target lights a random subset."""

    centers: np.ndarray
    widths: np.ndarray

    @classmethod
    def draw(cls, grid: np.ndarray, n_lines: int, rng: np.random.Generator) -> "LineCatalogue":
        step = (grid[-1] - grid[0]) / max(grid.size - 1, 1)
        margin = min(4, (grid.size - 1) // 2) * step  # keep lines off the edges, even on tiny grids
        lo, hi = grid[0] + margin, grid[-1] - margin
        centers = np.sort(rng.uniform(lo, hi, n_lines))
        widths = rng.uniform(0.8, 2.0, n_lines) * step
        return cls(centers, widths)


def gen_signal(p: TargetProfile, grid) -> np.ndarray:
    """Sum of Gaussian lines ``a * exp(-(x - c)^2 / (2 w^2))`` on ``grid``."""
    grid = np.asarray(grid, dtype=np.float64)
    out = np.zeros(grid.shape)
    for c, a, w in zip(p.peak_centers, p.peak_amplitudes, p.peak_widths):
        out += a * np.exp(-((grid - c) ** 2) / (2.0 * w * w))
    return quantize(out)


def gen_noise(nm: NoiseModel, seed: SeedLike) -> np.ndarray:
    """One shot of noise: ``baseline * (1 + g) + white_sigma * w``."""
    rng = rng_for(seed)
    g = rng.normal(0.0, nm.gain_sigma) if nm.gain_sigma > 0 else 0.0
    out = nm.baseline_profile * (1.0 + g)
    if nm.white_sigma > 0:
        out = out + nm.white_sigma * rng.standard_normal(nm.baseline_profile.size)
    return quantize(out)


def composition_of(amplitudes: np.ndarray) -> np.ndarray:
    """Affine oxide composition from per-catalogue-line amplitudes."""
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    sums = np.array([amplitudes[o::len(OXIDES)].sum() for o in range(len(OXIDES))])
    return OXIDE_INTERCEPT + OXIDE_SLOPE * sums


def draw_profile(catalogue: LineCatalogue, rng: np.random.Generator, p_active: float = 0.35,
                 amp_range: Tuple[float, float] = (0.2, 2.0)) -> TargetProfile:
    n = catalogue.centers.size
    active = rng.random(n) < p_active
    amps = np.where(active, rng.uniform(*amp_range, n), 0.0)
    return TargetProfile(
        catalogue.centers[active], amps[active], catalogue.widths[active], composition_of(amps)
    )


def gen_dataset(n_targets: int, shots_per_target: int, locations: int, grid_size: int,
                nm: Optional[NoiseModel] = None, seed: int = 0, noise_seed: Optional[int] = None,
                n_lines: int = 48) -> Tuple[Dataset, SyntheticTruth]:
    """Draw targets, emit ``shots_per_target`` noisy shots each, keep the components.

    Shot ``s`` of a target is taken at location ``s % locations`` with
    shot index ``s // locations``. ``noise_seed`` (default ``seed``) drives
    only the noise; changing it leaves every ``u_x`` untouched.
    """
    for name, v in (("n_targets", n_targets), ("shots_per_target", shots_per_target),
                    ("locations", locations), ("grid_size", grid_size)):
        if int(v) < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    grid = wavelength_grid(grid_size)
    if grid_size < 2:
        raise ValueError(f"grid_size must be at least 2, got {grid_size}")
    nm = nm if nm is not None else NoiseModel.default(grid_size)
    if nm.baseline_profile.size != grid_size:
        raise ValueError(f"noise model has {nm.baseline_profile.size} bins, grid has {grid_size}")
    noise_seed = seed if noise_seed is None else noise_seed
    catalogue = LineCatalogue.draw(grid, n_lines, rng_for(seed, _CATALOGUE))
    width = len(str(n_targets - 1))
    samples, signal, noise, profiles, labels = [], [], [], [], {}
    for t in range(n_targets):
        profile = draw_profile(catalogue, rng_for(seed, _TARGET, t))
        profiles.append(profile)
        u_x = gen_signal(profile, grid)
        tid = f"T{t:0{width}d}"
        labels[tid] = profile.composition
        for s in range(shots_per_target):
            u_n = gen_noise(nm, np.random.SeedSequence(noise_seed, spawn_key=(_SHOT, t, s)))
            y = u_x + u_n
            samples.append(Spectrum(grid, y, tid, s % locations, s // locations, f"{tid}_{s}"))
            signal.append(u_x)
            noise.append(u_n)
    return Dataset(samples, grid, labels), SyntheticTruth(np.array(signal), np.array(noise), profiles)
