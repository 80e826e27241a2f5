"""Pair heat-bath sampler for the canonical measure.

Each step picks a random pair ``(i, j)``, keeps ``s = eta_i + eta_j`` and
draws ``eta_i`` from the density proportional to
``exp(-V(x) - V(s - x))`` by inverse CDF on an adaptive grid; then
``eta_j = s - eta_i``.  Chains are advanced in lock step so the grid work
is vectorised across chains.
"""
from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .potential import PotentialSpec

logger = logging.getLogger(__name__)

MAGIC = b"SPGS"
FORMAT_VERSION = 1
COARSE_POINTS = 65
FINE_POINTS = 1024
LOG_DROP = 45.0
REPROJECT_EVERY = 10_000
PAIR_CHUNK = 2048


@dataclass
class SamplerConfig:
    chains: int = 4
    steps: int = 20_000          # pair updates per chain
    burn_in: int = 2_000
    thin: int = 10
    seed: int = 0
    gradient: str = "full"       # Dirichlet form used by the Rayleigh bound
    bootstrap: int = 100
    bootstrap_blocks: int = 20

    def __post_init__(self):
        if self.chains < 1 or self.steps < 1 or self.thin < 1:
            raise ValueError("chains, steps and thin must be positive")
        if self.burn_in < 0 or self.burn_in >= self.steps:
            raise ValueError("burn_in must lie in [0, steps)")


@dataclass
class ChainState:
    """State of one or more chains on the hyperplane ``sum eta = n rho``.

    ``eta`` has shape ``(chains, n)``.
    """

    eta: np.ndarray
    target_sum: float
    rng: np.random.Generator = field(repr=False)
    step_count: int = 0

    @property
    def n(self) -> int:
        return self.eta.shape[-1]

    def sum_error(self) -> float:
        return float(np.max(np.abs(self.eta.sum(axis=-1) - self.target_sum)))


def init_state(n: int, rho: float, seed: int, chains: int = 1) -> ChainState:
    """All sites at ``rho``; the random stream is fully determined by ``seed``."""
    if n < 2:
        raise ValueError("n must be >= 2")
    eta = np.full((chains, n), float(rho))
    return ChainState(eta, float(rho) * n, np.random.default_rng(np.random.SeedSequence(seed)))


def _pair_halfwidth(pot: PotentialSpec) -> float:
    # phi(a + y) + phi(a - y) - 2 phi(a) >= delta y^2, psi moves it by <= 4 |psi|
    if pot.delta > 0:
        return math.sqrt((LOG_DROP + 4.0 * pot.psi_sup + 5.0) / pot.delta)
    return math.nan


def _cdf_sample(x0: np.ndarray, h: np.ndarray, logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse CDF of the piecewise-linear density through ``exp(logp)``.

    Row ``r`` of ``logp`` holds values on the uniform grid ``x0[r] + k h[r]``.
    """
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    cdf = np.empty_like(p)
    cdf[:, 0] = 0.0
    np.cumsum(p[:, 1:] + p[:, :-1], axis=1, out=cdf[:, 1:])
    total = cdf[:, -1]
    if not np.all(np.isfinite(total)) or np.any(total <= 0):
        raise FloatingPointError("grid CDF normalisation failed")
    target = u * total
    k = np.clip(np.sum(cdf <= target[:, None], axis=1) - 1, 0, p.shape[1] - 2)
    rows = np.arange(p.shape[0])
    p0, p1 = p[rows, k], p[rows, k + 1]
    rem = target - cdf[rows, k]
    # cdf counts twice the cell area; solve p0 t + (p1 - p0) t^2 / 2 = rem / 2, t in [0, 1]
    a = p1 - p0
    disc = np.maximum(p0 * p0 + a * rem, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = rem / (p0 + np.sqrt(disc))
    t = np.clip(np.nan_to_num(t, nan=0.0), 0.0, 1.0)
    return x0 + (k + t) * h


def sample_pair(pot: PotentialSpec, s: np.ndarray, u: np.ndarray, halfwidth: Optional[float] = None) -> np.ndarray:
    """Draw ``x`` with density proportional to ``exp(-V(x) - V(s - x))`` for each ``s``.

    The density is even about ``s / 2``, so the grids are symmetric and each
    potential value is used twice.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if s.size > PAIR_CHUNK:
        return np.concatenate([sample_pair(pot, s[a:a + PAIR_CHUNK], u[a:a + PAIR_CHUNK], halfwidth)
                               for a in range(0, s.size, PAIR_CHUNK)])
    mid = 0.5 * s
    hw = _pair_halfwidth(pot) if halfwidth is None else halfwidth
    if not np.isfinite(hw):
        hw = 10.0
    for attempt in range(3):
        y = np.linspace(-hw, hw, COARSE_POINTS)
        v = pot.eval(mid[:, None] + y[None, :])
        lp = -(v + v[:, ::-1])
        lp -= lp.max(axis=1, keepdims=True)
        live = lp > -LOG_DROP
        if np.any(live[:, 0]) and attempt < 2:
            hw *= 4.0
            continue
        step = y[1] - y[0]
        half = COARSE_POINTS // 2
        # outermost live offset on the right half (the density is even)
        right = live[:, half:]
        reach = (right.shape[1] - 1 - np.argmax(right[:, ::-1], axis=1)) * step
        r = np.minimum(reach + step, hw)
        t = np.linspace(-1.0, 1.0, FINE_POINTS)
        vf = pot.eval(mid[:, None] + r[:, None] * t[None, :])
        try:
            return _cdf_sample(mid - r, 2.0 * r / (FINE_POINTS - 1), -(vf + vf[:, ::-1]), u)
        except FloatingPointError:
            if attempt == 2:
                raise
            hw *= 4.0
    raise RuntimeError("pair heat-bath grid failed")


def pair_heatbath_step(state: ChainState, pot: PotentialSpec) -> ChainState:
    """One pair update in every chain; the state is updated in place and returned."""
    c, n = state.eta.shape
    rng = state.rng
    i = rng.integers(0, n, size=c)
    j = (i + rng.integers(1, n, size=c)) % n
    u = rng.random(c)
    rows = np.arange(c)
    s = state.eta[rows, i] + state.eta[rows, j]
    x = sample_pair(pot, s, u)
    state.eta[rows, i] = x
    state.eta[rows, j] = s - x
    state.step_count += 1
    if state.step_count % REPROJECT_EVERY == 0:
        reproject(state)
    return state


def reproject(state: ChainState) -> None:
    drift = (state.eta.sum(axis=1) - state.target_sum) / state.n
    state.eta -= drift[:, None]


@dataclass
class ChainRun:
    samples: np.ndarray          # (chains, draws, n)
    state: ChainState
    config: SamplerConfig

    def summary(self) -> dict:
        x = self.samples
        site = x.reshape(x.shape[0], -1)
        means = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        tau = [integrated_autocorr(x[c, :, 0]) for c in range(x.shape[0])]
        return {"n": int(x.shape[2]), "chains": int(x.shape[0]), "draws": int(x.shape[1]),
                "site_means": means.tolist(), "site_variances": var.tolist(),
                "pooled_mean": float(site.mean()), "pooled_variance": float(site.var()),
                "autocorr_time_site0": float(np.mean(tau)),
                "max_sum_error": self.state.sum_error()}


def run_chains(pot: PotentialSpec, n: int, rho: float, cfg: SamplerConfig) -> ChainRun:
    """Run ``cfg.chains`` chains of ``cfg.steps`` pair updates and keep thinned draws."""
    state = init_state(n, rho, cfg.seed, cfg.chains)
    keep = []
    for t in range(cfg.steps):
        pair_heatbath_step(state, pot)
        if t >= cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0:
            keep.append(state.eta.copy())
    return ChainRun(np.stack(keep, axis=1), state, cfg)


def integrated_autocorr(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's automatic window."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = x.size
    if n < 4 or not np.any(x):
        return 1.0
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = 1.0
    for m in range(1, n):
        tau += 2.0 * acf[m]
        if m >= c * tau:
            break
    return max(tau, 1.0)


def split_rhat(x: np.ndarray) -> float:
    """Split-chain Gelman-Rubin statistic for draws of shape ``(chains, draws)``."""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    half = n // 2
    if half < 2:
        return math.nan
    parts = np.concatenate([x[:, :half], x[:, half:2 * half]], axis=0)
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = half * means.var(ddof=1)
    if w == 0:
        return 1.0
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


# -- binary sample files ----------------------------------------------------------

_HEADER = struct.Struct("<4sIIQ")


def write_samples(path: str, samples: np.ndarray) -> None:
    """Write ``(count, n)`` samples as little-endian float64 columns with an SPGS header."""
    samples = np.asarray(samples, dtype="<f8")
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-d array (count, n)")
    count, n = samples.shape
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, count))
        for col in range(n):
            fh.write(np.ascontiguousarray(samples[:, col]).tobytes())
    os.replace(tmp, path)


def read_samples(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("truncated SPGS header")
        magic, version, n, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError("not an SPGS file")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported SPGS version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * count:
        raise ValueError("SPGS payload size does not match the header")
    return data.reshape(n, count).T.copy()
