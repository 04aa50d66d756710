"""Variance schedules, timestep subsequences, and per-transition coefficients.

Conventions used throughout the package:

* Natural timesteps run t = 1..T and map to array index t - 1.  The
  virtual index t = 0 sits below the last transition and carries
  signal product 1, so the final step lands on a fully denoised state.
* ``alpha_bars[t-1]`` is the running product of (1 - beta_s) for s <= t.
* A transition from t to its predecessor t_prev mixes the current state,
  the predicted noise, and an optional fresh draw:

      sigma(t) = eta * sqrt((1 - a_prev) / (1 - a_t)) * sqrt(1 - a_t / a_prev)
      c1(t)    = sqrt(1 - a_prev - sigma(t)^2) - sqrt(a_prev * (1 - a_t) / a_t)

  with a_t = alpha_bar(t) and a_prev = alpha_bar(t_prev).  eta = 0 gives
  the deterministic chain (sigma identically zero); eta = 1 recovers the
  ancestral sampler's noise level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericDomainError

#: Signal product assigned to the virtual timestep t = 0.
ALPHA_BAR_ZERO = 1.0

# Tolerance for rounding noise in the c1 radicand; for eta <= 1 the exact
# value is provably >= 0, so only a tiny negative from cancellation is
# forgiven here.  A genuinely negative radicand (eta > 1) still raises.
_RADICAND_SLACK = 1e-12


def sigma_for_pair(alpha_bar_prev: float, alpha_bar_t: float, eta: float) -> float:
    """Per-transition noise scale for an adjacent pair of signal products."""
    if eta == 0.0:
        return 0.0
    return (
        eta
        * math.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t))
        * math.sqrt(1.0 - alpha_bar_t / alpha_bar_prev)
    )


def c1_for_pair(alpha_bar_prev: float, alpha_bar_t: float, eta: float) -> float:
    """Coefficient multiplying the predicted noise in one transition."""
    s = sigma_for_pair(alpha_bar_prev, alpha_bar_t, eta)
    radicand = 1.0 - alpha_bar_prev - s * s
    if radicand < 0.0:
        if radicand < -_RADICAND_SLACK:
            raise NumericDomainError(
                f"negative radicand {radicand:.6g} in c1 "
                f"(alpha_bar_prev={alpha_bar_prev:.6g}, eta={eta:.6g}); "
                "eta > 1 exceeds the admissible noise level"
            )
        radicand = 0.0
    return math.sqrt(radicand) - math.sqrt(
        alpha_bar_prev * (1.0 - alpha_bar_t) / alpha_bar_t
    )


@dataclass(frozen=True)
class DiffusionSchedule:
    """Immutable variance schedule plus the run's noise scale eta."""

    betas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float
    eta: float = 0.0

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigError("betas must be a non-empty 1-d array")
        if alpha_bars.shape != betas.shape:
            raise ConfigError("alpha_bars must match betas in length")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ConfigError("every beta must lie in (0, 1)")
        if np.any(alpha_bars <= 0.0) or np.any(alpha_bars >= 1.0):
            raise ConfigError("every alpha_bar must lie in (0, 1)")
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ConfigError("alpha_bars must be strictly decreasing")
        # Cross-check the cumulative product against betas to 1e-12 relative.
        rebuilt = np.cumprod(1.0 - betas)
        if not np.allclose(alpha_bars, rebuilt, rtol=1e-12, atol=0.0):
            raise ConfigError("alpha_bars disagree with cumprod(1 - betas)")
        if self.eta < 0.0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        """Signal product at timestep t; t = 0 returns the boundary value 1."""
        if t == 0:
            return ALPHA_BAR_ZERO
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int, t_prev: int | None = None) -> float:
        """Noise scale of the transition from t down to t_prev (default t-1)."""
        if t_prev is None:
            t_prev = t - 1
        return sigma_for_pair(self.alpha_bar(t_prev), self.alpha_bar(t), self.eta)

    def c1(self, t: int, t_prev: int | None = None) -> float:
        """Predicted-noise coefficient of the transition from t to t_prev."""
        if t_prev is None:
            t_prev = t - 1
        return c1_for_pair(self.alpha_bar(t_prev), self.alpha_bar(t), self.eta)


def make_linear_beta_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    eta: float = 0.0,
) -> DiffusionSchedule:
    """Build a schedule whose betas interpolate linearly, endpoints included."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end:
        raise ConfigError(
            f"need 0 < beta_start <= beta_end, got beta_start={beta_start}, "
            f"beta_end={beta_end}"
        )
    if beta_end >= 1.0:
        raise ConfigError(f"beta_end must be < 1, got {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(
        betas=betas,
        alpha_bars=alpha_bars,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        eta=float(eta),
    )


@dataclass(frozen=True)
class TimestepSubsequence:
    """Strictly increasing selection of natural timesteps ending at <= T.

    ``requested_S`` keeps the length asked of select_subsequence; the
    quadratic rule may dedupe to fewer, and round-tripping a config needs
    the original request, not the deduped length.
    """

    indices: tuple[int, ...]
    kind: str
    requested_S: int

    def __post_init__(self) -> None:
        if len(self.indices) == 0:
            raise ConfigError("subsequence must select at least one timestep")
        if self.indices[0] < 1:
            raise ConfigError("subsequence indices must be >= 1")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ConfigError("subsequence indices must be strictly increasing")

    @property
    def S(self) -> int:
        return len(self.indices)


def select_subsequence(T: int, S: int, kind: str = "linear") -> TimestepSubsequence:
    """Pick S timesteps out of 1..T.

    ``linear`` spaces them evenly: tau_i = floor(T * i / S).  ``quadratic``
    concentrates steps near t = 0: tau_i = max(1, floor(T * i^2 / S^2)).
    Duplicates produced by the quadratic rule at small i are dropped, so the
    result may be shorter than S.
    """
    if not 1 <= S <= T:
        raise ConfigError(f"need 1 <= S <= T, got S={S}, T={T}")
    if kind == "linear":
        raw = [(T * i) // S for i in range(1, S + 1)]
    elif kind == "quadratic":
        raw = [max(1, (T * i * i) // (S * S)) for i in range(1, S + 1)]
    else:
        raise ConfigError(f"unknown subsequence kind '{kind}'")
    deduped: list[int] = []
    for tau in raw:
        if not deduped or tau > deduped[-1]:
            deduped.append(tau)
    return TimestepSubsequence(indices=tuple(deduped), kind=kind, requested_S=S)


def identity_subsequence(T: int) -> TimestepSubsequence:
    """The full chain 1..T as a subsequence."""
    return TimestepSubsequence(
        indices=tuple(range(1, T + 1)), kind="linear", requested_S=T
    )


def schedule_config(
    schedule: DiffusionSchedule, subsequence: TimestepSubsequence
) -> dict:
    """JSON-ready description of a schedule plus its subsequence."""
    return {
        "T": schedule.T,
        "beta_start": schedule.beta_start,
        "beta_end": schedule.beta_end,
        "eta": schedule.eta,
        "subsequence": {"kind": subsequence.kind, "S": subsequence.requested_S},
    }


def schedule_from_config(cfg: dict) -> tuple[DiffusionSchedule, TimestepSubsequence]:
    """Rebuild (schedule, subsequence) from a dict written by schedule_config."""
    from .errors import ParseError

    for key in ("T", "beta_start", "beta_end", "eta", "subsequence"):
        if key not in cfg:
            raise ParseError(f"schedule config missing field '{key}'")
    sub_cfg = cfg["subsequence"]
    for key in ("kind", "S"):
        if key not in sub_cfg:
            raise ParseError(f"schedule config missing field 'subsequence.{key}'")
    schedule = make_linear_beta_schedule(
        int(cfg["T"]),
        float(cfg["beta_start"]),
        float(cfg["beta_end"]),
        eta=float(cfg["eta"]),
    )
    sub = select_subsequence(schedule.T, int(sub_cfg["S"]), str(sub_cfg["kind"]))
    return schedule, sub
