"""Overhead arithmetic, effective throughput, and trade-off sweeps."""

from __future__ import annotations

import math
import warnings
from dataclasses import replace

import numpy as np

from .errors import InvalidParameterError
from .protocol import Scenario, run_scenario


class OverheadClampWarning(UserWarning):
    """Training overhead reached or exceeded the whole resource budget."""


def pilot_overhead(T: int, K: int, L: int, d: int) -> int:
    """Total pilot symbols of T rounds with an even forward/backward split:
    2*T*K*L*d for K users per cell, L cells, d streams per user."""
    if min(T, K, L, d) < 0:
        raise InvalidParameterError("pilot_overhead arguments must be >= 0")
    return 2 * T * K * L * d


def effective_throughput(rate: float, T: int, gamma: float) -> float:
    """Sum rate discounted by training overhead, (1 - T*gamma) * rate.

    Clamps at zero (with a warning) once the training consumes the whole
    scheduling interval, so sweeps degrade gracefully.
    """
    if rate < 0:
        raise InvalidParameterError(f"rate must be >= 0, got {rate}")
    factor = 1.0 - T * gamma
    if factor <= 0.0:
        warnings.warn(
            f"T*gamma = {T * gamma:.3f} >= 1: training swallows the whole "
            "frame; effective throughput clamped to 0", OverheadClampWarning,
            stacklevel=2)
        return 0.0
    return factor * rate


def frame_budget(pilot_symbols_per_round: int, block_slots: int,
                 slot_symbols: int = 14, streams_per_symbol: int = 1) -> float:
    """Overhead fraction of one signaling round within a scheduling block of
    ``block_slots`` slots of ``slot_symbols`` OFDM symbols, when
    ``streams_per_symbol`` orthogonal pilots share each symbol."""
    if min(pilot_symbols_per_round, block_slots, slot_symbols,
           streams_per_symbol) <= 0:
        raise InvalidParameterError("frame_budget arguments must be positive")
    symbols = math.ceil(pilot_symbols_per_round / streams_per_symbol)
    return symbols / (block_slots * slot_symbols)


def sweep_iterations(scenario: Scenario, channel_factory, t_values,
                     drops: int):
    """Trade-off curve of mean rate and effective throughput over T.

    Runs every drop once at max(t_values) and reads the shorter-T points off
    the trace prefix (per-round randomness depends only on the round index,
    so a T-round run is an exact prefix of a longer run).  Per-drop channel
    seeds are shared across T by construction, giving paired comparisons.
    Returns ``(rows, argmax_T)``.
    """
    ts = sorted(set(int(t) for t in t_values))
    if len(ts) != len(list(t_values)):
        warnings.warn("duplicate T values removed from sweep", UserWarning,
                      stacklevel=2)
    if not ts:
        raise InvalidParameterError("t_values must not be empty")
    if min(ts) < 0:
        raise InvalidParameterError("T values must be >= 0")
    t_max = max(ts)

    rate = np.zeros((drops, len(ts)))
    eff = np.zeros((drops, len(ts)))
    for i in range(drops):
        channels = channel_factory(i)
        sc = replace(scenario, T=t_max,
                     seed=int(np.random.SeedSequence(
                         (scenario.seed, 0xB, i)).generate_state(1)[0]))
        trace = run_scenario(sc, channels)
        for j, t in enumerate(ts):
            rate[i, j] = trace.sum_rate[t]
            eff[i, j] = trace.eff_throughput[t]

    rows = []
    for j, t in enumerate(ts):
        rows.append({
            "strategy": scenario.strategy,
            "T": t,
            "gamma": scenario.gamma,
            "total_overhead": t * scenario.gamma,
            "mean_R": float(np.mean(rate[:, j])),
            "mean_eff_tput": float(np.mean(eff[:, j])),
            "p5": float(np.percentile(eff[:, j], 5)),
            "p95": float(np.percentile(eff[:, j], 95)),
        })
    argmax_t = ts[int(np.argmax([row["mean_eff_tput"] for row in rows]))]
    return rows, argmax_t
