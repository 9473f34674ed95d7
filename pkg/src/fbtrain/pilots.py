"""Precoded pilot transmission, effective-CSI estimation, and direct
least-squares filter estimation.

Pilot sequences are ideal orthonormal codes: only the assignment of streams
to sequences and the sequence length matter.  Estimation noise enters as an
equivalent post-despreading Gaussian term of per-entry variance
noise_power / (seq_length * pilot_power); streams sharing a sequence
superpose into one contaminated estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import beamforming as bf
from .channel import ChannelSet
from .errors import (InfeasiblePlanError, InvalidParameterError,
                     SingularityError)


@dataclass(frozen=True)
class PilotPlan:
    """Assignment of stream indices to orthogonal pilot sequences."""

    seq_length: int
    assignment: np.ndarray      # (num_streams,) sequence index per stream
    pool_size: int
    pilot_power: float = 1.0

    def __post_init__(self):
        if self.pool_size < 1:
            raise InvalidParameterError(
                f"pool_size must be >= 1, got {self.pool_size}")
        if self.seq_length < self.pool_size:
            raise InvalidParameterError(
                f"seq_length {self.seq_length} cannot hold {self.pool_size} "
                "orthogonal sequences")
        if self.pilot_power <= 0:
            raise InvalidParameterError("pilot_power must be positive")

    @property
    def num_streams(self) -> int:
        return self.assignment.size

    @property
    def is_orthogonal(self) -> bool:
        return np.unique(self.assignment).size == self.num_streams

    def indicator(self) -> np.ndarray:
        """(num_streams, pool_size) 0/1 despreading map; cascades sharing a
        sequence land in the same estimate column."""
        out = np.zeros((self.num_streams, self.pool_size))
        out[np.arange(self.num_streams), self.assignment] = 1.0
        return out

    def estimation_noise_var(self, noise_power: float) -> float:
        return noise_power / (self.seq_length * self.pilot_power)


def allocate_pilots(num_streams: int, pool_size: int,
                    policy: str = "orthogonal", seq_length: int | None = None,
                    pilot_power: float = 1.0, seed: int = 0) -> PilotPlan:
    """Assign every stream a pilot sequence from a pool.

    ``orthogonal`` gives each stream its own sequence and requires
    pool_size >= num_streams; ``random_reuse`` draws assignments uniformly
    and causes pilot contamination whenever the pool is smaller than the
    stream count.
    """
    if pool_size < 1:
        raise InvalidParameterError(f"pool_size must be >= 1, got {pool_size}")
    if policy == "orthogonal":
        if pool_size < num_streams:
            raise InfeasiblePlanError(
                f"orthogonal allocation needs pool_size >= {num_streams}, "
                f"got {pool_size}")
        assignment = np.arange(num_streams)
    elif policy == "random_reuse":
        rng = np.random.default_rng(seed)
        assignment = rng.integers(0, pool_size, size=num_streams)
    else:
        raise InvalidParameterError(f"unknown pilot policy {policy!r}")
    return PilotPlan(seq_length=pool_size if seq_length is None else seq_length,
                     assignment=assignment, pool_size=pool_size,
                     pilot_power=pilot_power)


@dataclass
class EffectiveCsi:
    """Per-node estimated effective channels, one column per pilot sequence.

    ``estimates[node]`` has shape (node_antennas, pool_size); the estimate a
    node holds for stream s is the column ``plan.assignment[s]`` (shared, and
    contaminated, when sequences are reused).  ``weighted`` carries the
    second backward pilot block sqrt(weight) * cascade when weights travel
    over the air; ``backhaul_weights`` carries them error-free instead.
    """

    estimates: dict[tuple, np.ndarray]
    plan: PilotPlan
    noise_var: float
    weighted: dict[tuple, np.ndarray] | None = None
    backhaul_weights: np.ndarray | None = None

    def stream_estimate(self, node: tuple, stream: int) -> np.ndarray:
        return self.estimates[node][:, self.plan.assignment[stream]]


def _despread(tables: dict[tuple, np.ndarray], plan: PilotPlan,
              noise_var: float, rng: np.random.Generator) -> dict:
    """Superpose cascades per sequence and add estimation noise.

    Nodes are processed in sorted order so noise consumption is
    reproducible; zero variance adds no noise at all (exactness contract).
    """
    indicator = plan.indicator()
    out = {}
    for node in sorted(tables):
        est = tables[node] @ indicator
        if noise_var > 0.0:
            scale = np.sqrt(noise_var / 2.0)
            est = est + scale * (rng.standard_normal(est.shape)
                                 + 1j * rng.standard_normal(est.shape))
        out[node] = est
    return out


def observe_forward(channels: ChannelSet, precoders: dict, plan: PilotPlan,
                    noise_power: float, seed, modes=None) -> EffectiveCsi:
    """Forward-phase pilot observation at every receive node.

    Data transmitters send per-stream pilots precoded with the current
    transmit beamformers; each receive node despreads one estimate per
    sequence (the superposition of all cascades sharing it, plus noise).
    """
    tables = bf.receive_cascade_tables(channels, precoders, modes)
    rng = np.random.default_rng(seed)
    var = plan.estimation_noise_var(noise_power)
    return EffectiveCsi(estimates=_despread(tables, plan, var, rng),
                        plan=plan, noise_var=var)


def observe_backward(channels: ChannelSet, receivers: dict,
                     weights: np.ndarray, plan: PilotPlan,
                     noise_power: float, seed,
                     weight_carriage: str = "backhaul",
                     modes=None) -> EffectiveCsi:
    """Backward-phase observation at every transmit node.

    Receive nodes send pilots precoded with their (conjugated) receive
    filters; after reciprocity calibration each transmit node estimates the
    uplink-equivalent cascades H^H w.  With ``extra_pilot`` carriage a second
    pilot block scaled by sqrt(weight) doubles the backward pilot count and
    carries the stream weights over the air; with ``backhaul`` the weights
    ride along error-free.
    """
    if weight_carriage not in ("backhaul", "extra_pilot"):
        raise InvalidParameterError(
            f"unknown weight carriage {weight_carriage!r}")
    tables = bf.transmit_cascade_tables(channels, receivers, modes)
    rng = np.random.default_rng(seed)
    var = plan.estimation_noise_var(noise_power)
    estimates = _despread(tables, plan, var, rng)
    flat_w = np.asarray(weights, dtype=float).reshape(-1)
    if weight_carriage == "extra_pilot":
        scaled = {node: table * np.sqrt(flat_w)[None, :]
                  for node, table in tables.items()}
        weighted = _despread(scaled, plan, var, rng)
        return EffectiveCsi(estimates=estimates, plan=plan, noise_var=var,
                            weighted=weighted)
    return EffectiveCsi(estimates=estimates, plan=plan, noise_var=var,
                        backhaul_weights=flat_w.copy())


def observe_whitened_channels(channels: ChannelSet, cell: int,
                              whiteners: dict[int, np.ndarray],
                              noise_var: float, rng: np.random.Generator,
                              modes=None) -> dict[int, np.ndarray]:
    """Whitening channel-sounding observation for one cell's own links.

    Delivers to the cell's transmit side the interference-whitened full
    direct channel of each served user (receive-side whitener times the data
    direction channel), with the standard estimation noise per entry.  The
    transmitter can then solve its internal multi-user problem against unit
    variance noise.
    """
    topo = channels.topology
    modes = bf._normalize_modes(modes, topo.num_cells)
    out = {}
    for u in sorted(whiteners):
        direct = channels.dl(cell, u) if modes[cell] == bf.DL \
            else channels.ul(cell, u)
        g = whiteners[u] @ direct
        if noise_var > 0.0:
            scale = np.sqrt(noise_var / 2.0)
            g = g + scale * (rng.standard_normal(g.shape)
                             + 1j * rng.standard_normal(g.shape))
        out[u] = g
    return out


def direct_filter_estimate(received_samples: np.ndarray,
                           local_pilot: np.ndarray,
                           diagonal_load: str | float | None = "auto"
                           ) -> np.ndarray:
    """Least-squares receive filter estimated straight from synchronous
    pilots: argmin_W ||local_pilot - W @ received_samples||_F^2.

    ``diagonal_load="auto"`` adds 1e-6 * trace/dim to the sample covariance
    only when it is ill-conditioned; ``None`` disables loading and raises on
    a rank-deficient covariance; a float is used as an absolute load.
    """
    y = np.asarray(received_samples)
    p = np.asarray(local_pilot)
    antennas, symbols = y.shape
    if p.shape[1] != symbols:
        raise InvalidParameterError(
            "local_pilot and received_samples must cover the same symbols")
    if symbols < antennas:
        raise InvalidParameterError(
            f"need symbols >= antennas for a well-posed fit "
            f"({symbols} < {antennas})")
    cov = y @ y.conj().T
    cross = p @ y.conj().T
    if diagonal_load == "auto":
        load = 1e-6 * float(np.trace(cov).real) / antennas
        if np.linalg.cond(cov) < 1e10:
            load = 0.0
    elif diagonal_load is None:
        load = 0.0
    else:
        load = float(diagonal_load)
    try:
        if load > 0.0:
            return np.linalg.solve(cov + load * np.eye(antennas),
                                   cross.conj().T).conj().T
        filt = np.linalg.solve(cov, cross.conj().T).conj().T
        if not np.all(np.isfinite(filt)):
            raise np.linalg.LinAlgError("non-finite solution")
        return filt
    except np.linalg.LinAlgError as exc:
        raise SingularityError(
            "rank-deficient sample covariance; enable diagonal loading"
        ) from exc
