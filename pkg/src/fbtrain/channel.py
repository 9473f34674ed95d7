"""Reciprocal MIMO channel generation with pathloss and Rayleigh fading."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameterError, InvalidStateError
from .topology import CELL_EDGE_PAIR, NetworkTopology, pairwise_distances

# Conventional urban defaults; reported alongside every result.
DEFAULT_PATHLOSS_EXPONENT = 3.76
DEFAULT_REFERENCE_DISTANCE = 10.0


def pathloss(distance, pathloss_exponent: float = DEFAULT_PATHLOSS_EXPONENT,
             reference_distance: float = DEFAULT_REFERENCE_DISTANCE):
    """Average power gain (max(d, d0)/d0)^(-alpha); unity inside d0."""
    d = np.maximum(np.asarray(distance, dtype=float), reference_distance)
    return (d / reference_distance) ** (-pathloss_exponent)


@dataclass
class ChannelSet:
    """All complex channel matrices of one network realization.

    Index convention: the first index names the transmitter, the second the
    receiver; each stored matrix maps a transmit vector to a receive vector,
    i.e. has shape (rx_antennas, tx_antennas).

      * ``bs_to_ue[l, u]`` -- downlink BS l -> user u, shape (N, M)
      * ``ue_to_ue[i, j]`` -- user i -> user j, shape (N, N); zero on i == j
      * ``bs_to_bs[a, b]`` -- BS a -> BS b, shape (M, M); zero on a == b

    Reciprocity holds by construction: the reverse link of any entry is its
    transpose (uplink of ``bs_to_ue[l, u]`` is ``bs_to_ue[l, u].T``, and
    ``ue_to_ue[j, i] == ue_to_ue[i, j].T``).
    """

    topology: NetworkTopology
    bs_to_ue: np.ndarray                 # (L, U, N, M)
    noise_power: float
    dims: tuple[int, int]                # (M_tx per BS, N_rx per user)
    ue_to_ue: np.ndarray | None = None   # (U, U, N, N)
    bs_to_bs: np.ndarray | None = None   # (L, L, M, M)

    @property
    def num_cells(self) -> int:
        return self.bs_to_ue.shape[0]

    @property
    def num_users(self) -> int:
        return self.bs_to_ue.shape[1]

    def dl(self, cell: int, user: int) -> np.ndarray:
        """Downlink channel BS ``cell`` -> user ``user``."""
        return self.bs_to_ue[cell, user]

    def ul(self, cell: int, user: int) -> np.ndarray:
        """Uplink channel user -> BS, the transpose of the downlink."""
        return self.bs_to_ue[cell, user].T

    def uu(self, tx_user: int, rx_user: int) -> np.ndarray:
        if tx_user == rx_user:
            raise InvalidParameterError("no self-link between a user and itself")
        if self.ue_to_ue is None:
            raise InvalidStateError("cross links were not generated")
        return self.ue_to_ue[tx_user, rx_user]

    def bb(self, tx_cell: int, rx_cell: int) -> np.ndarray:
        if tx_cell == rx_cell:
            raise InvalidParameterError("no self-link between a BS and itself")
        if self.bs_to_bs is None:
            raise InvalidStateError("cross links were not generated")
        return self.bs_to_bs[tx_cell, rx_cell]

    @property
    def has_cross_links(self) -> bool:
        return self.ue_to_ue is not None and self.bs_to_bs is not None

    def intra_cell_only(self) -> "ChannelSet":
        """Copy with every inter-cell and cross link zeroed.

        Used to design interference-blind (uncoordinated) beamformers; the
        evaluation afterwards uses the original set.
        """
        bs_to_ue = np.zeros_like(self.bs_to_ue)
        for cell in range(self.num_cells):
            users = self.topology.users_of(cell)
            bs_to_ue[cell, users] = self.bs_to_ue[cell, users]
        return replace(self, bs_to_ue=bs_to_ue, ue_to_ue=None, bs_to_bs=None)

    def to_dict(self) -> dict:
        def encode(arr):
            if arr is None:
                return None
            return {"real": arr.real.tolist(), "imag": arr.imag.tolist()}

        return {
            "topology": self.topology.to_dict(),
            "bs_to_ue": encode(self.bs_to_ue),
            "ue_to_ue": encode(self.ue_to_ue),
            "bs_to_bs": encode(self.bs_to_bs),
            "noise_power": self.noise_power,
            "dims": list(self.dims),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelSet":
        def decode(entry):
            if entry is None:
                return None
            return np.asarray(entry["real"]) + 1j * np.asarray(entry["imag"])

        return cls(
            topology=NetworkTopology.from_dict(data["topology"]),
            bs_to_ue=decode(data["bs_to_ue"]),
            noise_power=float(data["noise_power"]),
            dims=tuple(data["dims"]),
            ue_to_ue=decode(data["ue_to_ue"]),
            bs_to_bs=decode(data["bs_to_bs"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ChannelSet":
        return cls.from_dict(json.loads(text))


def _rayleigh(rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. circularly-symmetric complex Gaussian entries, unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) \
        / np.sqrt(2.0)


def _reciprocal_cross(rng: np.random.Generator, count: int, ants: int,
                      gains: np.ndarray) -> np.ndarray:
    """(count, count, ants, ants) cross-link array with X[j,i] = X[i,j].T."""
    links = np.zeros((count, count, ants, ants), dtype=complex)
    for i in range(count):
        for j in range(i + 1, count):
            h = np.sqrt(gains[i, j]) * _rayleigh(rng, (ants, ants))
            links[i, j] = h
            links[j, i] = h.T
    return links


def generate_channels(topology: NetworkTopology, m_tx: int, n_rx: int,
                      pathloss_exponent: float = DEFAULT_PATHLOSS_EXPONENT,
                      reference_distance: float = DEFAULT_REFERENCE_DISTANCE,
                      seed: int = 0, include_cross_links: bool = False,
                      noise_power: float = 1.0) -> ChannelSet:
    """Draw Rayleigh+pathloss channels for every link of the topology.

    BS-BS and UE-UE links (generated when ``include_cross_links``) use the
    same fading model as BS-UE links; this is a documented simplification.
    Deterministic given ``seed``.
    """
    if topology.num_users == 0:
        raise InvalidStateError("topology has no users; call drop_users first")
    if pathloss_exponent <= 2:
        raise InvalidParameterError(
            f"pathloss_exponent must exceed 2, got {pathloss_exponent}")

    rng = np.random.default_rng(seed)
    L, U = topology.num_cells, topology.num_users

    d_bs_ue = pairwise_distances(topology.bs_positions,
                                 topology.user_positions, topology)
    gains = pathloss(d_bs_ue, pathloss_exponent, reference_distance)
    bs_to_ue = np.sqrt(gains)[:, :, None, None] * _rayleigh(rng, (L, U, n_rx, m_tx))

    ue_to_ue = bs_to_bs = None
    if include_cross_links:
        d_uu = pairwise_distances(topology.user_positions,
                                  topology.user_positions, topology)
        ue_to_ue = _reciprocal_cross(
            rng, U, n_rx, pathloss(d_uu, pathloss_exponent, reference_distance))
        d_bb = pairwise_distances(topology.bs_positions,
                                  topology.bs_positions, topology)
        bs_to_bs = _reciprocal_cross(
            rng, L, m_tx, pathloss(d_bb, pathloss_exponent, reference_distance))

    return ChannelSet(topology=topology, bs_to_ue=bs_to_ue,
                      noise_power=noise_power, dims=(m_tx, n_rx),
                      ue_to_ue=ue_to_ue, bs_to_bs=bs_to_bs)


def calibrate_noise(topology: NetworkTopology, cell_edge_snr_db: float,
                    per_bs_power: float = 1.0,
                    pathloss_exponent: float = DEFAULT_PATHLOSS_EXPONENT,
                    reference_distance: float = DEFAULT_REFERENCE_DISTANCE) -> float:
    """Noise power putting the average SNR at distance isd/2 (pathloss only)
    at the requested target."""
    if per_bs_power <= 0:
        raise InvalidParameterError(
            f"per_bs_power must be positive, got {per_bs_power}")
    edge_gain = float(pathloss(topology.isd / 2.0, pathloss_exponent,
                               reference_distance))
    return per_bs_power * edge_gain / (10.0 ** (cell_edge_snr_db / 10.0))


def cell_edge_channelset(topology: NetworkTopology, snr_db: float,
                         m_tx: int, n_rx: int, seed: int = 0) -> ChannelSet:
    """Symmetric cell-edge channels: every BS-to-user link is unit-gain
    Rayleigh (no pathloss asymmetry) and the noise power realizes the SNR
    with a unit per-BS power budget."""
    if topology.deployment_kind != CELL_EDGE_PAIR:
        raise InvalidStateError(
            "cell_edge_channelset requires a cell_edge_pair deployment")
    if topology.num_users == 0:
        raise InvalidStateError("topology has no users; call drop_users first")
    rng = np.random.default_rng(seed)
    L, U = topology.num_cells, topology.num_users
    bs_to_ue = _rayleigh(rng, (L, U, n_rx, m_tx))
    return ChannelSet(topology=topology, bs_to_ue=bs_to_ue,
                      noise_power=10.0 ** (-snr_db / 10.0),
                      dims=(m_tx, n_rx))
