"""Per-node beamformer updates shared by every training strategy.

All strategies alternate the same three local computations: linear MMSE
receive filters, per-stream scalar MSE weights, and power-constrained
regularized transmit precoders.  This module implements those updates as
pure array functions plus the full-CSI reference algorithms built from them
(centralized alternating optimization and the interference-blind baseline).

Stream bookkeeping is user-major: stream (u, s) occupies column u*d + s of
every cascade table.  Nodes are ("bs", cell) or ("ue", user) tuples; under
dynamic TDD the transmit node of a user's streams is its serving BS in
downlink cells and the user itself in uplink cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet
from .errors import (InvalidParameterError, NumericFailureError,
                     SingularityError)

DL = 0
UL = 1

PER_BS_TOTAL = "per_bs_total"
PER_ANTENNA = "per_antenna"

# Relative feasibility tolerance guaranteed after every precoder update.
POWER_TOL = 1e-8


def _normalize_modes(modes, num_cells: int) -> np.ndarray:
    if modes is None:
        return np.zeros(num_cells, dtype=int)
    return np.asarray(modes, dtype=int)


def stream_cols(num_users: int, d: int) -> dict[int, np.ndarray]:
    """Column slice of each user's streams in the canonical stream order."""
    return {u: np.arange(u * d, (u + 1) * d) for u in range(num_users)}


def tx_node_of(topology, modes, user: int) -> tuple:
    cell = int(topology.serving_cell[user])
    return ("bs", cell) if modes[cell] == DL else ("ue", user)


def rx_node_of(topology, modes, user: int) -> tuple:
    cell = int(topology.serving_cell[user])
    return ("ue", user) if modes[cell] == DL else ("bs", cell)


@dataclass
class BeamformerState:
    """Transmit precoders, receive filters and stream weights of a network.

    ``precoders[u]`` holds the transmit-side beamformer of user u's streams
    (columns), shape (M, d) when the serving cell transmits downlink or
    (N, d) when user u itself transmits uplink.  ``receivers[u]`` is the
    matching receive filter at the opposite end.  ``weights`` is (U, d).
    """

    precoders: dict[int, np.ndarray]
    receivers: dict[int, np.ndarray] = field(default_factory=dict)
    weights: np.ndarray | None = None
    per_bs_power: float = 1.0
    per_ue_power: float = 1.0
    constraint_kind: str = PER_BS_TOTAL

    @property
    def d(self) -> int:
        return next(iter(self.precoders.values())).shape[1]

    def bs_power_used(self, channels: ChannelSet, modes=None) -> np.ndarray:
        """Transmit power spent by each downlink BS."""
        topo = channels.topology
        modes = _normalize_modes(modes, topo.num_cells)
        used = np.zeros(topo.num_cells)
        for cell in range(topo.num_cells):
            if modes[cell] != DL:
                continue
            for u in topo.users_of(cell):
                used[cell] += float(np.sum(np.abs(self.precoders[u]) ** 2))
        return used

    def copy(self) -> "BeamformerState":
        return BeamformerState(
            precoders={u: p.copy() for u, p in self.precoders.items()},
            receivers={u: w.copy() for u, w in self.receivers.items()},
            weights=None if self.weights is None else self.weights.copy(),
            per_bs_power=self.per_bs_power, per_ue_power=self.per_ue_power,
            constraint_kind=self.constraint_kind)


def link_matrix(channels: ChannelSet, modes, tx_user: int,
                rx_user: int) -> np.ndarray:
    """Channel from the transmit node of ``tx_user``'s stream to the receive
    node of ``rx_user``'s stream, shape (rx_ants, tx_ants)."""
    serving = channels.topology.serving_cell
    modes = _normalize_modes(modes, channels.topology.num_cells)
    tx_cell, rx_cell = int(serving[tx_user]), int(serving[rx_user])
    tx_is_bs = modes[tx_cell] == DL
    rx_is_ue = modes[rx_cell] == DL
    if tx_is_bs and rx_is_ue:
        return channels.dl(tx_cell, rx_user)
    if tx_is_bs and not rx_is_ue:
        return channels.bb(tx_cell, rx_cell)
    if not tx_is_bs and rx_is_ue:
        return channels.uu(tx_user, rx_user)
    return channels.ul(rx_cell, tx_user)


def receive_cascade_tables(channels: ChannelSet, precoders: dict,
                           modes=None) -> dict[tuple, np.ndarray]:
    """True cascade (channel times precoder column) of every stream at every
    receive node; entry shape (node_antennas, total_streams)."""
    topo = channels.topology
    m_tx, n_rx = channels.dims
    modes = _normalize_modes(modes, topo.num_cells)
    d = next(iter(precoders.values())).shape[1]
    total = topo.num_users * d
    cols = stream_cols(topo.num_users, d)

    dl_users = [u for u in range(topo.num_users)
                if modes[topo.serving_cell[u]] == DL]
    ul_cells = [c for c in range(topo.num_cells) if modes[c] == UL]
    tables: dict[tuple, np.ndarray] = {}
    for u in dl_users:
        tables[("ue", u)] = np.zeros((n_rx, total), dtype=complex)
    for c in ul_cells:
        tables[("bs", c)] = np.zeros((m_tx, total), dtype=complex)

    for cell in range(topo.num_cells):
        users = topo.users_of(cell)
        if modes[cell] == DL:
            block = np.hstack([precoders[u] for u in users])
            bcols = np.concatenate([cols[u] for u in users])
            cas = np.einsum("unm,mk->unk", channels.bs_to_ue[cell], block)
            for u in dl_users:
                tables[("ue", u)][:, bcols] = cas[u]
            if ul_cells:
                casb = np.einsum("bnm,mk->bnk", channels.bs_to_bs[cell], block)
                for b in ul_cells:
                    tables[("bs", b)][:, bcols] = casb[b]
        else:
            for u in users:
                p = precoders[u]
                cas = np.einsum("jxn,nd->jxd", channels.ue_to_ue[u], p)
                for j in dl_users:
                    tables[("ue", j)][:, cols[u]] = cas[j]
                # uplink channel user u -> BS b is the downlink transpose
                ul_chan = channels.bs_to_ue[:, u].transpose(0, 2, 1)
                casb = np.einsum("bmn,nd->bmd", ul_chan, p)
                for b in ul_cells:
                    tables[("bs", b)][:, cols[u]] = casb[b]
    return tables


def transmit_cascade_tables(channels: ChannelSet, receivers: dict,
                            modes=None) -> dict[tuple, np.ndarray]:
    """Uplink-equivalent cascade of every stream at every transmit node.

    Entry column for stream (j, t) at node T is H^H w_{j,t} with H the
    forward channel from T to the stream's receive node -- the quantity a
    transmit update needs.  Over the air this is obtained by precoding the
    backward pilot with the conjugated receive filter and conjugating the
    despread observation (TDD reciprocity calibration).
    """
    topo = channels.topology
    m_tx, n_rx = channels.dims
    modes = _normalize_modes(modes, topo.num_cells)
    d = next(iter(receivers.values())).shape[1]
    total = topo.num_users * d
    cols = stream_cols(topo.num_users, d)

    dl_users = [u for u in range(topo.num_users)
                if modes[topo.serving_cell[u]] == DL]
    ul_users = [u for u in range(topo.num_users)
                if modes[topo.serving_cell[u]] == UL]
    dl_cells = [c for c in range(topo.num_cells) if modes[c] == DL]
    tables: dict[tuple, np.ndarray] = {}
    for c in dl_cells:
        tables[("bs", c)] = np.zeros((m_tx, total), dtype=complex)
    for u in ul_users:
        tables[("ue", u)] = np.zeros((n_rx, total), dtype=complex)

    if dl_users:
        w_dl = np.zeros((topo.num_users, n_rx, d), dtype=complex)
        for u in dl_users:
            w_dl[u] = receivers[u]
        for c in dl_cells:
            cas = np.einsum("unm,und->umd", channels.bs_to_ue[c].conj(), w_dl)
            for j in dl_users:
                tables[("bs", c)][:, cols[j]] = cas[j]
        for u in ul_users:
            cas = np.einsum("jba,jbd->jad", channels.ue_to_ue[u].conj(), w_dl)
            for j in dl_users:
                tables[("ue", u)][:, cols[j]] = cas[j]

    for j in ul_users:
        w = receivers[j]                          # (M, d) filter at the BS
        b = int(topo.serving_cell[j])
        if dl_cells:
            cas = np.einsum("lam,ad->lmd", channels.bs_to_bs[:, b].conj(), w)
            for c in dl_cells:
                tables[("bs", c)][:, cols[j]] = cas[c]
        if ul_users:
            cas = np.einsum("vnm,md->vnd", channels.bs_to_ue[b].conj(), w)
            for v in ul_users:
                tables[("ue", v)][:, cols[j]] = cas[v]
    return tables


def mmse_receiver(desired: np.ndarray, observed: np.ndarray,
                  noise_power: float) -> np.ndarray:
    """Linear MMSE filters against every observed cascade.

    ``desired`` (n, d) holds the cascades of the streams to demodulate;
    ``observed`` (n, S) holds all cascade estimates entering the covariance
    (the desired columns included).  Returns (n, d) filter columns
    w_s = (sum_h h h^H + noise I)^{-1} h_s.
    """
    n = observed.shape[0]
    cov = observed @ observed.conj().T + noise_power * np.eye(n)
    try:
        return np.linalg.solve(cov, desired)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(
            f"singular receive covariance (noise_power={noise_power})") from exc


def stream_mse_and_weight(receiver: np.ndarray, observed: np.ndarray,
                          desired_cols, noise_power: float):
    """Per-stream MSE and weight 1/MSE for a receiver against observed CSI.

    ``desired_cols[s]`` indexes the column of ``observed`` carrying stream
    s's own cascade; every other column counts as interference.
    """
    d = receiver.shape[1]
    gains = receiver.conj().T @ observed            # (d, S) cross gains
    mse = np.empty(d)
    for s in range(d):
        own = gains[s, desired_cols[s]]
        interference = float(np.sum(np.abs(gains[s]) ** 2) - np.abs(own) ** 2)
        mse[s] = (np.abs(1.0 - own) ** 2 + interference
                  + noise_power * float(np.sum(np.abs(receiver[:, s]) ** 2)))
    mse = np.maximum(mse, 1e-300)
    return mse, 1.0 / mse


def _lstsq_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # Minimum-norm solution; A is Hermitian PSD and may be rank deficient.
    try:
        x = np.linalg.solve(A, B)
        if np.all(np.isfinite(x)):
            return x
    except np.linalg.LinAlgError:
        pass
    return np.linalg.lstsq(A, B, rcond=None)[0]


def _bisect_total_power(A: np.ndarray, B: np.ndarray, power: float,
                        tol: float) -> np.ndarray:
    """Smallest mu >= 0 with ||(A + mu I)^{-1} B||_F^2 <= power."""
    m = A.shape[0]
    eye = np.eye(m)
    sol = _lstsq_solve(A, B)
    if float(np.sum(np.abs(sol) ** 2)) <= power * (1.0 + POWER_TOL):
        return sol

    # ||(A + mu I)^{-1} B|| <= ||B|| / mu gives a guaranteed feasible bracket.
    mu_hi = float(np.linalg.norm(B)) / np.sqrt(power)
    sol = np.linalg.solve(A + mu_hi * eye, B)
    grow = 0
    while float(np.sum(np.abs(sol) ** 2)) > power:
        mu_hi *= 10.0
        sol = np.linalg.solve(A + mu_hi * eye, B)
        grow += 1
        if grow > 64:
            raise NumericFailureError(
                f"power bisection bracket failure: mu_hi={mu_hi:.3e}, "
                f"power={float(np.sum(np.abs(sol) ** 2)):.3e}, "
                f"budget={power:.3e}")
    mu_lo = 0.0
    best = sol
    for _ in range(200):
        mu = 0.5 * (mu_lo + mu_hi)
        try:
            cand = np.linalg.solve(A + mu * eye, B)
            p = float(np.sum(np.abs(cand) ** 2))
        except np.linalg.LinAlgError:
            # numerically singular at this mu: the solution is unbounded,
            # i.e. infeasible, so the crossing lies above
            p = np.inf
        if p <= power:
            mu_hi, best = mu, cand
            if p >= power * (1.0 - tol):
                break
        else:
            mu_lo = mu
        if mu_hi - mu_lo <= tol * max(mu_hi, 1e-300):
            break
    return best


def _solve_per_antenna(A: np.ndarray, B: np.ndarray, power: float,
                       tol: float) -> np.ndarray:
    """Damped dual ascent on per-antenna power duals, 200 inner iterations.

    A final common rescaling enforces feasibility within POWER_TOL even if
    the duals have not fully converged.
    """
    m = A.shape[0]
    cap = power / m
    sol = _lstsq_solve(A, B)
    row_power = np.sum(np.abs(sol) ** 2, axis=1)
    if float(np.max(row_power)) <= cap * (1.0 + POWER_TOL):
        return sol

    scale = float(np.trace(A).real) / m + 1e-30
    duals = np.maximum(row_power / cap - 1.0, 0.0) * scale
    step = 1.0
    prev_viol = np.inf
    best, best_viol = sol, np.inf
    for _ in range(200):
        sol = np.linalg.solve(A + np.diag(duals), B)
        row_power = np.sum(np.abs(sol) ** 2, axis=1)
        viol = float(np.max(row_power / cap - 1.0))
        if viol < best_viol:
            best, best_viol = sol, viol
        if abs(viol) <= tol:
            break
        step = step * 0.5 if viol > prev_viol else step * 1.05
        prev_viol = viol
        duals = np.maximum(duals + step * scale * (row_power / cap - 1.0), 0.0)
    sol = best
    worst = float(np.max(np.sum(np.abs(sol) ** 2, axis=1)))
    if worst > cap:
        sol = sol * np.sqrt(cap / worst)
    return sol


def precoder_update(cascades: np.ndarray, weights: np.ndarray, own_cols,
                    power: float, constraint_kind: str = PER_BS_TOTAL,
                    tol: float = 1e-9,
                    penalty: np.ndarray | None = None) -> np.ndarray:
    """Regularized weighted-MSE transmit update for one node.

    ``cascades`` (m, S) holds the uplink-equivalent cascade of every stream
    observed at this node, ``weights`` (S,) their scalar weights, and
    ``own_cols`` the columns belonging to the node's own streams.  Returns
    precoder columns m_s = (sum_j w_j g_j g_j^H + mu D)^{-1} w_s g_s with mu
    (or per-antenna duals) meeting the power budget.  ``penalty`` adds a
    fixed Hermitian term to the quadratic (frozen other-cell protection in
    the cell-internal strategies).
    """
    if constraint_kind not in (PER_BS_TOTAL, PER_ANTENNA):
        raise InvalidParameterError(
            f"unknown constraint kind {constraint_kind!r}")
    own_cols = np.asarray(own_cols, dtype=int)
    A = (cascades * weights[None, :]) @ cascades.conj().T
    if penalty is not None:
        A = A + penalty
    A = 0.5 * (A + A.conj().T)          # enforce Hermitian against roundoff
    B = cascades[:, own_cols] * weights[own_cols][None, :]
    if not np.any(B):
        return np.zeros((cascades.shape[0], own_cols.size), dtype=complex)
    if constraint_kind == PER_BS_TOTAL:
        return _bisect_total_power(A, B, power, tol)
    return _solve_per_antenna(A, B, power, tol)


def sum_rate(channels: ChannelSet, state: BeamformerState,
             noise_power: float | None = None, modes=None):
    """Achievable log-det rate per user and its network total.

    Interference gathers every other stream reaching the user's receive
    node, which under dynamic TDD includes the UE-UE and BS-BS cross links.
    """
    topo = channels.topology
    modes = _normalize_modes(modes, topo.num_cells)
    noise = channels.noise_power if noise_power is None else noise_power
    d = state.d
    cols = stream_cols(topo.num_users, d)
    tables = receive_cascade_tables(channels, state.precoders, modes)
    rates = np.zeros(topo.num_users)
    for k in range(topo.num_users):
        table = tables[rx_node_of(topo, modes, k)]
        rx_ants = table.shape[0]
        own = table[:, cols[k]]
        interf = np.delete(table, cols[k], axis=1)
        q = interf @ interf.conj().T + noise * np.eye(rx_ants)
        _, logdet_q = np.linalg.slogdet(q)
        _, logdet_full = np.linalg.slogdet(q + own @ own.conj().T)
        rates[k] = (logdet_full - logdet_q) / np.log(2.0)
    return float(np.sum(rates)), rates


def per_stream_rates(channels: ChannelSet, state: BeamformerState,
                     noise_power: float | None = None,
                     modes=None) -> np.ndarray:
    """log2(1 + SINR) of every stream under per-stream MMSE receive filters.

    Summed over streams this is the alternating algorithm's monotone
    objective (log2 of the MSE weights at fresh MMSE receivers); for d = 1
    it coincides with ``sum_rate``.
    """
    topo = channels.topology
    modes = _normalize_modes(modes, topo.num_cells)
    noise = channels.noise_power if noise_power is None else noise_power
    d = state.d
    cols = stream_cols(topo.num_users, d)
    tables = receive_cascade_tables(channels, state.precoders, modes)
    rates = np.zeros((topo.num_users, d))
    for k in range(topo.num_users):
        table = tables[rx_node_of(topo, modes, k)]
        rx_ants = table.shape[0]
        cov = table @ table.conj().T + noise * np.eye(rx_ants)
        cov_inv_h = np.linalg.solve(cov, table[:, cols[k]])
        # h^H (cov - h h^H)^{-1} h = t / (1 - t) with t = h^H cov^{-1} h
        t = np.real(np.sum(table[:, cols[k]].conj() * cov_inv_h, axis=0))
        t = np.clip(t, 0.0, 1.0 - 1e-15)
        rates[k] = np.log2(1.0 + t / (1.0 - t))
    return rates


def initial_state(channels: ChannelSet, d: int, per_bs_power: float = 1.0,
                  per_ue_power: float = 1.0,
                  constraint_kind: str = PER_BS_TOTAL, init: str = "svd",
                  seed: int | None = None, modes=None) -> BeamformerState:
    """Deterministic starting point: right singular vectors of each direct
    channel with equal power per stream (or seeded random directions)."""
    topo = channels.topology
    m_tx, n_rx = channels.dims
    if d < 1 or d > min(m_tx, n_rx):
        raise InvalidParameterError(
            f"d must lie in [1, min(M, N)] = [1, {min(m_tx, n_rx)}], got {d}")
    modes = _normalize_modes(modes, topo.num_cells)
    rng = np.random.default_rng(seed)
    precoders = {}
    for u in range(topo.num_users):
        cell = int(topo.serving_cell[u])
        if modes[cell] == DL:
            h = channels.dl(cell, u)
            share = per_bs_power / (len(topo.users_of(cell)) * d)
        else:
            h = channels.ul(cell, u)
            share = per_ue_power / d
        tx_ants = h.shape[1]
        if init == "svd":
            _, _, vh = np.linalg.svd(h)
            basis = vh[:d].conj().T
        elif init == "random":
            basis = rng.standard_normal((tx_ants, d)) \
                + 1j * rng.standard_normal((tx_ants, d))
            basis = basis / np.linalg.norm(basis, axis=0, keepdims=True)
        else:
            raise InvalidParameterError(f"unknown init {init!r}")
        precoders[u] = basis * np.sqrt(share)
    if constraint_kind == PER_ANTENNA:
        # scale each DL cell into its per-antenna caps, keeping directions
        cap = per_bs_power / m_tx
        for cell in range(topo.num_cells):
            if modes[cell] != DL:
                continue
            users = topo.users_of(cell)
            rows = sum(np.sum(np.abs(precoders[u]) ** 2, axis=1)
                       for u in users)
            worst = float(np.max(rows))
            if worst > cap:
                for u in users:
                    precoders[u] = precoders[u] * np.sqrt(cap / worst)
    weights = np.ones((topo.num_users, d))
    return BeamformerState(precoders=precoders, receivers={}, weights=weights,
                           per_bs_power=per_bs_power,
                           per_ue_power=per_ue_power,
                           constraint_kind=constraint_kind)


def wmmse_centralized(channels: ChannelSet, d: int, per_bs_power: float = 1.0,
                      noise_power: float | None = None, max_iter: int = 100,
                      tol: float = 1e-8,
                      constraint_kind: str = PER_BS_TOTAL,
                      init: str = "svd", seed: int | None = None,
                      record_states: bool = False):
    """Full-CSI alternating optimization: MMSE receivers, 1/MSE weights,
    and regularized precoders per BS, until the objective stalls.

    Returns ``(state, objective_trace)`` where the trace (one entry per
    iteration, starting at the initial precoders) is monotonically
    non-decreasing; with ``record_states`` a list of per-iteration precoder
    snapshots is appended to the return tuple.
    """
    topo = channels.topology
    noise = channels.noise_power if noise_power is None else noise_power
    state = initial_state(channels, d, per_bs_power,
                          constraint_kind=constraint_kind, init=init,
                          seed=seed)
    cols = stream_cols(topo.num_users, d)
    objective = []
    snapshots = []
    while True:
        tables = receive_cascade_tables(channels, state.precoders)
        weights = np.zeros((topo.num_users, d))
        for k in range(topo.num_users):
            table = tables[("ue", k)]
            recv = mmse_receiver(table[:, cols[k]], table, noise)
            state.receivers[k] = recv
            _, weights[k] = stream_mse_and_weight(recv, table, cols[k], noise)
        state.weights = weights
        objective.append(float(np.sum(np.log2(weights))))
        if record_states:
            snapshots.append({u: p.copy() for u, p in state.precoders.items()})
        if len(objective) > 1 and abs(objective[-1] - objective[-2]) \
                <= tol * max(abs(objective[-2]), 1e-12):
            break
        if len(objective) > max_iter:
            break
        flat_w = weights.reshape(-1)
        ul_tables = transmit_cascade_tables(channels, state.receivers)
        for cell in range(topo.num_cells):
            own = np.concatenate([cols[u] for u in topo.users_of(cell)])
            new = precoder_update(ul_tables[("bs", cell)], flat_w, own,
                                  per_bs_power, constraint_kind)
            for i, u in enumerate(topo.users_of(cell)):
                state.precoders[u] = new[:, i * d:(i + 1) * d]
    if record_states:
        return state, np.array(objective), snapshots
    return state, np.array(objective)


def uncoordinated_baseline(channels: ChannelSet, d: int,
                           per_bs_power: float = 1.0,
                           noise_power: float | None = None,
                           max_iter: int = 60, tol: float = 1e-8,
                           constraint_kind: str = PER_BS_TOTAL,
                           init: str = "svd") -> BeamformerState:
    """Per-cell design that ignores all inter-cell interference.

    Runs the alternating optimization on a copy of the channels with every
    inter-cell and cross link zeroed (the cells decouple), then returns the
    resulting state for evaluation under the true interference.
    """
    blind = channels.intra_cell_only()
    state, _ = wmmse_centralized(blind, d, per_bs_power, noise_power,
                                 max_iter=max_iter, tol=tol,
                                 constraint_kind=constraint_kind, init=init)
    return state
