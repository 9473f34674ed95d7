"""Forward-backward training rounds for strategies A-D.

Every round has a network-wide forward phase (data transmitters send
precoded pilots; receive nodes refresh MMSE filters and stream weights) and
a backward phase (receive nodes send filter-precoded pilots; transmit nodes
refresh precoders).  The strategies differ in who updates transmit
beamformers each round and how stream weights travel:

  A -- every transmit node updates in parallel; weights exchanged via
       backhaul or an extra precoded backward pilot per stream.
  B -- one cell per round (round robin) solves its internal multi-user
       problem with several inner iterations against whitened out-of-cell
       interference; weights ride on extra pilots (no dynamic backhaul).
  C -- like B but all cells update in parallel every round, with weights
       shared over idealized backhaul (simplified fidelity; outputs label
       it "C (simplified)").
  D -- like A with a single backward pilot per stream: transmit nodes
       assume unit weights for streams they do not serve and derive their
       own streams' weights from locally observed pilot responses.

Under dynamic TDD the forward transmitters are DL base stations and UL
users, the backward transmitters are DL users and UL base stations, and
every receiver works against the union of same-direction and cross-link
interference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import beamforming as bf
from .beamforming import DL, UL, PER_BS_TOTAL, BeamformerState
from .channel import ChannelSet
from .errors import InvalidParameterError, InvalidStateError
from .pilots import (EffectiveCsi, allocate_pilots, observe_backward,
                     observe_forward, observe_whitened_channels)

STRATEGIES = ("A", "B", "C", "D", "uncoordinated", "centralized")
CSI_MODELS = ("perfect", "noisy", "contaminated")
DUPLEX_MODES = ("all_dl", "dynamic_tdd")
WEIGHT_CARRIAGE = ("backhaul", "extra_pilot")

# Rounds used to converge reference designs (baseline, converged anchors).
BASELINE_ITERS = 40


@dataclass
class Scenario:
    """Full parameter set of one training run (single channel realization)."""

    strategy: str = "A"
    T: int = 10                       # F-B rounds
    gamma: float = 0.01               # overhead fraction per round
    csi_model: str = "perfect"
    duplex: str = "all_dl"
    p_ul: float = 0.3                 # UL probability per cell (dynamic TDD)
    inner_iters: int = 10             # internal iterations for B and C
    weight_carriage: str = "backhaul"
    d: int = 1                        # streams per user
    per_bs_power: float = 1.0
    per_ue_power: float = 1.0
    constraint_kind: str = PER_BS_TOTAL
    pool_size: int | None = None      # pilot pool; None = orthogonal
    seq_length: int | None = None     # None = pool_size
    pilot_power: float | None = None  # None = per-stream share of BS power
    init: str = "svd"
    unit_weights: bool = False        # force all stream weights to 1
    seed: int = 0                     # drives duplex draw + pilot noise
    drops: int = 1                    # Monte-Carlo drops (used by runners)
    b_cell_order: tuple | None = None

    def validate(self) -> list[str]:
        """Collect constraint violations (empty list when consistent)."""
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"unknown strategy {self.strategy!r}")
        if self.csi_model not in CSI_MODELS:
            problems.append(f"unknown csi_model {self.csi_model!r}")
        if self.duplex not in DUPLEX_MODES:
            problems.append(f"unknown duplex {self.duplex!r}")
        if self.weight_carriage not in WEIGHT_CARRIAGE:
            problems.append(f"unknown weight_carriage {self.weight_carriage!r}")
        if self.T < 0:
            problems.append("T must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        if not 0.0 <= self.p_ul <= 1.0:
            problems.append("p_ul must lie in [0, 1]")
        if self.inner_iters < 1:
            problems.append("inner_iters must be >= 1")
        if self.per_bs_power <= 0 or self.per_ue_power <= 0:
            problems.append("power budgets must be positive")
        if self.d < 1:
            problems.append("d must be >= 1")
        if self.duplex == "dynamic_tdd" and self.strategy in ("A", "B") \
                and self.weight_carriage != "extra_pilot":
            problems.append("dynamic TDD has no backhaul between mutually "
                            "interfering users; strategies A and B need "
                            "weight_carriage=extra_pilot")
        if self.strategy == "C" and self.duplex != "all_dl":
            problems.append("strategy C requires all-DL operation (backhaul)")
        if self.strategy == "centralized" and self.duplex != "all_dl":
            problems.append("the centralized genie is defined all-DL only")
        return problems


@dataclass
class FbTrace:
    """Per-iteration record of one training run (length T + 1, t = 0 is the
    initial-state evaluation)."""

    strategy: str
    gamma: float
    sum_rate: np.ndarray
    objective: np.ndarray          # sum over streams of log2(1 + SINR)
    pilot_symbols: np.ndarray      # cumulative pilot symbols consumed
    eff_throughput: np.ndarray     # (1 - t*gamma)^+ * sum_rate
    final_state: BeamformerState
    modes: np.ndarray

    def __len__(self) -> int:
        return self.sum_rate.size

    @property
    def iterations(self) -> np.ndarray:
        return np.arange(self.sum_rate.size)


def pilots_per_round(strategy: str, num_streams: int,
                     weight_carriage: str = "backhaul"):
    """(forward, backward) pilot symbols consumed by one F-B round.

    Strategy D needs a single backward pilot per stream; A and B need two
    when weights travel over the air.  The whitening soundings of B and C
    are counted inside the same per-round budget.
    """
    forward = num_streams
    if strategy == "D":
        backward = num_streams
    elif strategy in ("A", "B") and weight_carriage == "extra_pilot":
        backward = 2 * num_streams
    else:
        backward = num_streams
    return forward, backward


def assign_duplex_modes(topology, p_ul: float, seed) -> np.ndarray:
    """I.i.d. Bernoulli(p_ul) uplink indicator per cell."""
    if not 0.0 <= p_ul <= 1.0:
        raise InvalidParameterError(f"p_ul must lie in [0, 1], got {p_ul}")
    rng = np.random.default_rng(seed)
    return (rng.random(topology.num_cells) < p_ul).astype(int)


def _derived_seed(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence(tuple(int(p) for p in parts))


def _inv_sqrt_psd(q: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(q)
    vals = np.maximum(vals, np.max(vals) * 1e-15)
    return (vecs / np.sqrt(vals)[None, :]) @ vecs.conj().T


def _cell_block_wmmse(direct: dict[int, np.ndarray], is_dl: bool, d: int,
                      budget: float, constraint_kind: str, noise: float,
                      iters: int, start: dict[int, np.ndarray],
                      penalties=None, unit_weights: bool = False
                      ) -> dict[int, np.ndarray]:
    """Alternating updates of one cell's internal multi-user problem.

    ``direct[u]`` maps the cell's transmit side to user u's receive node in
    the data direction (possibly interference-whitened, in which case
    ``noise`` is 1).  ``penalties`` adds frozen quadratic protection terms
    for streams outside the cell: a single matrix for a DL cell's BS, a
    per-user dict for an UL cell's users.
    """
    users = sorted(direct)
    lcols = {u: np.arange(i * d, (i + 1) * d) for i, u in enumerate(users)}
    prec = {u: start[u].copy() for u in users}
    all_cols = np.arange(len(users) * d)
    for _ in range(iters):
        if is_dl:
            block = np.hstack([prec[u] for u in users])
            cascades = {u: direct[u] @ block for u in users}
        else:
            table = np.hstack([direct[u] @ prec[u] for u in users])
            cascades = {u: table for u in users}
        filt = {}
        wlist = []
        for u in users:
            f = bf.mmse_receiver(cascades[u][:, lcols[u]], cascades[u], noise)
            filt[u] = f
            _, wv = bf.stream_mse_and_weight(f, cascades[u], lcols[u], noise)
            wlist.append(np.ones(d) if unit_weights else wv)
        wflat = np.concatenate(wlist)
        if is_dl:
            a_cas = np.hstack([direct[u].conj().T @ filt[u] for u in users])
            sol = bf.precoder_update(a_cas, wflat, all_cols, budget,
                                     constraint_kind, penalty=penalties)
            for u in users:
                prec[u] = sol[:, lcols[u]]
        else:
            w_all = np.hstack([filt[u] for u in users])
            for u in users:
                a_u = direct[u].conj().T @ w_all
                pen = None if penalties is None else penalties[u]
                prec[u] = bf.precoder_update(a_u, wflat, lcols[u], budget,
                                             PER_BS_TOTAL, penalty=pen)
    return prec


def uncoordinated_state(channels: ChannelSet, modes, scenario: Scenario
                        ) -> BeamformerState:
    """Interference-blind per-cell design, direction aware.

    All-DL deployments use the plain baseline; with uplink cells each cell
    solves its own single-cell problem (per-UE budgets on the uplink side).
    """
    topo = channels.topology
    modes = bf._normalize_modes(modes, topo.num_cells)
    if not np.any(modes == UL):
        return bf.uncoordinated_baseline(
            channels, scenario.d, scenario.per_bs_power,
            constraint_kind=scenario.constraint_kind, init=scenario.init)
    state = bf.initial_state(channels, scenario.d, scenario.per_bs_power,
                             scenario.per_ue_power,
                             scenario.constraint_kind, init=scenario.init,
                             modes=modes)
    for cell in range(topo.num_cells):
        users = topo.users_of(cell)
        is_dl = modes[cell] == DL
        direct = {int(u): (channels.dl(cell, u) if is_dl
                           else channels.ul(cell, u)) for u in users}
        start = {int(u): state.precoders[u] for u in users}
        budget = scenario.per_bs_power if is_dl else scenario.per_ue_power
        kind = scenario.constraint_kind if is_dl else PER_BS_TOTAL
        new = _cell_block_wmmse(direct, is_dl, scenario.d, budget, kind,
                                channels.noise_power, BASELINE_ITERS, start)
        state.precoders.update(new)
    return state


class _Engine:
    """One channel realization driven through T forward-backward rounds."""

    def __init__(self, scenario: Scenario, channels: ChannelSet, modes):
        problems = scenario.validate()
        if problems:
            raise InvalidParameterError("; ".join(problems))
        self.sc = scenario
        self.ch = channels
        self.topo = channels.topology
        self.modes = bf._normalize_modes(modes, self.topo.num_cells)
        if np.any(self.modes == UL) and not channels.has_cross_links:
            raise InvalidStateError(
                "dynamic TDD needs UE-UE and BS-BS cross links; regenerate "
                "channels with include_cross_links=True")
        self.d = scenario.d
        self.num_users = self.topo.num_users
        self.cols = bf.stream_cols(self.num_users, self.d)
        self.num_streams = self.num_users * self.d

        self.rx_node = {u: bf.rx_node_of(self.topo, self.modes, u)
                        for u in range(self.num_users)}
        self.tx_node = {u: bf.tx_node_of(self.topo, self.modes, u)
                        for u in range(self.num_users)}
        self.rx_users: dict[tuple, list[int]] = {}
        self.tx_users: dict[tuple, list[int]] = {}
        for u in range(self.num_users):
            self.rx_users.setdefault(self.rx_node[u], []).append(u)
            self.tx_users.setdefault(self.tx_node[u], []).append(u)
        self.tx_nodes = sorted(self.tx_users)

        self.plan = self._build_plan()
        # Perfect CSI observes exact cascades regardless of pilot length.
        self.est_noise_power = 0.0 if scenario.csi_model == "perfect" \
            else channels.noise_power
        self.state = bf.initial_state(
            channels, self.d, scenario.per_bs_power, scenario.per_ue_power,
            scenario.constraint_kind, init=scenario.init,
            seed=int(_derived_seed(scenario.seed, 0x1A).generate_state(1)[0]),
            modes=self.modes)
        self._fwd: EffectiveCsi | None = None
        self._bwd: EffectiveCsi | None = None

    def _build_plan(self):
        sc = self.sc
        if sc.csi_model == "perfect":
            pool = self.num_streams
        elif sc.pool_size is not None:
            pool = sc.pool_size
        elif sc.csi_model == "contaminated":
            pool = max(1, self.num_streams // 2)
        else:
            pool = self.num_streams
        policy = "orthogonal" if pool >= self.num_streams else "random_reuse"
        if sc.pilot_power is not None:
            ppow = sc.pilot_power
        else:
            most_users = max(len(self.topo.users_of(c))
                             for c in range(self.topo.num_cells))
            ppow = sc.per_bs_power / (most_users * self.d)
        seed = int(_derived_seed(sc.seed, 0xE).generate_state(1)[0])
        return allocate_pilots(self.num_streams, pool, policy,
                               seq_length=sc.seq_length, pilot_power=ppow,
                               seed=seed)

    # -- per-round phases ---------------------------------------------------

    def _rx_update(self):
        noise = self.ch.noise_power
        for node in sorted(self.rx_users):
            est = self._fwd.estimates[node]
            for u in self.rx_users[node]:
                des = self.plan.assignment[self.cols[u]]
                recv = bf.mmse_receiver(est[:, des], est, noise)
                self.state.receivers[u] = recv
                _, wv = bf.stream_mse_and_weight(recv, est, des, noise)
                self.state.weights[u] = 1.0 if self.sc.unit_weights else wv

    def _sequence_weights(self, node: tuple) -> np.ndarray:
        """Stream weights per pilot sequence, as seen by one transmit node."""
        pool = self.plan.pool_size
        if self.sc.unit_weights:
            return np.ones(pool)
        if self.sc.strategy == "D":
            # Unit weights for streams served elsewhere; own-stream weights
            # from the locally observable MMSE identity mse = 1 - a^H m.
            v = np.ones(pool)
            for u in self.tx_users[node]:
                for s in range(self.d):
                    q = self.plan.assignment[self.cols[u][s]]
                    a = self._bwd.estimates[node][:, q]
                    gain = float(np.real(
                        np.vdot(a, self.state.precoders[u][:, s])))
                    v[q] = 1.0 / min(max(1.0 - gain, 1e-12), 1.0)
            return v
        if self._bwd.backhaul_weights is not None:
            flat = self._bwd.backhaul_weights
            sums = np.bincount(self.plan.assignment, weights=flat,
                               minlength=pool)
            counts = np.bincount(self.plan.assignment, minlength=pool)
            v = np.ones(pool)
            v[counts > 0] = sums[counts > 0] / counts[counts > 0]
            return v
        # extra_pilot: weight = energy ratio of the two pilot blocks
        a = self._bwd.estimates[node]
        c = self._bwd.weighted[node]
        pa = np.sum(np.abs(a) ** 2, axis=0)
        pc = np.sum(np.abs(c) ** 2, axis=0)
        v = np.ones(pool)
        ok = pa > 1e-300
        v[ok] = np.clip(pc[ok] / pa[ok], 1e-9, 1e12)
        return v

    def _standard_tx_update(self):
        new = {}
        for node in self.tx_nodes:
            est = self._bwd.estimates[node]
            v_seq = self._sequence_weights(node)
            users = self.tx_users[node]
            own = self.plan.assignment[
                np.concatenate([self.cols[u] for u in users])]
            is_bs = node[0] == "bs"
            budget = self.sc.per_bs_power if is_bs else self.sc.per_ue_power
            kind = self.sc.constraint_kind if is_bs else PER_BS_TOTAL
            sol = bf.precoder_update(est, v_seq, own, budget, kind)
            for i, u in enumerate(users):
                new[u] = sol[:, i * self.d:(i + 1) * self.d]
        self.state.precoders.update(new)

    def _inner_cell_update(self, cell: int, t: int, collect: dict):
        """Cell-internal multi-user solve against whitened interference."""
        users = [int(u) for u in self.topo.users_of(cell)]
        is_dl = self.modes[cell] == DL
        noise = self.ch.noise_power
        pool = self.plan.pool_size
        own_streams = np.concatenate([self.cols[u] for u in users])
        own_seq = np.zeros(pool, dtype=bool)
        own_seq[self.plan.assignment[own_streams]] = True

        def whitener_from(node):
            est = self._fwd.estimates[node]
            other = est[:, ~own_seq]
            q = noise * np.eye(est.shape[0]) + other @ other.conj().T
            return _inv_sqrt_psd(q)

        if is_dl:
            whiteners = {u: whitener_from(("ue", u)) for u in users}
        else:
            shared = whitener_from(("bs", cell))
            whiteners = {u: shared for u in users}
        rng = np.random.default_rng(_derived_seed(self.sc.seed, 0x17, t, cell))
        est_var = self.plan.estimation_noise_var(self.est_noise_power) \
            if self.est_noise_power > 0 else 0.0
        direct = observe_whitened_channels(self.ch, cell, whiteners, est_var,
                                           rng, self.modes)

        def penalty_for(node):
            est = self._bwd.estimates[node]
            v_seq = self._sequence_weights(node)
            other = est[:, ~own_seq]
            return (other * v_seq[~own_seq][None, :]) @ other.conj().T

        if is_dl:
            penalties = penalty_for(("bs", cell))
            budget, kind = self.sc.per_bs_power, self.sc.constraint_kind
        else:
            penalties = {u: penalty_for(("ue", u)) for u in users}
            budget, kind = self.sc.per_ue_power, PER_BS_TOTAL
        start = {u: self.state.precoders[u] for u in users}
        collect.update(_cell_block_wmmse(
            direct, is_dl, self.d, budget, kind, 1.0, self.sc.inner_iters,
            start, penalties, self.sc.unit_weights))

    def _round(self, t: int):
        sc = self.sc
        self._fwd = observe_forward(
            self.ch, self.state.precoders, self.plan, self.est_noise_power,
            _derived_seed(sc.seed, 0x11, t), self.modes)
        self._rx_update()
        carriage = sc.weight_carriage if sc.strategy in ("A", "B") \
            else "backhaul"
        self._bwd = observe_backward(
            self.ch, self.state.receivers, self.state.weights, self.plan,
            self.est_noise_power, _derived_seed(sc.seed, 0x13, t), carriage,
            self.modes)
        if sc.strategy in ("A", "D"):
            self._standard_tx_update()
        elif sc.strategy == "B":
            order = sc.b_cell_order or tuple(range(self.topo.num_cells))
            collect: dict = {}
            self._inner_cell_update(order[(t - 1) % len(order)], t, collect)
            self.state.precoders.update(collect)
        elif sc.strategy == "C":
            collect = {}
            for cell in range(self.topo.num_cells):
                self._inner_cell_update(cell, t, collect)
            self.state.precoders.update(collect)
        else:
            raise InvalidParameterError(
                f"strategy {sc.strategy!r} has no F-B round")

    def run(self, T: int) -> FbTrace:
        rates = np.zeros(T + 1)
        objective = np.zeros(T + 1)
        rates[0], objective[0] = self._evaluate()
        for t in range(1, T + 1):
            self._round(t)
            rates[t], objective[t] = self._evaluate()
        return _assemble_trace(self.sc, self.num_streams, rates, objective,
                               self.state, self.modes)

    def _evaluate(self):
        total, _ = bf.sum_rate(self.ch, self.state, modes=self.modes)
        obj = float(np.sum(bf.per_stream_rates(self.ch, self.state,
                                               modes=self.modes)))
        return total, obj


def _assemble_trace(scenario: Scenario, num_streams: int, rates: np.ndarray,
                    objective: np.ndarray, state: BeamformerState,
                    modes: np.ndarray) -> FbTrace:
    T = rates.size - 1
    fwd, bwd = pilots_per_round(scenario.strategy, num_streams,
                                scenario.weight_carriage)
    t = np.arange(T + 1)
    label = "C (simplified)" if scenario.strategy == "C" else scenario.strategy
    return FbTrace(strategy=label, gamma=scenario.gamma, sum_rate=rates,
                   objective=objective,
                   pilot_symbols=t * (fwd + bwd),
                   eff_throughput=np.maximum(0.0, 1.0 - t * scenario.gamma)
                   * rates,
                   final_state=state, modes=modes)


def _modes_for(scenario: Scenario, channels: ChannelSet) -> np.ndarray:
    if scenario.duplex == "all_dl":
        return np.zeros(channels.topology.num_cells, dtype=int)
    seed = _derived_seed(scenario.seed, 0xD)
    return assign_duplex_modes(channels.topology, scenario.p_ul, seed)


def run_dynamic_tdd(scenario: Scenario, channels: ChannelSet,
                    modes) -> FbTrace:
    """Training run with an explicit per-cell UL/DL mode assignment."""
    return _Engine(scenario, channels, modes).run(scenario.T)


def run_strategy_a(scenario: Scenario, channels: ChannelSet) -> FbTrace:
    sc = replace(scenario, strategy="A")
    return _Engine(sc, channels, _modes_for(sc, channels)).run(sc.T)


def run_strategy_b(scenario: Scenario, channels: ChannelSet) -> FbTrace:
    # B exchanges everything over the air; backhaul carriage is not used.
    sc = replace(scenario, strategy="B", weight_carriage="extra_pilot")
    return _Engine(sc, channels, _modes_for(sc, channels)).run(sc.T)


def run_strategy_c(scenario: Scenario, channels: ChannelSet) -> FbTrace:
    sc = replace(scenario, strategy="C")
    return _Engine(sc, channels, _modes_for(sc, channels)).run(sc.T)


def run_strategy_d(scenario: Scenario, channels: ChannelSet) -> FbTrace:
    sc = replace(scenario, strategy="D")
    return _Engine(sc, channels, _modes_for(sc, channels)).run(sc.T)


def _run_uncoordinated(scenario: Scenario, channels: ChannelSet,
                       modes) -> FbTrace:
    state = uncoordinated_state(channels, modes, scenario)
    total, _ = bf.sum_rate(channels, state, modes=modes)
    obj = float(np.sum(bf.per_stream_rates(channels, state, modes=modes)))
    rates = np.full(scenario.T + 1, total)
    objective = np.full(scenario.T + 1, obj)
    trace = _assemble_trace(scenario, 0, rates, objective, state, modes)
    # No training happens: no pilots, no overhead discount.
    trace.pilot_symbols = np.zeros(scenario.T + 1, dtype=int)
    trace.eff_throughput = rates.copy()
    return trace


def _run_centralized(scenario: Scenario, channels: ChannelSet,
                     modes) -> FbTrace:
    state, _, snaps = bf.wmmse_centralized(
        channels, scenario.d, scenario.per_bs_power, max_iter=scenario.T,
        tol=0.0, constraint_kind=scenario.constraint_kind,
        init=scenario.init, record_states=True)
    while len(snaps) < scenario.T + 1:
        snaps.append(snaps[-1])
    rates = np.zeros(scenario.T + 1)
    objective = np.zeros(scenario.T + 1)
    for t, precoders in enumerate(snaps):
        snap_state = BeamformerState(
            precoders=precoders, per_bs_power=scenario.per_bs_power,
            constraint_kind=scenario.constraint_kind)
        rates[t], _ = bf.sum_rate(channels, snap_state)
        objective[t] = float(np.sum(bf.per_stream_rates(channels,
                                                        snap_state)))
    trace = _assemble_trace(scenario, 0, rates, objective, state, modes)
    trace.pilot_symbols = np.zeros(scenario.T + 1, dtype=int)
    return trace


def run_scenario(scenario: Scenario, channels: ChannelSet) -> FbTrace:
    """Dispatch a scenario to its runner (training strategy or reference)."""
    problems = scenario.validate()
    if problems:
        raise InvalidParameterError("; ".join(problems))
    modes = _modes_for(scenario, channels)
    if scenario.strategy == "uncoordinated":
        return _run_uncoordinated(scenario, channels, modes)
    if scenario.strategy == "centralized":
        return _run_centralized(scenario, channels, modes)
    if scenario.strategy == "B":
        return run_strategy_b(scenario, channels)
    return _Engine(scenario, channels, modes).run(scenario.T)
