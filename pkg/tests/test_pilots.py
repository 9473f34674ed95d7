import numpy as np
import pytest

from fbtrain import beamforming as bf
from fbtrain.channel import generate_channels
from fbtrain.errors import (InfeasiblePlanError, InvalidParameterError,
                            SingularityError)
from fbtrain.pilots import (allocate_pilots, direct_filter_estimate,
                            observe_backward, observe_forward,
                            observe_whitened_channels)
from fbtrain.topology import drop_users, generate_hex_grid


def two_cell_setup(seed=3, users=2, m=4, n=2):
    topo = drop_users(generate_hex_grid(1, 200.0), users, seed=seed)
    chs = generate_channels(topo, m, n, seed=seed + 1, noise_power=0.01)
    state = bf.initial_state(chs, d=1)
    return chs, state


class TestAllocatePilots:
    def test_orthogonal_injective(self):
        plan = allocate_pilots(4, 4, "orthogonal")
        assert plan.is_orthogonal
        assert np.unique(plan.assignment).size == 4

    def test_orthogonal_infeasible(self):
        with pytest.raises(InfeasiblePlanError):
            allocate_pilots(8, 4, "orthogonal")

    def test_random_reuse_pigeonhole(self):
        plan = allocate_pilots(8, 4, "random_reuse", seed=0)
        assert not plan.is_orthogonal   # 8 streams in 4 sequences must share

    def test_seq_length_at_least_pool(self):
        with pytest.raises(InvalidParameterError):
            allocate_pilots(2, 4, "orthogonal", seq_length=3)

    def test_unknown_policy(self):
        with pytest.raises(InvalidParameterError):
            allocate_pilots(2, 4, "fancy")

    def test_estimation_noise_variance(self):
        plan = allocate_pilots(2, 4, "orthogonal", seq_length=8,
                               pilot_power=0.5)
        assert plan.estimation_noise_var(0.2) == pytest.approx(0.2 / 4.0)


class TestObserveForward:
    def test_orthogonal_noiseless_exact(self):
        chs, state = two_cell_setup()
        S = chs.num_users
        plan = allocate_pilots(S, S, "orthogonal")
        csi = observe_forward(chs, state.precoders, plan, 0.0, seed=0)
        tables = bf.receive_cascade_tables(chs, state.precoders)
        for u in range(chs.num_users):
            np.testing.assert_array_equal(csi.estimates[("ue", u)],
                                          tables[("ue", u)])

    def test_contamination_superposition(self):
        chs, state = two_cell_setup()
        S = chs.num_users
        # everyone shares one sequence: estimate = sum of all cascades
        plan = allocate_pilots(S, 1, "random_reuse", seed=0)
        csi = observe_forward(chs, state.precoders, plan, 0.0, seed=0)
        tables = bf.receive_cascade_tables(chs, state.precoders)
        for u in range(chs.num_users):
            np.testing.assert_allclose(
                csi.estimates[("ue", u)][:, 0],
                tables[("ue", u)].sum(axis=1), rtol=1e-12)

    def test_noise_variance_halves_with_double_length(self):
        chs, state = two_cell_setup()
        S = chs.num_users
        noise_power = 0.5
        errs = {}
        for seq_len in (S, 2 * S):
            plan = allocate_pilots(S, S, "orthogonal", seq_length=seq_len)
            exact = observe_forward(chs, state.precoders, plan, 0.0, seed=0)
            sq = []
            for seed in range(400):
                noisy = observe_forward(chs, state.precoders, plan,
                                        noise_power, seed=seed)
                for u in range(chs.num_users):
                    delta = noisy.estimates[("ue", u)] \
                        - exact.estimates[("ue", u)]
                    sq.append(np.abs(delta) ** 2)
            errs[seq_len] = float(np.mean(sq))
            assert np.size(sq) >= 10_000
        assert errs[S] / errs[2 * S] == pytest.approx(2.0, rel=0.05)


class TestObserveBackward:
    def setup_state(self):
        chs, state = two_cell_setup()
        noise = chs.noise_power
        tables = bf.receive_cascade_tables(chs, state.precoders)
        cols = bf.stream_cols(chs.num_users, 1)
        weights = np.zeros((chs.num_users, 1))
        for u in range(chs.num_users):
            t = tables[("ue", u)]
            state.receivers[u] = bf.mmse_receiver(t[:, cols[u]], t, noise)
            _, weights[u] = bf.stream_mse_and_weight(state.receivers[u], t,
                                                     cols[u], noise)
        state.weights = weights
        return chs, state

    def test_noiseless_exact_uplink_cascades(self):
        chs, state = self.setup_state()
        S = chs.num_users
        plan = allocate_pilots(S, S, "orthogonal")
        csi = observe_backward(chs, state.receivers, state.weights, plan,
                               0.0, seed=0)
        for cell in range(chs.num_cells):
            for u in range(chs.num_users):
                expected = chs.dl(cell, u).conj().T @ state.receivers[u]
                np.testing.assert_allclose(
                    csi.estimates[("bs", cell)][:, [u]], expected,
                    rtol=1e-12, atol=1e-15)

    def test_extra_pilot_carries_weights(self):
        chs, state = self.setup_state()
        S = chs.num_users
        plan = allocate_pilots(S, S, "orthogonal")
        csi = observe_backward(chs, state.receivers, state.weights, plan,
                               0.0, seed=0, weight_carriage="extra_pilot")
        assert csi.weighted is not None and csi.backhaul_weights is None
        flat = state.weights.reshape(-1)
        for cell in range(chs.num_cells):
            np.testing.assert_allclose(
                csi.weighted[("bs", cell)],
                csi.estimates[("bs", cell)] * np.sqrt(flat)[None, :],
                rtol=1e-12)

    def test_backhaul_carries_weights_error_free(self):
        chs, state = self.setup_state()
        S = chs.num_users
        plan = allocate_pilots(S, S, "orthogonal")
        csi = observe_backward(chs, state.receivers, state.weights, plan,
                               0.3, seed=0, weight_carriage="backhaul")
        assert csi.weighted is None
        np.testing.assert_array_equal(csi.backhaul_weights,
                                      state.weights.reshape(-1))

    def test_unknown_carriage(self):
        chs, state = self.setup_state()
        plan = allocate_pilots(chs.num_users, chs.num_users, "orthogonal")
        with pytest.raises(InvalidParameterError):
            observe_backward(chs, state.receivers, state.weights, plan, 0.0,
                             seed=0, weight_carriage="pigeon")


class TestObserveWhitenedChannels:
    def test_noiseless_exact(self):
        chs, state = two_cell_setup()
        users = [int(u) for u in chs.topology.users_of(0)]
        whiteners = {u: np.eye(2) * 2.0 for u in users}
        rng = np.random.default_rng(0)
        got = observe_whitened_channels(chs, 0, whiteners, 0.0, rng)
        for u in users:
            np.testing.assert_allclose(got[u], 2.0 * chs.dl(0, u),
                                       rtol=1e-12)

    def test_noise_added(self):
        chs, state = two_cell_setup()
        users = [int(u) for u in chs.topology.users_of(0)]
        whiteners = {u: np.eye(2) for u in users}
        rng = np.random.default_rng(0)
        got = observe_whitened_channels(chs, 0, whiteners, 0.1, rng)
        assert not np.allclose(got[users[0]], chs.dl(0, users[0]))


class TestDirectFilterEstimate:
    def test_identity_fit_selector_row(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((4, 100)) + 1j * rng.standard_normal((4, 100))
        w = direct_filter_estimate(y, y[1:2, :])
        expected = np.zeros((1, 4))
        expected[0, 1] = 1.0
        np.testing.assert_allclose(w, expected, atol=1e-10)

    def test_least_squares_against_lstsq_oracle(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal((3, 60)) + 1j * rng.standard_normal((3, 60))
        p = rng.standard_normal((2, 60)) + 1j * rng.standard_normal((2, 60))
        w = direct_filter_estimate(y, p)
        oracle = np.linalg.lstsq(y.conj().T, p.conj().T, rcond=None)[0].conj().T
        np.testing.assert_allclose(w, oracle, rtol=1e-8)

    def test_noiseless_single_stream_matches_mmse_direction(self):
        rng = np.random.default_rng(2)
        h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        s = rng.standard_normal((1, 500)) + 1j * rng.standard_normal((1, 500))
        y = np.outer(h, s[0])
        w = direct_filter_estimate(y, s)[0]
        # rank-1 covariance picks up the auto diagonal load; the direction
        # must match the single-stream MMSE filter (proportional to h^H)
        cos = abs(np.vdot(w.conj(), h)) / (np.linalg.norm(w)
                                           * np.linalg.norm(h))
        assert cos == pytest.approx(1.0, abs=1e-6)

    def test_singularity_without_regularization(self):
        h = np.array([1.0 + 0j, 2.0, 0.5, -1.0])
        s = np.ones((1, 40), dtype=complex)
        y = np.outer(h, s[0])     # rank-1 sample covariance
        with pytest.raises(SingularityError):
            direct_filter_estimate(y, s, diagonal_load=None)

    def test_requires_enough_symbols(self):
        y = np.zeros((4, 3), dtype=complex)
        p = np.zeros((1, 3), dtype=complex)
        with pytest.raises(InvalidParameterError):
            direct_filter_estimate(y, p)

    @staticmethod
    def _scene(rng, symbols, m=4, n_interf=2, snr_db=10.0):
        """One BS, one desired single-antenna user, interferers, AWGN.

        Returns received samples, the desired user's pilot row, and the
        true-covariance MMSE filter in row form (apply as w @ y).
        """
        noise = 10 ** (-snr_db / 10.0)
        h = (rng.standard_normal((n_interf + 1, m))
             + 1j * rng.standard_normal((n_interf + 1, m))) / np.sqrt(2)
        pilots = (rng.standard_normal((n_interf + 1, symbols))
                  + 1j * rng.standard_normal((n_interf + 1, symbols))) \
            / np.sqrt(2)
        y = h.T @ pilots
        y += np.sqrt(noise / 2) * (rng.standard_normal(y.shape)
                                   + 1j * rng.standard_normal(y.shape))
        cov = sum(np.outer(h[i], h[i].conj()) for i in range(n_interf + 1)) \
            + noise * np.eye(m)
        w_mmse = np.conj(np.linalg.solve(cov, h[0]))
        return y, pilots[0:1], w_mmse

    def test_error_decreases_with_symbols(self):
        rng = np.random.default_rng(3)
        mean_err = []
        for symbols in (50, 500, 5000):
            errs = []
            for _ in range(30):
                y, p, w_mmse = self._scene(rng, symbols)
                w = direct_filter_estimate(y, p)[0]
                cos = abs(np.vdot(w, w_mmse)) / (np.linalg.norm(w)
                                                 * np.linalg.norm(w_mmse))
                errs.append(1.0 - cos)
            mean_err.append(np.mean(errs))
        assert mean_err[0] > mean_err[1] > mean_err[2]
