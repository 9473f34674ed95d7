import numpy as np
import pytest
from scipy.optimize import minimize

from fbtrain import beamforming as bf
from fbtrain.channel import generate_channels
from fbtrain.errors import InvalidParameterError
from fbtrain.topology import drop_users, generate_hex_grid


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def network(tiers=1, users=2, m=4, n=2, seed=3, snr_db=15.0, cross=False):
    topo = drop_users(generate_hex_grid(tiers, 200.0), users, seed=seed)
    from fbtrain.channel import calibrate_noise
    noise = calibrate_noise(topo, snr_db)
    return generate_channels(topo, m, n, seed=seed + 1,
                             include_cross_links=cross, noise_power=noise)


def mse_of(receiver_col, observed, desired_col, noise):
    gains = receiver_col.conj() @ observed
    own = gains[desired_col]
    interf = np.sum(np.abs(gains) ** 2) - np.abs(own) ** 2
    return (np.abs(1 - own) ** 2 + interf
            + noise * np.sum(np.abs(receiver_col) ** 2))


class TestMmseReceiver:
    def test_unit_vector_half_scale(self):
        # (e1 e1^H + I)^{-1} e1 = e1 / 2
        h = np.array([[1.0], [0.0]], dtype=complex)
        w = bf.mmse_receiver(h, h, 1.0)
        np.testing.assert_allclose(w, h / 2.0, rtol=1e-14)

    def test_high_noise_matched_filter_limit(self):
        rng = np.random.default_rng(0)
        h = crandn(rng, 3, 1)
        obs = np.hstack([h, crandn(rng, 3, 2)])
        noise = 1e9
        w = bf.mmse_receiver(h, obs, noise)
        np.testing.assert_allclose(w * noise, h, rtol=1e-6)

    def test_matches_numerical_mse_minimizer(self):
        # independent oracle: BFGS over the real parametrization of w
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            obs = crandn(rng, 2, 4)
            noise = rng.uniform(0.05, 1.0)
            w = bf.mmse_receiver(obs[:, [0]], obs, noise)[:, 0]
            mse_closed = mse_of(w, obs, 0, noise)

            def objective(x):
                wc = x[:2] + 1j * x[2:]
                return mse_of(wc, obs, 0, noise)

            res = minimize(objective, np.zeros(4), method="BFGS",
                           options={"gtol": 1e-12})
            worst = max(worst, mse_closed - res.fun)
        assert worst <= 1e-6

    def test_perturbations_never_decrease_mse(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            obs = crandn(rng, 3, 5)
            noise = rng.uniform(0.1, 2.0)
            w = bf.mmse_receiver(obs[:, [1]], obs, noise)[:, 0]
            base = mse_of(w, obs, 1, noise)
            for _ in range(5):
                delta = crandn(rng, 3)
                delta = 1e-3 * delta / np.linalg.norm(delta)
                assert mse_of(w + delta, obs, 1, noise) >= base - 1e-15


class TestStreamMseAndWeight:
    def test_zero_receiver(self):
        obs = np.ones((2, 3), dtype=complex)
        mse, weight = bf.stream_mse_and_weight(np.zeros((2, 1)), obs, [0],
                                               0.5)
        assert mse[0] == pytest.approx(1.0)
        assert weight[0] == pytest.approx(1.0)

    def test_weight_rate_identity(self):
        # at the MMSE receiver log2(weight) equals log2(1 + SINR)
        rng = np.random.default_rng(3)
        for _ in range(50):
            obs = crandn(rng, 2, 5)
            noise = rng.uniform(0.05, 1.0)
            w = bf.mmse_receiver(obs[:, [0, 1]], obs, noise)
            _, weight = bf.stream_mse_and_weight(w, obs, [0, 1], noise)
            for s in range(2):
                h = obs[:, s]
                others = np.delete(obs, s, axis=1)
                q = others @ others.conj().T + noise * np.eye(2)
                sinr = float(np.real(h.conj() @ np.linalg.solve(q, h)))
                assert np.log2(weight[s]) == pytest.approx(
                    np.log2(1 + sinr), rel=1e-6)

    def test_scale_invariance_at_mmse(self):
        rng = np.random.default_rng(4)
        obs = crandn(rng, 3, 4)
        noise = 0.3
        w = bf.mmse_receiver(obs[:, [0]], obs, noise)
        mse, _ = bf.stream_mse_and_weight(w, obs, [0], noise)
        c = 7.0
        w2 = bf.mmse_receiver(np.sqrt(c) * obs[:, [0]], np.sqrt(c) * obs,
                              c * noise)
        mse2, _ = bf.stream_mse_and_weight(w2, np.sqrt(c) * obs, [0],
                                           c * noise)
        assert mse2[0] == pytest.approx(mse[0], rel=1e-10)


class TestPrecoderUpdate:
    def test_single_stream_matched_direction_full_power(self):
        # unit cascade: the MSE optimum g^H m = 1 lands exactly on the
        # unit budget (matched direction, full power)
        g = np.array([[1.0], [0.0]], dtype=complex)
        sol = bf.precoder_update(g, np.array([5.0]), [0], power=1.0)
        assert np.sum(np.abs(sol) ** 2) == pytest.approx(1.0, rel=1e-8)
        assert abs(sol[1, 0]) < 1e-12         # matched to (1, 0)

    def test_single_stream_active_constraint_bisection(self):
        # weak cascade: the unconstrained optimum overshoots the budget and
        # the bisection must land on it exactly
        g = np.array([[0.1], [0.0]], dtype=complex)
        sol = bf.precoder_update(g, np.array([5.0]), [0], power=2.0)
        assert np.sum(np.abs(sol) ** 2) == pytest.approx(2.0, rel=1e-8)
        assert abs(sol[1, 0]) < 1e-12

    def test_total_power_feasible_and_tight(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            g = crandn(rng, 4, 6)
            w = rng.uniform(0.5, 50.0, 6)
            sol = bf.precoder_update(g, w, [0, 1, 2], power=1.0)
            used = float(np.sum(np.abs(sol) ** 2))
            assert used <= 1.0 * (1 + 1e-8)

    def test_per_antenna_feasible(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            g = crandn(rng, 4, 6)
            w = rng.uniform(0.5, 50.0, 6)
            sol = bf.precoder_update(g, w, [0, 1], power=1.0,
                                     constraint_kind="per_antenna")
            rows = np.sum(np.abs(sol) ** 2, axis=1)
            assert np.max(rows) <= (1.0 / 4) * (1 + 1e-8)

    def test_zero_cascades_zero_precoder(self):
        g = np.zeros((3, 2), dtype=complex)
        sol = bf.precoder_update(g, np.ones(2), [0], power=1.0)
        assert not np.any(sol)

    def test_unknown_constraint(self):
        with pytest.raises(InvalidParameterError):
            bf.precoder_update(np.ones((2, 1), dtype=complex), np.ones(1),
                               [0], 1.0, constraint_kind="per_galaxy")

    def test_two_user_miso_against_grid_search(self):
        # exhaustive oracle: 2-degree direction grid, optimal global phase
        # in closed form, 101-point power split
        rng = np.random.default_rng(7)
        noise = 0.1
        power = 1.0
        nang, nph, npow = 46, 181, 201
        thetas = np.linspace(0, np.pi / 2, nang)
        phis = np.linspace(0, 2 * np.pi, nph, endpoint=False)
        th, ph = np.meshgrid(thetas, phis, indexing="ij")
        dirs = np.stack([np.cos(th), np.sin(th) * np.exp(1j * ph)],
                        axis=-1).reshape(-1, 2)
        pows = np.linspace(0, power, npow)

        def objective(h, w, v, m_all):
            total = 0.0
            for t in range(2):
                gains = np.conj(w[t]) * (h[t] @ m_all)
                total += v[t] * (abs(1 - gains[t]) ** 2
                                 + abs(gains[1 - t]) ** 2
                                 + noise * abs(w[t]) ** 2)
            return total

        for _ in range(5):
            h = crandn(rng, 2, 2) / np.sqrt(2)    # unit-variance entries
            w = crandn(rng, 2) / np.sqrt(2)
            v = rng.uniform(0.5, 3.0, 2)
            cascades = np.stack([h[t].conj() * w[t] for t in range(2)],
                                axis=1)
            sol = bf.precoder_update(cascades, v, [0, 1], power)
            j_closed = objective(h, w, v, sol)

            f = np.zeros((2, npow))
            for t in range(2):
                g_own = np.abs(np.conj(w[t]) * (dirs @ h[t]))
                g_other = np.abs(np.conj(w[1 - t]) * (dirs @ h[1 - t]))
                for ip, p in enumerate(pows):
                    val = v[t] * (1 - np.sqrt(p) * g_own) ** 2 \
                        + v[1 - t] * p * g_other ** 2
                    f[t, ip] = val.min()
                f[t] += v[t] * noise * abs(w[t]) ** 2
            fi, fj = np.meshgrid(np.arange(npow), np.arange(npow),
                                 indexing="ij")
            feasible = pows[fi] + pows[fj] <= power + 1e-12
            j_grid = float((f[0][fi] + f[1][fj])[feasible].min())
            assert j_closed <= j_grid + 1e-9
            assert abs(j_grid - j_closed) / j_grid <= 0.01


class TestSumRate:
    def test_scalar_capacity(self):
        topo = drop_users(generate_hex_grid(0, 200.0), 1, seed=1)
        chs = generate_channels(topo, 1, 1, seed=2)
        state = bf.BeamformerState(
            precoders={0: np.array([[2.0 + 0j]])})
        snr = abs(chs.dl(0, 0)[0, 0]) ** 2 * 4.0 / 0.25
        total, per_user = bf.sum_rate(chs, state, noise_power=0.25)
        assert total == pytest.approx(np.log2(1 + snr), rel=1e-12)
        assert per_user[0] == pytest.approx(total)

    def test_zero_precoders_zero_rate(self):
        chs = network()
        state = bf.initial_state(chs, d=1)
        state.precoders = {u: np.zeros_like(p)
                           for u, p in state.precoders.items()}
        total, per_user = bf.sum_rate(chs, state)
        assert total == 0.0 and not np.any(per_user)

    def test_matches_per_stream_sinr_decomposition(self):
        # d = 1: log-det rate equals log2(1 + SINR) with MMSE receivers
        chs = network(users=2)
        state = bf.initial_state(chs, d=1)
        total, per_user = bf.sum_rate(chs, state)
        per_stream = bf.per_stream_rates(chs, state)
        np.testing.assert_allclose(per_user, per_stream[:, 0], rtol=1e-9)
        assert total == pytest.approx(per_stream.sum(), rel=1e-9)


class TestInitialState:
    def test_power_split(self):
        chs = network(users=3)
        state = bf.initial_state(chs, d=2, per_bs_power=2.0)
        np.testing.assert_allclose(state.bs_power_used(chs), 2.0, rtol=1e-12)
        for u, p in state.precoders.items():
            np.testing.assert_allclose(np.sum(np.abs(p) ** 2, axis=0),
                                       2.0 / (3 * 2), rtol=1e-12)

    def test_d_bounds(self):
        chs = network()
        with pytest.raises(InvalidParameterError):
            bf.initial_state(chs, d=3)      # d > N = 2
        with pytest.raises(InvalidParameterError):
            bf.initial_state(chs, d=0)

    def test_random_init_seeded(self):
        chs = network()
        a = bf.initial_state(chs, d=1, init="random", seed=5)
        b = bf.initial_state(chs, d=1, init="random", seed=5)
        for u in a.precoders:
            np.testing.assert_array_equal(a.precoders[u], b.precoders[u])


class TestWmmseCentralized:
    def test_monotone_objective(self):
        chs = network(users=2)
        _, obj = bf.wmmse_centralized(chs, d=2, max_iter=25)
        steps = np.diff(obj)
        assert np.all(steps >= -1e-9 * np.abs(obj[:-1]))

    def test_single_user_miso_matched_filter(self):
        topo = drop_users(generate_hex_grid(0, 200.0), 1, seed=1)
        chs = generate_channels(topo, 4, 1, seed=2, noise_power=0.1)
        state, _ = bf.wmmse_centralized(chs, d=1, per_bs_power=1.0,
                                        max_iter=50)
        m = state.precoders[0][:, 0]
        h = chs.dl(0, 0)[0]
        cos = abs(np.vdot(h.conj(), m)) / (np.linalg.norm(h)
                                           * np.linalg.norm(m))
        assert cos == pytest.approx(1.0, abs=1e-8)
        assert np.sum(np.abs(m) ** 2) == pytest.approx(1.0, rel=1e-6)

    def test_power_feasible_every_iteration(self):
        chs = network(users=2)
        for kind in ("per_bs_total", "per_antenna"):
            state, _, snaps = bf.wmmse_centralized(
                chs, d=2, max_iter=10, tol=0.0, constraint_kind=kind,
                record_states=True)
            for snap in snaps:
                per_bs = np.zeros(chs.num_cells)
                for u, p in snap.items():
                    per_bs[chs.topology.serving_cell[u]] += \
                        float(np.sum(np.abs(p) ** 2))
                assert np.all(per_bs <= 1.0 * (1 + 1e-8))
                if kind == "per_antenna":
                    for cell in range(chs.num_cells):
                        rows = sum(np.sum(np.abs(snap[u]) ** 2, axis=1)
                                   for u in chs.topology.users_of(cell))
                        assert np.max(rows) <= (1.0 / 4) * (1 + 1e-8)

    def test_per_antenna_objective_below_per_bs(self):
        # per-antenna feasible set is a subset of the per-BS set
        gaps = []
        for seed in range(8):
            chs = network(users=2, seed=10 + seed)
            _, obj_total = bf.wmmse_centralized(chs, d=1, max_iter=40)
            _, obj_ap = bf.wmmse_centralized(chs, d=1, max_iter=40,
                                             constraint_kind="per_antenna")
            gaps.append(obj_total[-1] - obj_ap[-1])
        assert np.mean(gaps) >= 0.0


class TestUncoordinatedBaseline:
    def test_single_cell_equals_centralized(self):
        topo = drop_users(generate_hex_grid(0, 200.0), 3, seed=2)
        chs = generate_channels(topo, 4, 2, seed=5, noise_power=0.01)
        base = bf.uncoordinated_baseline(chs, d=1, max_iter=30)
        cent, _ = bf.wmmse_centralized(chs, d=1, max_iter=30)
        r_base, _ = bf.sum_rate(chs, base)
        r_cent, _ = bf.sum_rate(chs, cent)
        assert r_base == pytest.approx(r_cent, rel=1e-9)

    def test_zero_cross_gain_equals_centralized(self):
        chs = network(users=2).intra_cell_only()
        base = bf.uncoordinated_baseline(chs, d=1, max_iter=30)
        cent, _ = bf.wmmse_centralized(chs, d=1, max_iter=30)
        r_base, _ = bf.sum_rate(chs, base)
        r_cent, _ = bf.sum_rate(chs, cent)
        assert r_base == pytest.approx(r_cent, rel=1e-9)

    def test_loses_to_coordination_under_strong_interference(self):
        gains = []
        for seed in range(20):
            topo = drop_users(generate_hex_grid(1, 200.0), 2, seed=seed,
                              policy="cell_edge_band")
            from fbtrain.channel import calibrate_noise
            chs = generate_channels(topo, 4, 2, seed=seed + 100,
                                    noise_power=calibrate_noise(topo, 20.0))
            base = bf.uncoordinated_baseline(chs, d=1)
            coord, _ = bf.wmmse_centralized(chs, d=1, max_iter=40)
            r_base, _ = bf.sum_rate(chs, base)
            r_coord, _ = bf.sum_rate(chs, coord)
            gains.append(r_coord / r_base)
        assert np.mean(gains) > 1.0
