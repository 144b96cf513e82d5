import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfkoopman.dataset import Dataset
from wfkoopman.mpc import build_farm_qlpv
from wfkoopman.plant import (FarmPlant, PlantConfig, PlantState, SegmentWinds, effective_wind_speed,
                             farm_step, generate_excitation, greedy_power, induction, preroll_length,
                             simulate_openloop, turbine_step, wake_step)

# spec behaviour: no rotor blockage, so U_r1 = V_inf exactly
NO_BLOCK = PlantConfig(k_ind=0.0)


class TestConfig:
    def test_derived_area(self):
        cfg = PlantConfig()
        assert cfg.A_r == pytest.approx(math.pi * 63.0**2, rel=1e-12)
        assert cfg.spacing == pytest.approx(630.0)
        assert cfg.delay == 79

    @pytest.mark.parametrize("kw", [dict(V_inf=0), dict(tau=0), dict(tau=1.5), dict(cp_offset=-1),
                                    dict(k_w=-0.1), dict(dt=0), dict(n_T=3)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PlantConfig(**kw)

    def test_text_roundtrip(self, tmp_path):
        cfg = PlantConfig(tau=0.25, cp_offset=0.05, T_mix=15.0)
        cfg.save(tmp_path / "p.txt")
        assert PlantConfig.from_text((tmp_path / "p.txt").read_text()) == cfg

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            PlantConfig.from_mapping({"bogus": "1"})


class TestEffectiveWind:
    def test_uniform(self):
        assert effective_wind_speed(SegmentWinds.uniform(8.0, 5)) == pytest.approx(8.0)

    def test_pythagoras(self):
        assert effective_wind_speed(SegmentWinds([3.0], [4.0])) == pytest.approx(5.0)

    def test_yaw(self):
        assert effective_wind_speed(SegmentWinds.uniform(8.0, 5), math.pi / 3) == pytest.approx(4.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            effective_wind_speed(SegmentWinds([], []))


class TestTurbine:
    def test_one_step_convergence(self):
        cfg = PlantConfig(tau=1.0)
        P, _ = turbine_step(0.0, 0.0, 8.0, 1.0, cfg)
        assert P == pytest.approx(3.9103e6, rel=1e-4)

    def test_zero_thrust_decay(self):
        cfg = PlantConfig(tau=0.3)
        P, Chat = turbine_step(1e6, 1.0, 8.0, 0.0, cfg)
        assert P == pytest.approx(0.7e6)
        assert Chat == pytest.approx(0.7)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
    def test_fixed_point_independent_of_tau(self, tau):
        cfg = PlantConfig(tau=tau)
        P_star = cfg.power_gain * 7.0**3 * 1.3
        P, _ = turbine_step(P_star, 1.3, 7.0, 1.3, cfg)
        assert P == pytest.approx(P_star, rel=1e-14)

    def test_offset_only_in_plant(self):
        cfg = PlantConfig(tau=1.0, cp_offset=0.05)
        P, _ = turbine_step(0.0, 0.0, 8.0, 1.0, cfg)
        P0, _ = turbine_step(0.0, 0.0, 8.0, 1.0, cfg, apply_offset=False)
        assert P / P0 == pytest.approx(1.05)

    def test_negative_wind(self):
        with pytest.raises(ValueError):
            turbine_step(0.0, 0.0, -1.0, 1.0, PlantConfig())


class TestWake:
    def test_no_thrust_no_wake(self):
        cfg = NO_BLOCK
        s = PlantState.steady(cfg, [0.0, 0.0])
        for _ in range(cfg.delay + 200):
            wake_step(s, 0.0, cfg)
        assert s.U_wake == pytest.approx(cfg.V_inf)

    def test_full_deficit(self):
        # a = 1/3 at C_T = 2; the lag leaves a residual (1 - dt/T_mix)^n of the step
        cfg = PlantConfig(k_w=0.0, k_ind=0.0)
        s = PlantState.steady(cfg, [0.0, 0.0])
        target = cfg.V_inf / 3.0
        n_lag = int(5 * cfg.T_mix)
        for _ in range(cfg.delay + n_lag):
            farm_step(s, [2.0, 2.0], cfg)
        expect = target + (cfg.V_inf - target) * (1 - cfg.dt / cfg.T_mix) ** n_lag
        assert s.U_r[1] == pytest.approx(expect, rel=1e-12)
        for _ in range(int(cfg.T_mix)):
            farm_step(s, [2.0, 2.0], cfg)
        assert s.U_r[1] == pytest.approx(target, rel=0.01)

    def test_transport_delay(self):
        cfg = PlantConfig()
        s = PlantState.steady(cfg, [1.0, 1.0])
        U0 = s.U_wake
        for k in range(cfg.delay):
            wake_step(s, 2.0, cfg)
            assert s.U_wake == U0, k
        wake_step(s, 2.0, cfg)
        assert s.U_wake < U0

    def test_induction_inverse(self):
        a = induction(np.array([0.0, 2.0, 4.0]))
        assert np.allclose(a, [0.0, 1.0 / 3.0, 0.5])
        assert np.allclose(4 * a / (1 - a), [0.0, 2.0, 4.0])


class TestFarm:
    def test_zero_input_from_rest(self):
        cfg = PlantConfig()
        s = PlantState.steady(cfg, [0.0, 0.0])
        for _ in range(50):
            _, out = farm_step(s, [0.0, 0.0], cfg)
            assert out["P_WF"] == 0.0

    def test_clamping_flagged(self):
        cfg = PlantConfig()
        s = PlantState.steady(cfg, [1.0, 1.0])
        _, out = farm_step(s, [3.0, -1.0], cfg)
        assert out["clamped"]
        assert np.all(s.Chat <= cfg.C_T_max)

    def test_wake_acts_without_downstream_thrust(self):
        cfg = PlantConfig()
        s = PlantState.steady(cfg, [0.0, 0.0])
        for _ in range(cfg.delay + 100):
            _, out = farm_step(s, [1.5, 0.0], cfg)
        assert out["P2"] == 0.0
        assert out["U_r2"] < cfg.V_inf * 0.95

    def test_energy_and_speed_bounds(self):
        cfg = PlantConfig(cp_offset=0.05)
        u = generate_excitation(600, 0.0, 2.0, 0.05, seed=3)
        s = PlantState.steady(cfg, [1.0, 1.0])
        cap = cfg.power_gain * cfg.V_inf**3 * cfg.C_T_max * (1 + cfg.cp_offset)
        for k in range(u.shape[0]):
            farm_step(s, u[k], cfg)
            assert np.all(s.P >= 0) and np.all(s.P <= cap)
            assert np.all(s.U_r > 0) and np.all(s.U_r <= cfg.V_inf)

    def test_causality(self):
        cfg = PlantConfig()
        a, b = PlantState.steady(cfg, [1.0, 1.0]), PlantState.steady(cfg, [1.0, 1.0])
        for k in range(cfg.delay):
            farm_step(a, [1.0, 1.0], cfg)
            farm_step(b, [1.0 if k < 3 else 2.0, 1.0], cfg)
            if k < 3 + cfg.delay - 1:
                assert a.U_wake == b.U_wake

    def test_matches_qlpv_without_wake(self):
        # k_w = 1 and no blockage: winds are frozen, plant is exactly linear
        cfg = PlantConfig(k_w=1.0, k_ind=0.0)
        s = PlantState.steady(cfg, [1.0, 1.0])
        A, B = build_farm_qlpv(s.U_r, cfg.tau, cfg.rho_a, cfg.A_r)
        x = np.array([s.P[0], s.Chat[0], s.P[1], s.Chat[1]])
        u = generate_excitation(300, 0.0, 2.0, 0.05, seed=1)
        for k in range(u.shape[0]):
            farm_step(s, u[k], cfg)
            x = A @ x + B @ u[k]
            got = np.array([s.P[0], s.Chat[0], s.P[1], s.Chat[1]])
            assert np.allclose(got, x, rtol=1e-10, atol=1e-10 * 1e6)


class TestGreedy:
    def test_no_wake_doubles_single(self):
        cfg = PlantConfig(k_w=1.0, k_ind=0.0)
        single = cfg.power_gain * cfg.V_inf**3 * cfg.C_T_max
        assert greedy_power(cfg) == pytest.approx(2 * single, rel=1e-5)

    def test_wake_reduces(self):
        cfg = PlantConfig()
        upstream = cfg.power_gain * cfg.V_inf**3 * cfg.C_T_max
        assert greedy_power(cfg) < 2 * upstream

    def test_cubic_law(self):
        a = greedy_power(PlantConfig())
        b = greedy_power(PlantConfig(V_inf=16.0))
        assert b / a == pytest.approx(8.0, rel=0.01)

    def test_no_convergence(self):
        with pytest.raises(RuntimeError):
            greedy_power(PlantConfig(), max_steps=10)


class TestExcitation:
    def test_deterministic(self):
        a = generate_excitation(500, 0.2, 2.0, 0.02, seed=4)
        b = generate_excitation(500, 0.2, 2.0, 0.02, seed=4)
        assert a.tobytes() == b.tobytes()
        assert a.shape == (500, 2)

    def test_near_nyquist_is_white(self):
        x = generate_excitation(10_000, 0.0, 1.0, 0.499, seed=1)[:, 0]
        x = x - x.mean()
        assert abs(np.dot(x[1:], x[:-1]) / np.dot(x, x)) < 0.3

    def test_histogram_span(self):
        x = generate_excitation(10_000, 0.2, 2.0, 0.01, seed=2)
        assert np.ptp(x[:, 0]) >= 0.8 * 1.8

    @pytest.mark.parametrize("args", [(0, 0, 1, 0.1), (10, 1, 0, 0.1), (10, 0, 1, 0.6), (10, 0, 1, 0.0)])
    def test_errors(self, args):
        with pytest.raises(ValueError):
            generate_excitation(*args, seed=0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 300), st.floats(0.001, 0.49), st.integers(0, 1000))
    def test_bounds_property(self, n, fc, seed):
        x = generate_excitation(n, -1.0, 1.0, fc, seed)
        assert np.all(x >= -1.0) and np.all(x <= 1.0)


class TestOpenLoop:
    def test_constant_input_constant_signals(self):
        d = simulate_openloop(PlantConfig(), np.full((200, 2), 1.0))
        assert np.allclose(d.X, d.X[:, :1], rtol=1e-9)

    def test_bookkeeping_and_power_sum(self, tmp_path):
        u = generate_excitation(1000, 0.2, 2.0, 0.02, seed=7)
        d = simulate_openloop(PlantConfig(), u)
        assert d.n_o == 1000
        d.to_csv(tmp_path / "d.csv")
        text = (tmp_path / "d.csv").read_text()
        assert text.splitlines()[0] == "k,Ur1,Ur2,P1,P2,CT1,CT2"
        back = Dataset.from_csv(tmp_path / "d.csv")
        assert np.allclose(back.X, d.X, rtol=1e-11)
        assert np.allclose(back.channel("P1") + back.channel("P2"),
                           d.channel("P1") + d.channel("P2"), rtol=1e-11)

    def test_bytes_deterministic(self, tmp_path):
        u = generate_excitation(300, 0.2, 2.0, 0.02, seed=7)
        simulate_openloop(PlantConfig(), u).to_csv(tmp_path / "a.csv")
        simulate_openloop(PlantConfig(), u).to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_preroll(self):
        cfg = PlantConfig()
        assert preroll_length(cfg) == 2 * cfg.delay + 100

    def test_farm_plant_settles(self):
        fp = FarmPlant(PlantConfig(), [1.0, 1.0])
        m = fp.measure()
        fp.step([1.0, 1.0])
        assert fp.measure()["P2"] == pytest.approx(m["P2"], rel=1e-9)
