import json

import numpy as np
import pytest

from wfkoopman.experiments.config import (DEFAULT_CONFIG_TEXT, DataConfig, RunConfig, load_config, parse_config,
                                          with_overrides)
from wfkoopman.experiments.figures import plot_simlog, plot_te_bars
from wfkoopman.experiments.scenarios import (SETTLE, Metrics, ReferenceConfig, ScenarioConfig, actuator_activity,
                                             format_table, recompute_metrics, reference_signal,
                                             reference_trajectory, run_scenario, synth_deltaP, tracking_error,
                                             write_outputs)
from wfkoopman.koopman import Lifting, Normalizer, build_snapshot_matrices, edmd_fit, save_model
from wfkoopman.mpc import SIMLOG_COLUMNS, MpcConfig, SimLog
from wfkoopman.plant import PlantConfig, generate_excitation, simulate_openloop

REF = ReferenceConfig()
SHORT = ReferenceConfig(T=160, switch_k=80)


def make_log(pref, pwf, u=None):
    n = len(pref)
    u = np.ones((n, 2)) if u is None else np.asarray(u, float)
    data = {c: np.zeros(n) for c in SIMLOG_COLUMNS}
    data.update(k=np.arange(n, dtype=float), Pref=np.asarray(pref, float), PWF=np.asarray(pwf, float),
                CT1=u[:, 0], CT2=u[:, 1])
    return SimLog(data)


@pytest.fixture(scope="module")
def wind_model_file(tmp_path_factory):
    d = simulate_openloop(PlantConfig(), generate_excitation(1200, 0.2, 2.0, 0.01, seed=2))
    lift = Lifting("cubic", 2, x_norm=Normalizer.fit(d.states(("Ur1", "Ur2"))))
    m = edmd_fit(build_snapshot_matrices(d, lift, states=("Ur1", "Ur2")), lift, state_names=("Ur1", "Ur2"),
                 output_names=("Ur1", "Ur2"), input_names=d.input_names)
    path = tmp_path_factory.mktemp("models") / "k24.txt"
    save_model(m, path)
    return str(path)


class TestReference:
    def test_examples(self):
        zeros = np.zeros(1000)
        assert reference_signal(100, 100.0, zeros, REF) == pytest.approx(80.0)
        assert reference_signal(500, 100.0, zeros, REF) == pytest.approx(95.0)
        assert reference_signal(100, 100.0, np.full(1000, 0.1), REF) == pytest.approx(83.5)

    def test_switch_boundary(self):
        zeros = np.zeros(1000)
        assert reference_signal(400, 100.0, zeros, REF) == pytest.approx(80.0)
        assert reference_signal(401, 100.0, zeros, REF) == pytest.approx(95.0)

    def test_beyond_T(self):
        with pytest.raises(ValueError):
            reference_signal(1000, 1.0, np.zeros(1000), REF)

    @pytest.mark.parametrize("kw", [dict(switch_k=0), dict(switch_k=1000), dict(base=(0.0, 0.9)),
                                    dict(amplitude=(0.35, 1.5))])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            ReferenceConfig(**kw)

    def test_trajectory_from_file(self, tmp_path):
        dp = synth_deltaP(1000, 3, 0.01)
        np.savetxt(tmp_path / "dp.csv", dp, delimiter=",")
        a = reference_trajectory(1e6, ReferenceConfig(deltaP_file=str(tmp_path / "dp.csv")))
        b = reference_trajectory(1e6, REF, dp)
        assert np.allclose(a, b, rtol=1e-15)


class TestDeltaP:
    def test_reproducible(self):
        assert np.array_equal(synth_deltaP(1000, 11, 0.01), synth_deltaP(1000, 11, 0.01))

    def test_peak_and_spread(self):
        x = synth_deltaP(1000, 11, 0.01)
        assert np.max(np.abs(x)) == pytest.approx(1.0, abs=1e-12)
        assert np.mean(np.abs(x)) < 0.6
        assert abs(np.mean(x)) < 1e-12

    def test_bad_length(self):
        with pytest.raises(ValueError):
            synth_deltaP(0, 1, 0.01)


class TestMetrics:
    def test_te_examples(self):
        n = 200
        p = np.linspace(1e6, 2e6, n)
        assert tracking_error(make_log(p, p)) == 0.0
        assert tracking_error(make_log(p, p - 5e3)) == pytest.approx(5e3)
        alt = np.where(np.arange(n) % 2 == 0, 1.0, -1.0) * 7e3
        assert tracking_error(make_log(p, p + alt)) == pytest.approx(7e3)

    def test_te_skips_settling(self):
        p = np.ones(100)
        pwf = p.copy()
        pwf[:SETTLE] = 1e9
        assert tracking_error(make_log(p, pwf)) == 0.0

    def test_aa_examples(self):
        n = 100
        assert actuator_activity(make_log(np.ones(n), np.ones(n))) == 0.0
        u = np.ones((n, 2))
        u[70:, 1] = 2.0
        aa = actuator_activity(make_log(np.ones(n), np.ones(n), u), settle=0)
        assert aa == pytest.approx(1.0 / (n - 1))
        assert actuator_activity(make_log(np.ones(n), np.ones(n), u)) == pytest.approx(1.0 / (n - SETTLE))

    def test_aa_quadratic(self):
        rng = np.random.default_rng(0)
        u = np.cumsum(rng.normal(size=(120, 2)), axis=0)
        a = actuator_activity(make_log(np.ones(120), np.ones(120), u))
        b = actuator_activity(make_log(np.ones(120), np.ones(120), 2 * u))
        assert b == pytest.approx(4 * a)

    def test_metrics_vaf_without_estimates(self):
        log = make_log(np.linspace(0, 1, 100), np.linspace(0, 1, 100))
        log.data["Ur1_est"][:] = np.nan
        m = Metrics.from_log(log)
        assert "Ur1" not in m.VAF and m.VAF["PWF"] == 100.0


class TestScenarioConfig:
    def test_scenario1_forces_zero_epsilon(self):
        assert ScenarioConfig(scenario=1, epsilon=0.05).plant_config().cp_offset == 0.0
        assert ScenarioConfig(scenario=2, epsilon=0.05).plant_config().cp_offset == 0.05

    @pytest.mark.parametrize("kw", [dict(scenario=3), dict(controller="pid")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ScenarioConfig(**kw)

    def test_missing_model_fails_first(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_scenario(ScenarioConfig(model=str(tmp_path / "none.txt")))


class TestRunScenario:
    def test_outputs_and_recomputation(self, wind_model_file, tmp_path):
        cfg = ScenarioConfig(scenario=1, controller="qlmpc_k24_baseline", model=wind_model_file, reference=SHORT)
        res = run_scenario(cfg)
        paths = write_outputs(res, tmp_path)
        assert {p.name for p in paths.values()} == {
            "s1_qlmpc_k24_baseline_simlog.csv", "s1_qlmpc_k24_baseline_metrics.json",
            "s1_qlmpc_k24_baseline_report.txt", "s1_qlmpc_k24_baseline.png"}
        md = json.loads(paths["metrics"].read_text())
        for key in ("te_watts", "aa", "vaf", "scenario", "controller", "seed"):
            assert key in md
        again = recompute_metrics(paths["simlog"])
        assert again.TE == pytest.approx(md["te_watts"], rel=1e-9)
        assert again.AA == pytest.approx(md["aa"], rel=1e-9, abs=1e-15)
        for ch, v in md["vaf"].items():
            assert again.VAF[ch] == pytest.approx(v, abs=1e-7)
        assert paths["figure"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert "TE = RMS" in paths["report"].read_text()

    def test_zero_epsilon_tags_identical(self, wind_model_file):
        a = run_scenario(ScenarioConfig(scenario=1, controller="qlmpc_ae1", model=wind_model_file, reference=SHORT))
        b = run_scenario(ScenarioConfig(scenario=2, epsilon=0.0, controller="qlmpc_ae1", model=wind_model_file,
                                        reference=SHORT))
        assert a.log.to_csv() == b.log.to_csv()

    def test_rerun_byte_identical(self, wind_model_file, tmp_path):
        cfg = ScenarioConfig(controller="qlmpc_ae1", model=wind_model_file, reference=SHORT)
        p1 = write_outputs(run_scenario(cfg), tmp_path / "a")
        p2 = write_outputs(run_scenario(cfg), tmp_path / "b")
        for key in ("simlog", "metrics", "report", "figure"):
            assert p1[key].read_bytes() == p2[key].read_bytes(), key


class TestReport:
    def test_table(self):
        rows = [{"scenario": 1, "controller": "kmpc_ae2", "epsilon": 0.0, "te_watts": 151110.0, "aa": 0.18,
                 "vaf": {"PWF": 99.2}},
                {"scenario": 1, "controller": "qlmpc_ae1", "epsilon": 0.0, "te_watts": 147570.0, "aa": 0.12,
                 "vaf": {"Ur1": 88.4, "Ur2": 98.8, "PWF": 98.8}}]
        text = format_table(rows)
        lines = text.splitlines()
        assert lines[0].split()[:4] == ["scenario", "controller", "eps", "TE"]
        assert "151.11" in lines[2] and "147.57" in lines[3]
        assert "AA = mean" in text

    def test_bar_figure(self, tmp_path):
        rows = [{"scenario": s, "controller": c, "te_watts": 1e5 * (s + i)}
                for s in (1, 2) for i, c in enumerate(("qlmpc_ae1", "kmpc_ae2"))]
        p = plot_te_bars(rows, tmp_path / "te.png")
        assert p.read_bytes()[:4] == b"\x89PNG"

    def test_simlog_figure_without_estimates(self, tmp_path):
        log = make_log(np.ones(60), np.ones(60))
        log.data["Ur1_est"][:] = np.nan
        assert plot_simlog(log, tmp_path / "f.png").is_file()


class TestConfig:
    def test_default_text_matches_defaults(self):
        rc = parse_config(DEFAULT_CONFIG_TEXT)
        base = RunConfig()
        assert (rc.plant, rc.data, rc.training, rc.mpc, rc.reference) == (
            base.plant, base.data, base.training, base.mpc, base.reference)
        assert rc.scenario == {"scenario": 1, "epsilon": 0.05}

    def test_parse_values(self):
        rc = parse_config("[plant]\ntau = 0.25\n[training]\nn = 500\nepochs = 3\n"
                          "[mpc]\nq = 2e-4\noffset_correction = false\n[scenario]\ncontroller = kmpc_ae2\n")
        assert rc.plant.tau == 0.25 and rc.data.n == 500 and rc.training.epochs == 3
        assert rc.mpc.q == 2e-4 and rc.mpc.offset_correction is False
        sc = rc.scenario_config(scenario=2)
        assert sc.controller == "kmpc_ae2" and sc.scenario == 2 and sc.plant.tau == 0.25

    @pytest.mark.parametrize("text", ["[bogus]\na = 1\n", "[mpc]\nhorizon_len = 3\n", "[scenario]\nfoo = 1\n"])
    def test_unknown_keys(self, text):
        with pytest.raises(KeyError):
            parse_config(text)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            parse_config("[mpc]\nn_h = 1\n")

    def test_load_and_overrides(self, tmp_path):
        assert load_config(None) == RunConfig()
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nope.ini")
        (tmp_path / "c.ini").write_text(DEFAULT_CONFIG_TEXT)
        assert load_config(tmp_path / "c.ini").mpc == MpcConfig()
        dc = with_overrides(DataConfig(), n=10, cutoff_hz=None)
        assert dc.n == 10 and dc.cutoff_hz == DataConfig().cutoff_hz
