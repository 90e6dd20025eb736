import numpy as np
import pytest

from mfcs.circuit import ConverterParams, MfcsInput, MfcsState, assemble_continuous, steady_state
from mfcs.hankel import check_persistency
from mfcs.simulator import (ConstantLoad, ExcitationController, HoldController, PiecewiseConstantLoad, SimConfig,
                            SimulationError, SineLoad, TrajectoryLog, collect_excitation_data, duty_from_command,
                            operating_point, run_closed_loop, run_discrete, step)
from plant import R_L, converters, discrete_model, legs


def excitation_sim(samples=30, seed=0):
    x_op, _ = operating_point(legs(), 400.0, 120.0)
    return SimConfig(samples * 1e-3, ConstantLoad(400.0), x_op, seed=seed)


class Recorder:
    """Hold controller that keeps every measurement it is shown."""

    def __init__(self, v_dc, i_b=0.0):
        self.inner = HoldController(v_dc, i_b)
        self.seen = []

    def control(self, meas):
        self.seen.append(meas)
        return self.inner.control(meas)

    def record(self, y, u, w):
        pass


def test_zero_state_zero_input_is_equilibrium():
    s = step(MfcsState.zeros(2), MfcsInput(np.zeros(2)), 0.0, 1e-5, converters())
    assert np.array_equal(s.to_vector(), np.zeros(4))


def test_converges_to_algebraic_steady_state():
    params = converters()
    inp = MfcsInput([123.0, 123.4], 2.0)
    x_ss = steady_state(assemble_continuous(params), inp.to_vector(), 400.0)
    s = MfcsState([150.0, 250.0], [118.0, 121.0])
    for _ in range(30000):
        s = step(s, inp, 400.0, 1e-5, params)
    assert np.allclose(s.to_vector(), x_ss, rtol=1e-3)


def test_fourth_order_convergence():
    params = converters()
    inp = MfcsInput([124.0, 122.0], 5.0)
    x0 = MfcsState([180.0, 220.0], [119.0, 121.0])

    def integrate(dt, horizon=2e-4):
        s = x0
        for _ in range(int(round(horizon / dt))):
            s = step(s, inp, 390.0, dt, params)
        return s.to_vector()

    h = 1e-5
    ref = integrate(h / 16)
    errs = [np.max(np.abs(integrate(h / 2 ** k) - ref)) for k in range(3)]
    for coarse, fine in zip(errs, errs[1:]):
        assert 8.0 <= coarse / fine <= 32.0


def test_lossless_lc_conserves_energy():
    # one leg: the bus equals U_C + r_C I_L, so the loop is an LC tank with series loss r_L + r_C
    p = [ConverterParams(100e-6, 1e-3, 1e-12, 1e-12)]
    s = MfcsState([50.0], [0.0])

    def energy(st):
        return 0.5 * p[0].l * st.i_l[0] ** 2 + 0.5 * p[0].c * st.u_c[0] ** 2

    e0 = energy(s)
    for _ in range(10000):
        s = step(s, MfcsInput([0.0]), 0.0, 1e-5, p)
    assert abs(energy(s) - e0) <= 1e-4 * e0


def test_step_divergence_and_dt_validation():
    with pytest.raises(ValueError):
        step(MfcsState.zeros(2), MfcsInput(np.zeros(2)), 0.0, 0.0, converters())
    with pytest.raises(SimulationError):
        step(MfcsState([1e7, 0.0], [0.0, 0.0]), MfcsInput(np.zeros(2)), 0.0, 1e-5, converters())


@pytest.mark.parametrize("cmd, v_fc, duty", [(200.0, 200.0, 1.0), (0.0, 250.0, 0.5), (150.0, 250.0, 0.6),
                                             (400.0, 250.0, 1.0)])
def test_duty_clamping(cmd, v_fc, duty):
    assert duty_from_command(cmd, v_fc) == pytest.approx(duty)


def test_duty_needs_positive_stack_voltage():
    with pytest.raises(ValueError):
        duty_from_command(100.0, 0.0)


def test_zero_load_zero_input_run():
    # the duty floor keeps V_DC >= V_FC / 2 in the circuit loop, so zero input is applied on the LTI loop
    log = run_discrete(discrete_model(), HoldController(0.0), np.zeros(4), ConstantLoad(0.0), 20, 250.0, R_L)
    assert not np.any(log.y) and not np.any(log.u) and not np.any(log.i_circ)


def test_duty_floor_limits_terminal_voltage():
    sim = SimConfig(0.01, ConstantLoad(0.0), MfcsState.zeros(2))
    log = run_closed_loop(sim, HoldController(0.0), legs())
    assert np.all(log.duty == 0.5)
    assert np.allclose(log.v_dc, 0.5 * log.v_fc)


def test_hold_phase_settles_without_sharing_correction():
    sim = SimConfig(0.1, ConstantLoad(400.0), MfcsState([0.0, 0.0], [120.0, 120.0]))
    log = run_closed_loop(sim, HoldController(120.0), legs())
    early = np.ptp(log.i_l[:20, 0])
    late = np.ptp(log.i_l[-20:, 0])
    assert early > 10 * late
    # lower-ESR leg carries more current with equal terminal voltages
    assert log.i_l[-1, 0] > log.i_l[-1, 1]
    assert np.allclose(log.v_dc[-1], log.v_dc[-1, 0])


def test_kcl_holds_at_every_logged_instant():
    rec = Recorder([122.0, 123.0], 15.0)
    sim = SimConfig(0.03, SineLoad(400.0, 40.0, 50.0), MfcsState([190.0, 200.0], [119.0, 120.0]))
    log = run_closed_loop(sim, rec, legs())
    r_c = np.array([c.r_c for c in converters()])
    for k, meas in enumerate(rec.seen):
        i_o = np.sum(meas.state.i_l - (log.v_o[k] - meas.state.u_c) / r_c)
        assert abs(i_o + log.i_b[k] - log.w[k]) <= 1e-9 * log.w[k]


def test_determinism_with_noise_and_seed():
    sim = SimConfig(0.02, SineLoad(400.0, 40.0, 50.0), MfcsState([200.0, 200.0], [120.0, 120.0]),
                    noise_amplitude=0.5, seed=11)
    a = run_closed_loop(sim, ExcitationController([123, 123, 0], 1.0, 5.0, 3), legs())
    b = run_closed_loop(sim, ExcitationController([123, 123, 0], 1.0, 5.0, 3), legs())
    assert np.array_equal(a.as_array(), b.as_array())


def test_excitation_data_is_deterministic_and_exciting():
    a = collect_excitation_data(excitation_sim(), legs(), 2.0, 5)
    b = collect_excitation_data(excitation_sim(), legs(), 2.0, 5)
    assert np.array_equal(a.as_array(), b.as_array())
    assert len(a) == 30
    report = check_persistency(a, 1, 2)
    assert report.ok and report.required_length == 11


def test_zero_amplitude_excitation_is_rank_deficient():
    log = collect_excitation_data(excitation_sim(), legs(), 0.0, 5, current_amplitude=0.0)
    assert check_persistency(log, 1, 2).status.value == "rank_deficient"


def test_excitation_amplitude_must_respect_duty_range():
    with pytest.raises(ValueError):
        collect_excitation_data(excitation_sim(), legs(), 200.0, 5)


def test_controller_errors_carry_timestamp():
    class Failing:
        def control(self, meas):
            if meas.t > 0.004:
                raise RuntimeError("boom")
            return MfcsInput([120.0, 120.0])

        def record(self, *a):
            pass

    sim = SimConfig(0.01, ConstantLoad(400.0), MfcsState([200.0, 200.0], [120.0, 120.0]))
    with pytest.raises(SimulationError) as err:
        run_closed_loop(sim, Failing(), legs())
    assert err.value.t == pytest.approx(0.005)


def test_config_validation():
    x = MfcsState.zeros(2)
    with pytest.raises(ValueError):
        SimConfig(0.0, ConstantLoad(1.0), x)
    with pytest.raises(ValueError):
        SimConfig(0.01, ConstantLoad(1.0), x, integrator_step=3e-5)
    with pytest.raises(ValueError):
        SimConfig(0.0105, ConstantLoad(1.0), x)
    with pytest.raises(ValueError):
        ConstantLoad(-1.0)
    with pytest.raises(ValueError):
        SineLoad(10.0, 20.0, 50.0)


def test_piecewise_load():
    p = PiecewiseConstantLoad(((0.0, 10.0), (0.5, 20.0)))
    assert p(0.2) == 10.0 and p(0.5) == 20.0 and p(3.0) == 20.0


def test_csv_round_trip(tmp_path):
    sim = SimConfig(0.01, SineLoad(400.0, 40.0, 50.0), MfcsState([200.0, 200.0], [120.0, 120.0]))
    log = run_closed_loop(sim, HoldController([122.9, 123.2], 1.0 / 3.0), legs())
    path = log.to_csv(tmp_path / "t.csv")
    back = TrajectoryLog.from_csv(path)
    assert np.array_equal(back.as_array(), log.as_array())
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["t", "iL1", "iL2", "Vo", "vdc1", "vdc2", "ib", "iload", "vfc1", "vfc2", "d1", "d2", "icirc"]


def test_csv_rejects_foreign_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        TrajectoryLog.from_csv(p)


def test_log_invariants():
    with pytest.raises(ValueError):
        TrajectoryLog([0.0, 1.0, 3.0], np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3), np.zeros((3, 2)),
                      np.zeros((3, 2)), np.zeros(3))
