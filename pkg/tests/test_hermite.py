import math

import numpy as np
import pytest

from gravtile.core import GravtileError, ParticleSystem
from gravtile.hermite import (
    EnergyReport,
    GoldenOracle,
    IntegrationError,
    IntegratorConfig,
    Order,
    SimDevice,
    circular_binary,
    compare_energy_distribution,
    correct,
    energy_report,
    generate_initial_conditions,
    golden_acc_jerk,
    golden_snap,
    initialize,
    make_backend,
    orbital_period,
    predict,
    run,
    step,
)
from gravtile.topology import ClusterConfig


def textbook_acc_jerk(system):
    """Plain double loop straight from the pairwise force law and its time derivative."""
    n = system.n
    G, eps2 = system.grav_const, system.softening ** 2
    acc = np.zeros((n, 3))
    jerk = np.zeros((n, 3))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            r = system.pos[j] - system.pos[i]
            v = system.vel[j] - system.vel[i]
            d2 = r @ r + eps2
            d = math.sqrt(d2)
            acc[i] += G * system.mass[j] * r / (d2 * d)
            jerk[i] += G * system.mass[j] * (v / (d2 * d) - 3 * (r @ v) * r / (d2 * d2 * d))
    return acc, jerk


def test_golden_single_particle():
    s = ParticleSystem(mass=[2.0], pos=[[1, 2, 3]], vel=[[1, 0, 0]])
    a, j = golden_acc_jerk(s)
    assert np.all(a == 0) and np.all(j == 0)


def test_golden_two_body_at_rest(two_body_rest):
    a, j = golden_acc_jerk(two_body_rest)
    np.testing.assert_allclose(a, [[1, 0, 0], [-1, 0, 0]], rtol=1e-13)
    assert np.all(j == 0)


def test_golden_matches_textbook_three_body(rng):
    s = ParticleSystem(mass=rng.uniform(0.5, 2, 3), pos=rng.normal(size=(3, 3)), vel=rng.normal(size=(3, 3)),
                       grav_const=1.7, softening=1e-3)
    a, j = golden_acc_jerk(s)
    ta, tj = textbook_acc_jerk(s)
    np.testing.assert_allclose(a, ta, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(j, tj, rtol=1e-14, atol=1e-15)


def test_golden_coincident_without_softening_errors():
    s = ParticleSystem(mass=[1, 1], pos=np.zeros((2, 3)), vel=np.zeros((2, 3)), softening=0.0)
    with pytest.raises(GravtileError):
        golden_acc_jerk(s)


def test_golden_newton_third_law(small_system):
    a, _ = golden_acc_jerk(small_system)
    m = small_system.mass[:, None]
    assert np.max(np.abs((m * a).sum(axis=0))) <= 1e-12 * np.sum(m * np.abs(a))


def test_golden_snap_circular_orbit_closed_form():
    s = circular_binary()
    acc, _ = golden_acc_jerk(s)
    snap = golden_snap(s, acc)
    omega = 2 * math.pi / orbital_period()
    # circular motion: a = -w^2 r, so snap = w^4 r
    np.testing.assert_allclose(snap, omega ** 4 * s.pos, rtol=1e-12, atol=1e-14)


def test_predict_examples():
    s = ParticleSystem(mass=[1], pos=[[0, 0, 0]], vel=[[1, 0, 0]])
    pos, vel = predict(s, 0.0)
    assert np.array_equal(pos, s.pos) and np.array_equal(vel, s.vel)
    pos, _ = predict(s, 0.5)
    np.testing.assert_array_equal(pos, [[0.5, 0, 0]])
    s2 = ParticleSystem(mass=[1], pos=[[0, 0, 0]], vel=[[0, 0, 0]], acc=[[0, 0, -1]])
    pos, _ = predict(s2, 0.1)
    np.testing.assert_allclose(pos, [[0, 0, -0.005]], rtol=1e-15)


def test_correct_dt_zero_is_identity(small_system):
    s = small_system.copy()
    a, j = golden_acc_jerk(s)
    s.acc, s.jerk = a, j
    before = s.copy()
    correct(s, 0.0, a, j)
    assert np.array_equal(s.pos, before.pos) and np.array_equal(s.vel, before.vel)


def test_correct_constant_acceleration_exact():
    g = np.array([[0.0, 0.0, -9.81]])
    s = ParticleSystem(mass=[1], pos=[[0, 0, 10]], vel=[[1, 2, 3]], acc=g)
    dt = 0.37
    correct(s, dt, g, np.zeros((1, 3)))
    expected_pos = np.array([[0, 0, 10]]) + np.array([[1, 2, 3]]) * dt + 0.5 * g * dt * dt
    np.testing.assert_allclose(s.pos, expected_pos, rtol=1e-15, atol=1e-15)
    np.testing.assert_allclose(s.vel, [[1, 2, 3]] + g * dt, rtol=1e-15)
    assert s.time == dt


def test_steps_zero_leaves_system_unchanged(small_system):
    s = small_system.copy()
    res = run(s, IntegratorConfig(dt=0.01, steps=0))
    assert res.records == []
    assert np.array_equal(s.pos, small_system.pos) and s.time == 0.0


def test_circular_orbit_energy_drift():
    s = circular_binary()
    e0 = energy_report(s).total
    run(s, IntegratorConfig(dt=orbital_period() / 1000, steps=1000))
    assert abs((energy_report(s).total - e0) / e0) <= 1e-9


def _orbit_errors(order, steps_list):
    T = orbital_period()
    out = []
    for n in steps_list:
        s = circular_binary()
        e0 = energy_report(s).total
        run(s, IntegratorConfig(dt=T / n, steps=n, order=order))
        out.append((abs(energy_report(s).total - e0), np.max(np.abs(s.pos - circular_binary().pos))))
    return out


def test_hermite4_dt_halving_reduces_energy_error_by_16():
    errs = _orbit_errors(Order.HERMITE4, [64, 128, 256])
    for (e1, _), (e2, _) in zip(errs, errs[1:]):
        assert e1 / e2 >= 16


def test_hermite6_converges_at_sixth_order():
    errs = _orbit_errors(Order.HERMITE6, [32, 64, 128])
    ratios = [math.log2(a[1] / b[1]) for a, b in zip(errs, errs[1:])]
    assert min(ratios) >= 5.5


def test_hermite6_needs_snap_backend():
    with pytest.raises(IntegrationError):
        IntegratorConfig(order="hermite6", backend="device")


def test_integrator_config_validation():
    with pytest.raises(IntegrationError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(IntegrationError):
        IntegratorConfig(steps=-1)
    with pytest.raises(GravtileError):
        make_backend("gpu")


def test_momentum_conserved_over_100_steps(small_system):
    s = small_system.copy()
    s.vel += np.array([0.3, -0.1, 0.2])  # give the system net momentum to measure drift against
    p0 = s.momentum()
    run(s, IntegratorConfig(dt=0.001, steps=100))
    assert np.linalg.norm(s.momentum() - p0) <= 1e-12 * np.linalg.norm(p0)


def test_run_records_and_callback(small_system):
    seen = []
    res = run(small_system.copy(), IntegratorConfig(dt=0.01, steps=3, energy_diagnostics=True),
              callback=lambda rec, s: seen.append((rec["step"], s.time)))
    assert [r["step"] for r in res.records] == [1, 2, 3]
    assert seen[-1][0] == 3 and math.isclose(seen[-1][1], 0.03)
    assert {"kinetic", "potential", "total", "evaluate_s"} <= set(res.records[0])


def test_backend_error_carries_step_index():
    class Broken:
        supports_snap = False

        def __init__(self):
            self.calls = 0

        def evaluate(self, system):
            self.calls += 1
            if self.calls == 3:
                raise GravtileError("device fell over")
            return golden_acc_jerk(system)

    with pytest.raises(IntegrationError, match="step 1"):
        run(circular_binary(), IntegratorConfig(dt=0.01, steps=5, backend=Broken()))


def test_device_backend_bit_reproducible():
    s = generate_initial_conditions(700, seed=2)
    cfg = IntegratorConfig(dt=0.01, steps=2, backend=SimDevice(ClusterConfig.build(1, core_count=4)))
    a, b = s.copy(), s.copy()
    run(a, cfg)
    run(b, IntegratorConfig(dt=0.01, steps=2, backend=SimDevice(ClusterConfig.build(2, 2, core_count=8))))
    assert np.array_equal(a.pos, b.pos) and np.array_equal(a.vel, b.vel)


def test_initialize_is_idempotent(small_system):
    s = small_system.copy()
    cfg = IntegratorConfig()
    initialize(s, cfg)
    acc = s.acc.copy()
    initialize(s, cfg)
    assert np.array_equal(acc, s.acc)
    step(s, cfg)
    assert np.array_equal(s.acc_prev, acc)


def test_energy_report_examples(two_body_rest):
    single = energy_report(ParticleSystem(mass=[1], pos=[[0, 0, 0]], vel=[[0, 0, 0]]))
    assert single.kinetic == 0 and single.potential == 0
    pair = ParticleSystem(mass=[1, 1], pos=[[0, 0, 0], [1, 0, 0]], vel=np.zeros((2, 3)), softening=0.0)
    rep = energy_report(pair)
    assert rep.potential == -1.0
    assert rep.total == rep.kinetic + rep.potential


def test_per_particle_energies_sum_to_total(small_system):
    rep = energy_report(small_system)
    assert math.isclose(float(small_system.mass @ rep.per_particle), rep.total, rel_tol=1e-12)
    assert rep.counts.sum() == small_system.n


def test_generator_virial_ratio():
    rep = energy_report(generate_initial_conditions(4096, seed=0))
    assert 0.8 <= rep.virial_ratio() <= 1.2


def test_generator_properties():
    a = generate_initial_conditions(500, seed=3)
    b = generate_initial_conditions(500, seed=3)
    assert np.array_equal(a.pos, b.pos) and np.array_equal(a.vel, b.vel)
    assert math.isclose(a.mass.sum(), 1.0, rel_tol=1e-15)
    assert np.max(np.abs(a.center_of_mass())) <= 1e-15
    assert np.max(np.abs(a.momentum())) <= 1e-15
    cold = generate_initial_conditions(10, seed=3, model="cold-uniform")
    assert np.all(cold.vel == 0)
    with pytest.raises(GravtileError):
        generate_initial_conditions(10, model="plummer")
    with pytest.raises(GravtileError):
        generate_initial_conditions(0)


def test_compare_energy_distribution(small_system):
    rep = energy_report(small_system, bins=16)
    assert compare_energy_distribution(rep, rep) == (0.0, True)
    # one particle crosses the edge between bins k and k+1
    k = int(np.argmax(rep.counts[:-1]))
    counts = rep.counts.copy()
    counts[k] -= 1
    counts[k + 1] += 1
    moved = EnergyReport(rep.kinetic, rep.potential, rep.per_particle, rep.edges, counts)
    dev, ok = compare_energy_distribution(moved, rep)
    assert dev == max(1 / max(1, rep.counts[k]), 1 / max(1, rep.counts[k + 1]))
    assert ok == (dev <= 0.02)


def test_compare_rejects_different_edges(small_system):
    a = energy_report(small_system, bins=8)
    b = energy_report(small_system, bins=9)
    with pytest.raises(GravtileError):
        compare_energy_distribution(a, b)


def test_golden_backend_interface(small_system):
    backend = GoldenOracle()
    a, j = backend.evaluate(small_system)
    assert a.shape == (small_system.n, 3)
