"""Two-scale torus reduction: family calibration, scheme checks, theorem bound."""
import numpy as np
import pytest
from dataclasses import replace

from gptransport import (
    CflError,
    FractionalBrownianMotion,
    SmallScaleFamily,
    SpectralProblem,
    TorusProblem,
    make_drive,
    maximum_principle_overshoot,
    q_operator_norm,
    q_operator_norm_power,
    reduced_solve,
    simulate_two_scale,
    solve_mode,
    theorem_bound_check,
    trig_grid,
)

KERN = FractionalBrownianMotion(0.75)


def small_problem(**over):
    defaults = dict(
        n_grid=32, kappa=0.01, kappa_t=0.2,
        family=SmallScaleFamily.build(2, 0.2, max_abs=15),
        sigmas=[[0.5, 0.0]], kernel=KERN, epsilon=0.05, dt=2.5e-4, t_final=0.02,
        theta0_terms=((1.0, 1, 0, "cos"), (0.5, 0, 1, "sin")),
    )
    defaults.update(over)
    return TorusProblem(**defaults)


def test_family_diagonal_is_isotropic():
    fam = SmallScaleFamily.build(4, 0.25)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x1, x2 = rng.random(2)
        assert np.abs(fam.q_diagonal(x1, x2) - 0.25 * np.eye(2)).max() <= 1e-10


def test_family_fields_divergence_free():
    fam = SmallScaleFamily.build(3, 0.1)
    # wave vector dotted with the field direction vanishes identically
    assert np.abs(np.sum(fam.wavevectors * fam.unit_perps(), axis=1)).max() <= 1e-14


def test_operator_norm_single_pair():
    fam = SmallScaleFamily(scale_index=1, kappa_t=0.0, wavevectors=np.array([[1, 0]]),
                           amplitude=0.7)
    assert q_operator_norm(fam) == pytest.approx(0.7**2 / 2, rel=1e-14)
    assert q_operator_norm_power(fam, n_grid=16) == pytest.approx(0.7**2 / 2, abs=1e-8)


def test_operator_norm_halves_with_mode_count():
    f4 = SmallScaleFamily.build(4, 0.25)
    f8 = SmallScaleFamily.build(8, 0.25)
    ratio = q_operator_norm(f4) / q_operator_norm(f8)
    assert ratio == pytest.approx(f8.n_wavevectors / f4.n_wavevectors, rel=1e-12)


def test_operator_norm_empty_family():
    assert q_operator_norm(None) == 0.0
    fam = SmallScaleFamily(scale_index=1, kappa_t=0.0,
                           wavevectors=np.zeros((0, 2), dtype=int), amplitude=0.0)
    assert q_operator_norm(fam) == 0.0


def test_operator_norm_power_iteration_matches():
    for n_shell in (2, 4):
        fam = SmallScaleFamily.build(n_shell, 0.3)
        assert q_operator_norm_power(fam, n_grid=64) == pytest.approx(
            q_operator_norm(fam), abs=1e-8
        )


def test_zero_noise_is_exact_heat_flow():
    prob = small_problem(family=None, kappa_t=0.0, kappa=0.05, sigmas=[[0.0, 0.0]])
    drive = make_drive(prob, seed=1)
    res = simulate_two_scale(prob, drive, w_seed=2, n_replicas=1)
    spec0 = np.fft.fft2(prob.theta0_grid())
    m = np.fft.fftfreq(32, d=1 / 32).astype(int)
    m1, m2 = np.meshgrid(m, m, indexing="ij")
    exact = np.fft.ifft2(spec0 * np.exp(-4 * np.pi**2 * 0.05 * (m1**2 + m2**2) * prob.t_final)).real
    assert np.abs(res.fields[0] - exact).max() <= 1e-13


def test_zero_amplitude_family_keeps_exactness():
    # the noise code path runs but injects nothing
    fam = SmallScaleFamily.build(2, 0.0, max_abs=15)
    prob = small_problem(family=fam, kappa_t=0.0, kappa=0.05)
    drive = make_drive(prob, seed=3)
    res = simulate_two_scale(prob, drive, w_seed=4, n_replicas=2)
    red = reduced_solve(prob, drive)
    assert np.abs(res.fields - red[None]).max() <= 1e-12


def test_matches_constant_direction_solver_per_replica():
    # with no small scales the torus run reproduces the mode solver under the
    # parameter map kappa -> 4 pi^2 kappa, sigma -> 2 pi sigma
    prob = small_problem(family=None, kappa_t=0.0, kappa=0.02, t_final=0.1, dt=1e-3)
    drive = make_drive(prob, seed=11)
    res = simulate_two_scale(prob, drive, w_seed=1, n_replicas=1)
    sp = SpectralProblem(
        kappa=4 * np.pi**2 * prob.kappa, sigmas=2 * np.pi * np.asarray(prob.sigmas)
    )
    spec = np.fft.fft2(res.fields[0])
    spec0 = np.fft.fft2(prob.theta0_grid())
    for mode in ((1, 0), (0, 1)):
        traj = solve_mode(sp, drive, np.array(mode, dtype=float), np.array([prob.t_final]))
        factor_ref = traj.values[0] / sp.theta0.hat(*map(float, mode))
        factor_torus = spec[mode] / spec0[mode]
        assert abs(factor_torus - factor_ref) <= 1e-12


def test_reduced_solve_mode_magnitudes():
    prob = small_problem(family=None, kappa_t=0.3, kappa=0.02, sigmas=[[0.7, 0.2]])
    drive = make_drive(prob, seed=5)
    red = reduced_solve(prob, drive)
    spec = np.fft.fft2(red)
    spec0 = np.fft.fft2(prob.theta0_grid())
    for mode in ((1, 0), (0, 1)):
        want = np.exp(-4 * np.pi**2 * (0.02 + 0.3) * (mode[0] ** 2 + mode[1] ** 2) * prob.t_final)
        assert abs(spec[mode] / spec0[mode]) == pytest.approx(want, rel=1e-12)


def test_cfl_refusal_suggests_dt():
    prob = small_problem(dt=0.01, t_final=0.1)
    with pytest.raises(CflError) as err:
        simulate_two_scale(prob, make_drive(prob, seed=1), w_seed=1)
    assert err.value.suggested_dt < 0.01
    # the suggestion itself passes the guard
    small_problem(dt=err.value.suggested_dt * 0.99, t_final=err.value.suggested_dt * 99).check_cfl()


def test_shell_too_fine_for_grid_rejected():
    fam = SmallScaleFamily.build(8, 0.2)  # reaches |k| = 16 = Nyquist of a 32 grid
    prob = small_problem(family=fam, dt=1e-4, t_final=0.001)
    with pytest.raises(ValueError, match="not representable"):
        simulate_two_scale(prob, make_drive(prob, seed=1), w_seed=1)


def test_problem_validation():
    with pytest.raises(ValueError, match="kappa"):
        small_problem(kappa=0.0, kappa_t=0.0, family=None)
    with pytest.raises(ValueError, match="calibration"):
        small_problem(kappa_t=0.3)  # family built for 0.2
    with pytest.raises(ValueError, match="integer"):
        small_problem(t_final=0.0201)


def test_maximum_principle_zero_noise():
    prob = small_problem(family=None, kappa_t=0.0, kappa=0.05, sigmas=[[0.0, 0.0]],
                         t_final=0.05, dt=1e-3)
    res = simulate_two_scale(prob, make_drive(prob, seed=2), w_seed=1)
    assert maximum_principle_overshoot(res) <= 0.0 + 1e-12


def test_maximum_principle_pure_transport():
    prob = small_problem(family=None, kappa_t=0.0, kappa=1e-6, sigmas=[[1.0, 0.3]],
                         t_final=0.1, dt=1e-3)
    res = simulate_two_scale(prob, make_drive(prob, seed=7), w_seed=1)
    assert maximum_principle_overshoot(res) <= 1e-9


def test_maximum_principle_overshoot_shrinks_with_dt():
    over = {}
    for dt, sub in ((5e-4, 2), (2.5e-4, 1)):
        prob = small_problem(dt=dt, t_final=0.02)
        drive = make_drive(prob, seed=9)
        res = simulate_two_scale(prob, drive, w_seed=3, n_replicas=8,
                                 w_mode="stepwise", w_substeps=sub)
        over[dt] = max(maximum_principle_overshoot(res), 0.0)
    assert over[2.5e-4] < over[5e-4] + 1e-12


def test_noise_energy_injection_rate():
    prob = small_problem(t_final=0.02)
    drive = make_drive(prob, seed=21)
    res = simulate_two_scale(prob, drive, w_seed=13, n_replicas=64, track_energy=True)
    ratio = res.energy_injected.mean() / res.energy_gradient.mean()
    assert ratio == pytest.approx(1.0, abs=0.1)


def test_mean_energy_bounded_by_initial():
    prob = small_problem(t_final=0.02)
    drive = make_drive(prob, seed=22)
    res = simulate_two_scale(prob, drive, w_seed=14, n_replicas=32)
    e0 = np.mean(prob.theta0_grid() ** 2)
    assert np.mean(res.fields**2, axis=(1, 2)).mean() <= e0 * (1 + 1e-10)


def test_pathwise_self_convergence():
    # strong order for non-commuting multi-field transport noise without
    # simulated Levy areas cannot exceed 1/2; require at least that rate
    base = small_problem(dt=4e-4, t_final=0.02)
    drive = make_drive(base, seed=23, oversample=4)
    sols = {}
    for sub, dt in ((4, 4e-4), (2, 2e-4), (1, 1e-4)):
        p = replace(base, dt=dt)
        r = simulate_two_scale(p, drive, w_seed=3, n_replicas=4, w_mode="stepwise", w_substeps=sub)
        sols[dt] = r.fields
    e1 = np.sqrt(np.mean((sols[4e-4] - sols[1e-4]) ** 2))
    e2 = np.sqrt(np.mean((sols[2e-4] - sols[1e-4]) ** 2))
    assert e1 / e2 >= 1.3
    assert np.log2(e1 / e2) >= 0.4


def test_theorem_bound_small_configuration():
    lhss = []
    for shell in (2, 4):
        fam = SmallScaleFamily.build(shell, 0.2, max_abs=15)
        prob = small_problem(family=fam, t_final=0.04, dt=2.5e-4)
        res = theorem_bound_check(prob, ((1.0, 1, 0, "cos"),), n_replicas=60,
                                  w_seed=5 + shell, drive_seed=17, budget_replicas=4)
        assert res.passed
        assert res.lhs <= res.rhs + 3 * res.lhs_se + res.budget
        # the half-corrector candidate sits much farther from the data
        assert res.lhs_alt > 3.0 * res.lhs
        lhss.append(res.lhs)
    assert lhss[0] / lhss[1] >= 1.5


def test_bound_check_trivial_when_no_small_scales():
    fam = SmallScaleFamily.build(2, 0.0, max_abs=15)
    prob = small_problem(family=fam, kappa_t=0.0, kappa=0.05, t_final=0.02)
    res = theorem_bound_check(prob, ((1.0, 1, 0, "cos"),), n_replicas=4,
                              w_seed=1, drive_seed=2, budget_replicas=0)
    assert res.rhs == 0.0
    assert res.lhs <= 1e-24
    assert res.passed


def test_trig_grid_renders_expected_values():
    g = trig_grid(8, ((2.0, 1, 0, "cos"), (1.0, 0, 1, "sin")))
    x = np.arange(8) / 8
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    want = 2 * np.cos(2 * np.pi * x1) + np.sin(2 * np.pi * x2)
    assert np.abs(g - want).max() <= 1e-14
