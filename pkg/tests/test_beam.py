import math

import numpy as np
import pytest

from gnss.beam import (
    ExcitationSpec,
    MaterialSection,
    arrival_times,
    assemble_element,
    bar_wave_increment,
    build_beam_model,
    dispersion_wavelength,
    extract_dataset_window,
    front_speed,
    hanning_pulse,
    integrate_steps,
    lumped_mass,
    run_explicit,
    stable_increment,
)
from gnss.errors import ConfigError, NumericalDivergence, StabilityError
from gnss.trajectory import ACTUATOR, CLAMPED, FREE

H = 0.0008


def test_full_length_mesh(section):
    model = build_beam_model(0.320, H, section, 0.160)
    assert model.n_nodes == 401
    assert model.actuator_node == 200
    assert model.clamped_nodes == (0, 400)
    types = model.node_types()
    assert types[0] == types[-1] == CLAMPED
    assert types[200] == ACTUATOR
    assert np.count_nonzero(types == FREE) == 398


def test_smallest_chain(section):
    model = build_beam_model(0.0032, H, section, 0.0016)
    assert model.n_nodes == 5
    assert model.actuator_node == 2
    assert len(model.elements) == 4


def test_actuator_on_clamp_rejected(section):
    with pytest.raises(ConfigError):
        build_beam_model(0.0032, H, section, 0.0)


def test_actuator_snapping_onto_clamp_rejected(section):
    with pytest.raises(ConfigError, match="clamped"):
        build_beam_model(0.0032, H, section, 0.0001)


def test_nondivisible_length_names_nearest_count(section):
    with pytest.raises(ConfigError, match="nearest valid element count is 4"):
        build_beam_model(0.0033, H, section, 0.0016)


def test_too_few_elements(section):
    with pytest.raises(ConfigError, match="at least 4"):
        build_beam_model(0.0024, H, section, 0.0008)


def test_section_validation():
    with pytest.raises(ConfigError):
        MaterialSection(poisson_ratio=0.5)
    with pytest.raises(ConfigError):
        MaterialSection(density=0.0)
    s = MaterialSection()
    assert s.area == pytest.approx(5e-6)
    assert s.second_moment == pytest.approx(5e-3 * 1e-9 / 12)


def test_element_rigid_translation_in_null_space(section):
    k, _ = assemble_element(section, H)
    axial = np.array([1.0, 0, 0, 1.0, 0, 0])
    transverse = np.array([0, 1.0, 0, 0, 1.0, 0])
    scale = np.abs(k).max()
    assert np.abs(k @ axial).max() <= 1e-12 * scale
    assert np.abs(k @ transverse).max() <= 1e-12 * scale


def test_element_rigid_rotation_in_null_space(section):
    k, _ = assemble_element(section, H)
    theta = 1e-3
    rotation = np.array([0, 0, theta, 0, theta * H, theta])
    assert np.abs(k @ rotation).max() <= 1e-12 * np.abs(k).max() * theta


def test_element_spectrum(section):
    k, _ = assemble_element(section, H)
    assert np.array_equal(k, k.T)
    eig = np.linalg.eigvalsh(k)
    tol = 1e-10 * eig.max()
    assert np.count_nonzero(np.abs(eig) < tol) == 3
    assert eig.min() > -tol


def test_lumped_mass_includes_rotary_inertia(section):
    _, m = assemble_element(section, H)
    rho = section.density
    trans = rho * section.area * H / 2
    rot = rho * section.second_moment * H / 2
    np.testing.assert_allclose(m, [trans, trans, rot] * 2, rtol=1e-15)
    model = build_beam_model(0.0032, H, section, 0.0016)
    mass = lumped_mass(model)
    assert mass.shape == (15,)
    # interior nodes collect half an element from each side
    assert mass[3] == pytest.approx(2 * trans)


def test_bar_wave_estimate_full_length(section):
    model = build_beam_model(0.320, H, section, 0.160)
    c = math.sqrt(72e9 / 2900)
    assert c == pytest.approx(4983, abs=1)
    assert bar_wave_increment(model) == pytest.approx(H / c, rel=1e-12)
    assert bar_wave_increment(model) == pytest.approx(1.605e-7, rel=1e-3)


def test_stable_increment_scales_with_element_size(section):
    coarse = build_beam_model(0.032, H, section, 0.016)
    fine = build_beam_model(0.032, H / 2, section, 0.016)
    assert bar_wave_increment(fine) == pytest.approx(bar_wave_increment(coarse) / 2, rel=1e-12)
    assert stable_increment(fine) == pytest.approx(stable_increment(coarse) / 2, rel=0.02)


def test_stable_increment_not_above_bar_estimate(section):
    for h in (H, H / 2, 2 * H):
        model = build_beam_model(64 * h, h, section, 32 * h)
        assert stable_increment(model) <= bar_wave_increment(model) * (1 + 1e-12)


def test_stable_increment_matches_element_eigenvalue_oracle(section):
    model = build_beam_model(0.032, H, section, 0.016)
    k, m = assemble_element(section, H)
    # generalized eigenproblem K x = w^2 M x with diagonal M
    scaled = k / np.sqrt(np.outer(m, m))
    w_max = math.sqrt(np.linalg.eigvalsh(scaled).max())
    assert stable_increment(model) == pytest.approx(2 / w_max, rel=1e-12)


def test_hanning_pulse_values():
    spec = ExcitationSpec(frequency=50e3, amplitude=2e-6)
    tp = spec.duration
    assert tp == pytest.approx(20e-6)
    assert hanning_pulse(0.0, spec) == 0.0
    assert hanning_pulse(tp / 4, spec) == pytest.approx(0.5 * 2e-6, rel=1e-12)
    assert abs(hanning_pulse(tp, spec)) < 1e-20
    after = hanning_pulse(np.linspace(tp * 1.0001, 5 * tp, 50), spec)
    assert np.all(after == 0.0)


def test_hanning_pulse_closed_form():
    spec = ExcitationSpec(frequency=40e3, cycles=2, amplitude=1e-6)
    t = np.linspace(0, spec.duration, 101)
    expected = 1e-6 * 0.5 * (1 - np.cos(2 * np.pi * t / spec.duration)) * np.sin(2 * np.pi * 40e3 * t)
    np.testing.assert_allclose(hanning_pulse(t, spec), expected, rtol=1e-12, atol=1e-24)


def test_zero_excitation_gives_exact_zero(section):
    model = build_beam_model(0.032, H, section, 0.016)
    traj = run_explicit(model, ExcitationSpec(amplitude=0.0), 10e-6, 1e-7)
    assert traj.n_steps == 100
    assert np.all(traj.local_displacements == 0.0)


def test_full_length_run(section):
    model = build_beam_model(0.320, H, section, 0.160)
    spec = ExcitationSpec()
    traj = run_explicit(model, spec, 100e-6, 1e-7)
    assert traj.n_steps == 1000
    assert traj.duration == pytest.approx(100e-6)
    u = traj.local_displacements
    assert np.all(u[0] == 0.0)
    w_max = np.abs(u[..., 1]).max()
    assert 0.1 * spec.amplitude < w_max < 10 * spec.amplitude
    # displacements stay far below the element spacing
    assert np.abs(u).max() < 1e-2 * H
    # actuator follows the prescribed pulse at every stored frame
    t = traj.dt_ph * np.arange(traj.n_steps)
    np.testing.assert_array_equal(u[:, 200, 1], hanning_pulse(t, spec))


def test_storage_stride(section):
    model = build_beam_model(0.032, H, section, 0.016)
    fine = run_explicit(model, ExcitationSpec(), 10e-6, 5e-8)
    coarse = run_explicit(model, ExcitationSpec(), 10e-6, 5e-8, dt_ph=1e-7)
    assert coarse.n_steps == 100
    np.testing.assert_array_equal(coarse.local_displacements, fine.local_displacements[::2])


def test_dt_above_bound_rejected(section):
    model = build_beam_model(0.032, H, section, 0.016)
    with pytest.raises(StabilityError):
        run_explicit(model, ExcitationSpec(), 10e-6, 1.2 * stable_increment(model))


def test_non_integer_step_ratio_rejected(section):
    model = build_beam_model(0.032, H, section, 0.016)
    with pytest.raises(ConfigError):
        run_explicit(model, ExcitationSpec(), 10.05e-6, 1e-7)


def test_divergence_reports_step(section):
    model = build_beam_model(0.032, H, section, 0.016)
    with pytest.raises(NumericalDivergence) as info:
        integrate_steps(model, ExcitationSpec(), 3 * stable_increment(model), 20000)
    assert info.value.step is not None and info.value.step > 0


def test_dispersion_wavelength(section):
    lam = dispersion_wavelength(section, 50e3)
    assert lam == pytest.approx(13.4e-3, abs=0.1e-3)
    assert dispersion_wavelength(section, 200e3) == pytest.approx(lam / 2, rel=1e-12)
    assert lam / H == pytest.approx(16.8, abs=0.05)
    with pytest.raises(ConfigError):
        dispersion_wavelength(section, 0.0)


def test_arrival_time_reciprocity(section):
    """Swapping actuator and observer leaves the travel time unchanged."""
    spec = ExcitationSpec()
    a, b = 30, 55
    ta = arrival_times(run_explicit(build_beam_model(0.080, H, section, a * H), spec, 30e-6, 1e-7))
    tb = arrival_times(run_explicit(build_beam_model(0.080, H, section, b * H), spec, 30e-6, 1e-7))
    assert np.isfinite(ta[b]) and ta[b] > 0
    assert ta[b] == tb[a]


def test_dataset_window_identity_margin(short_beam_traj):
    window = extract_dataset_window(short_beam_traj, 0.0)
    assert window.n_nodes == short_beam_traj.n_nodes
    np.testing.assert_array_equal(window.node_rest_positions, short_beam_traj.node_rest_positions)
    assert window.actuator_node == short_beam_traj.actuator_node


def test_dataset_window_rejects_large_margin(short_beam_traj):
    with pytest.raises(ConfigError, match="at least 10"):
        extract_dataset_window(short_beam_traj, 0.030)


def test_dataset_window_full_length(section):
    traj = run_explicit(build_beam_model(0.320, H, section, 0.160), ExcitationSpec(), 100e-6, 1e-7)
    margin = 0.080
    window = extract_dataset_window(traj, margin)
    assert 200 <= window.n_nodes <= 240
    assert window.actuator_node == 100
    assert window.node_types[window.actuator_node] == ACTUATOR
    assert not np.any(window.node_types == CLAMPED)
    # kept span times the measured front speed stays inside the round trip
    c = front_speed(traj)
    s_a = 0.160
    assert window.n_steps * window.dt_ph * c < min(s_a + margin, 0.320 - s_a + margin)
    assert window.n_steps <= traj.n_steps
    np.testing.assert_array_equal(
        window.local_displacements, traj.local_displacements[: window.n_steps, 100:301]
    )
