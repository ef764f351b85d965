import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_state
from eptomo.exceptions import DataError
from eptomo.polopt import (
    PAPER_SETTINGS,
    CountRecord,
    WaveplateSetting,
    electron_phase_effect,
    joint_effect_set,
    phase_bin_centres,
    photon_effect,
    read_counts,
    read_settings,
    scan_effect_set,
    scan_grid,
    waveplate_jones,
    write_counts,
    write_settings,
)
from eptomo.qmat import bell_state, partial_trace, projector

angles = st.floats(-360, 360, allow_nan=False)
H = np.array([1, 0], dtype=complex)
V = np.array([0, 1], dtype=complex)
D = np.array([1, 1], dtype=complex) / np.sqrt(2)


def equal_up_to_phase(a, b, tol=1e-12):
    idx = np.unravel_index(np.argmax(np.abs(b)), b.shape)
    ph = a[idx] / b[idx]
    return abs(abs(ph) - 1) < tol and np.allclose(a, ph * b, atol=tol)


def explicit_qwp(theta_deg):
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    # elementwise expansion of R diag(1, i) R^T
    return np.array([[c * c + 1j * s * s, (1 - 1j) * c * s], [(1 - 1j) * c * s, s * s + 1j * c * c]])


def explicit_hwp(theta_deg):
    t = np.deg2rad(theta_deg)
    return np.array([[np.cos(2 * t), np.sin(2 * t)], [np.sin(2 * t), -np.cos(2 * t)]], dtype=complex)


# -- waveplates ---------------------------------------------------------------------


def test_quarter_wave_at_zero():
    assert equal_up_to_phase(waveplate_jones("quarter", 0), np.diag([1, 1j]))


def test_half_wave_45_swaps_h_and_v():
    out = explicit_hwp(45) @ H
    assert np.allclose(out, V, atol=1e-15)
    assert equal_up_to_phase((waveplate_jones("half", 45) @ H)[:, None], V[:, None])


@given(angles)
def test_waveplates_match_explicit_matrices(theta):
    assert np.allclose(waveplate_jones("quarter", theta), explicit_qwp(theta), atol=1e-12)
    assert np.allclose(waveplate_jones("half", theta), explicit_hwp(theta), atol=1e-12)


@given(angles)
def test_waveplates_unitary_and_half_wave_determinant(theta):
    for kind in ("quarter", "half"):
        j = waveplate_jones(kind, theta)
        assert np.allclose(j.conj().T @ j, np.eye(2), atol=1e-12)
    assert np.linalg.det(waveplate_jones("half", theta)) == pytest.approx(-1, abs=1e-12)


@given(angles)
def test_half_wave_is_involution(theta):
    j = waveplate_jones("half", theta)
    assert equal_up_to_phase(j @ j, np.eye(2, dtype=complex))


def test_waveplate_kind_checked():
    with pytest.raises(DataError):
        waveplate_jones("full", 0)


# -- photon effects ----------------------------------------------------------------------


def test_photon_effect_no_rotation():
    assert np.allclose(photon_effect(WaveplateSetting(0, 0), 1), np.outer(H, H), atol=1e-15)


@pytest.mark.parametrize("qwp", [0.0, 45.0, 30.0])
def test_photon_effect_matches_matrix_product(qwp):
    w = explicit_hwp(22.5) @ explicit_qwp(qwp)
    oracle = w.conj().T @ np.diag([1, 0]) @ w
    assert np.allclose(photon_effect(WaveplateSetting(qwp, 22.5), 1), oracle, atol=1e-12)


def test_photon_effect_diagonal_projector():
    # light meets the quarter-wave plate first, so D is analysed with the
    # quarter-wave fast axis along D (45 deg), where D is an eigenmode
    assert np.allclose(photon_effect(WaveplateSetting(45, 22.5), 1), np.outer(D, D.conj()), atol=1e-12)
    # with the fast axis horizontal the same half-wave angle analyses circular light
    circ = np.array([1, -1j]) / np.sqrt(2)
    assert np.allclose(photon_effect(WaveplateSetting(0, 22.5), 1), np.outer(circ, circ.conj()), atol=1e-12)


@given(angles, angles)
def test_photon_effects_complete(q, h):
    s = WaveplateSetting(q, h)
    assert np.allclose(photon_effect(s, 1) + photon_effect(s, 2), np.eye(2), atol=1e-12)


@given(angles, angles)
def test_hwp_shift_by_45_swaps_detectors(q, h):
    assert np.allclose(photon_effect(WaveplateSetting(q, h), 1), photon_effect(WaveplateSetting(q, h + 45), 2), atol=1e-12)


def test_photon_effect_efficiency_scales():
    s = WaveplateSetting(30, 28)
    assert np.allclose(photon_effect(s, 2, 0.68), 0.68 * photon_effect(s, 2))
    with pytest.raises(DataError):
        photon_effect(s, 3)


# -- electron effects ---------------------------------------------------------------------


def test_electron_effect_phase_zero_four_bins():
    e = electron_phase_effect(np.pi / 4, 4)  # bin centre of bin 0
    v = np.array([1, np.exp(1j * np.pi / 4)])
    assert np.allclose(e, np.outer(v, v.conj()) / 4)
    assert np.trace(e).real == pytest.approx(0.5)


def test_electron_effect_antisymmetric_point():
    centres = phase_bin_centres(4)
    a = electron_phase_effect(centres[0], 4)
    b = electron_phase_effect(centres[2], 4)  # pi further on
    assert np.allclose(np.diag(a), np.diag(b))
    assert np.allclose(a[0, 1], -b[0, 1])


def test_electron_effects_sum_to_identity():
    K = 64
    total = sum(electron_phase_effect(phi, K) for phi in phase_bin_centres(K))
    assert np.allclose(total, np.eye(2), atol=1e-12)


def test_electron_effect_rejects_off_centre_and_small_k():
    with pytest.raises(DataError):
        electron_phase_effect(0.0, 8)
    with pytest.raises(DataError):
        electron_phase_effect(np.pi / 2, 2)


# -- joint effects -------------------------------------------------------------------------


def test_joint_effects_uniform_for_maximally_mixed():
    for K in (4, 16):
        effs = joint_effect_set(WaveplateSetting(30, 28), K)
        p = [e.probability(np.eye(4) / 4) for e in effs]
        assert np.allclose(p, 1 / (2 * K), atol=1e-15)


def test_joint_effects_bell_state_identity_analyser():
    K = 16
    rho = projector(bell_state())
    effs = joint_effect_set(WaveplateSetting(0, 0), K)
    probs = np.array([e.probability(rho) for e in effs])
    # brute-force trace with explicitly built operators
    brute = []
    for d, proj in ((1, np.diag([1, 0])), (2, np.diag([0, 1]))):
        for phi in phase_bin_centres(K):
            v = np.array([1, np.exp(1j * phi)])
            op = np.kron(np.outer(v, v.conj()) / K, proj)
            brute.append(np.trace(op @ rho).real)
    assert np.allclose(probs, brute, atol=1e-15)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    # with W = I each detector sees a flat electron distribution of weight 1/2
    assert np.allclose(probs, 1 / (2 * K), atol=1e-15)


def test_joint_effect_probabilities_sum_to_one_for_random_states(rng):
    effs = joint_effect_set(WaveplateSetting(74, 80), 8)
    for _ in range(100):
        rho = random_state(rng)
        assert sum(e.probability(rho) for e in effs) == pytest.approx(1.0, abs=1e-12)


def test_joint_effects_share_group():
    effs = joint_effect_set(PAPER_SETTINGS[0], 8)
    assert len(effs) == 16 and len({e.group_id for e in effs}) == 1
    assert [e.detector for e in effs] == [1] * 8 + [2] * 8


@given(angles, angles, st.sampled_from([3, 8, 17, 32, 64]))
def test_joint_effects_complete_and_positive(q, h, K):
    effs = joint_effect_set(WaveplateSetting(q, h), K)
    assert np.allclose(sum(e.op for e in effs), np.eye(4), atol=1e-11)
    for e in effs[:: max(1, K // 4)]:
        assert np.linalg.eigvalsh(e.op)[0] >= -1e-11


# -- scan effects ----------------------------------------------------------------------------


def test_scan_effects_aligned_projector():
    rho = np.kron(np.diag([1, 0]), np.diag([1, 0])).astype(complex)
    e1, e2 = scan_effect_set(WaveplateSetting(0, 0), "L")
    assert e1.probability(rho) == pytest.approx(1.0)
    assert e2.probability(rho) == pytest.approx(0.0)


def test_scan_effects_unsupported_side_zero():
    rho = np.kron(np.diag([1, 0]), np.eye(2) / 2).astype(complex)
    for s in (WaveplateSetting(0, 0), WaveplateSetting(30, 95)):
        assert all(e.probability(rho) == pytest.approx(0.0, abs=1e-15) for e in scan_effect_set(s, "R"))


def test_scan_effects_match_photon_marginal(rng):
    photon = random_state(rng, 2)
    rho = np.kron(np.diag([1.0, 0.0]), photon)
    s = WaveplateSetting(30, 95)
    rho0 = partial_trace(rho, "second")
    for d, e in zip((1, 2), scan_effect_set(s, "L")):
        assert e.probability(rho) == pytest.approx(np.trace(photon_effect(s, d) @ rho0).real, abs=1e-14)


def test_scan_effects_sum_to_side_projector():
    e1, e2 = scan_effect_set(WaveplateSetting(40, 70), "R")
    assert np.allclose(e1.op + e2.op, np.kron(np.diag([0, 1]), np.eye(2)), atol=1e-12)
    with pytest.raises(DataError):
        scan_effect_set(WaveplateSetting(0, 0), "X")


def test_scan_grid_has_100_settings():
    grid = scan_grid()
    assert len(grid) == 100
    assert grid[0] == WaveplateSetting(0, 0) and grid[-1] == WaveplateSetting(90, 90)


def test_paper_settings():
    assert [(s.qwp_deg, s.hwp_deg) for s in PAPER_SETTINGS] == [(30, 28), (30, 95), (74, 80)]


# -- records and files -------------------------------------------------------------------------


def test_count_record_validation():
    e = joint_effect_set(PAPER_SETTINGS[0], 4)[0]
    with pytest.raises(DataError):
        CountRecord(e, -1)
    with pytest.raises(DataError):
        CountRecord(e, 1.5)


def test_count_file_round_trip(tmp_path):
    effs = joint_effect_set(PAPER_SETTINGS[1], 8) + scan_effect_set(WaveplateSetting(10, 20), "L")
    recs = [CountRecord(e, i * 3) for i, e in enumerate(effs)]
    path = tmp_path / "c.csv"
    write_counts(path, recs, header="# test\n")
    back = read_counts(path)
    assert [r.count for r in back] == [r.count for r in recs]
    for a, b in zip(recs, back):
        assert np.allclose(a.effect.op, b.effect.op)
        assert a.effect.group_id == b.effect.group_id
        assert a.effect.context == b.effect.context


def test_count_file_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("30,28,3,L,5\n")
    with pytest.raises(DataError):
        read_counts(p)
    p.write_text("30,28,1,phase:9/8,5\n")
    with pytest.raises(DataError):
        read_counts(p)
    p.write_text("# only a comment\n")
    with pytest.raises(DataError):
        read_counts(p)


def test_settings_file_round_trip(tmp_path):
    entries = [(PAPER_SETTINGS[0], ("phase", 16)), (WaveplateSetting(10, 20), ("side", "R"))]
    p = tmp_path / "s.csv"
    write_settings(p, entries)
    assert read_settings(p) == entries
