import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from xbeam.beam_training import csi_metrics, csi_rs_sound, ls_estimate
from xbeam.codebooks import CodebookKind, constrained_dft
from xbeam.config import ClusteredChannelParams, ScenarioConfig
from xbeam.csi_feedback import (CsiReport, amplitude_levels, build_feedback_basis, overhead_bits,
                                pack_report, quantize_typeii, reconstruct, reconstruction_error,
                                row_correlation, unpack_report)
from xbeam.errors import MalformedReport
from xbeam.scenario import generate_channels


def clustered_estimates(n, b_g=4, seed=0, noise_var=1e-4):
    """Per-user LS estimates ``S_B x N_R x B_g`` on the strongest resource."""
    cfg = ScenarioConfig()
    hs = generate_channels(cfg, ClusteredChannelParams(), n, seed)
    b_sub = constrained_dft(8, 8, 4, 4, cfg.b_phase, CodebookKind.CSIRS_ACTIVE)
    snd = csi_rs_sound(hs, b_sub, b_g, noise_var, seed, slot=1)
    est = ls_estimate(snd.y, snd.pilots, snd.norm)
    return csi_metrics(est, noise_var, cfg.K, cfg.n_tx, cfg.S_B).est


def test_basis_is_unitary_dft_without_oversampling():
    b = build_feedback_basis(4, 1, 1).basis
    np.testing.assert_allclose(b.conj().T @ b, np.eye(4), atol=1e-12)
    n = np.arange(4)[:, None]
    np.testing.assert_allclose(b, np.exp(2j * np.pi * n * np.arange(4) / 4) / 2, atol=1e-12)


def test_oversampled_basis_adjacent_correlation_is_dirichlet():
    b = build_feedback_basis(4, 2, 1).basis
    assert b.shape == (4, 8)
    np.testing.assert_allclose(np.linalg.norm(b, axis=0), 1, atol=1e-12)
    delta = 2 * math.pi / 8
    dirichlet = abs(math.sin(4 * delta / 2) / (4 * math.sin(delta / 2)))
    assert abs(np.vdot(b[:, 0], b[:, 1])) == pytest.approx(dirichlet, abs=1e-12)


def test_amplitude_grid_is_db_uniform():
    lv = amplitude_levels(3)
    np.testing.assert_allclose(np.diff(20 * np.log10(lv)), -3.0, atol=1e-12)


def test_basis_column_is_exactly_representable():
    fb = build_feedback_basis(4, 2, 2)
    est = np.broadcast_to(3j * fb.basis[:, 5], (2, 3, 4)).copy()
    rep = quantize_typeii(est, fb, 1)
    rec = reconstruct(rep, fb)
    assert reconstruction_error(est, rec) < 1e-20
    # the reported reference is phase-free, so rows match up to a unit phase
    np.testing.assert_allclose(rec * 1j, est / np.linalg.norm(est), atol=1e-12)


def test_single_component_report_rebuilds_column_zero():
    fb = build_feedback_basis(4, 1, 1)
    rep = CsiReport(0, 1, np.zeros((1, 1, 1), np.int64), np.ones((1, 1, 1), complex), 0.0)
    np.testing.assert_allclose(reconstruct(rep, fb)[0, 0], fb.basis[:, 0], atol=1e-15)


def test_complete_basis_at_full_resolution_recovers_rows(rng):
    fb = build_feedback_basis(4, 1, 1)
    est = rng.standard_normal((3, 2, 4)) + 1j * rng.standard_normal((3, 2, 4))
    rec = reconstruct(quantize_typeii(est, fb, 4, None, None), fb)
    assert row_correlation(est, rec) == pytest.approx(1.0, abs=1e-12)


def test_error_non_increasing_in_l_csi():
    est = clustered_estimates(100)
    fb = build_feedback_basis(4, 2, 2)
    errs = [np.mean([reconstruction_error(e, reconstruct(quantize_typeii(e, fb, l), fb))
                     for e in est]) for l in (1, 2, 4)]
    assert errs[0] >= errs[1] >= errs[2]


def test_round_trip_correlation_on_clustered_estimates():
    est = clustered_estimates(200, seed=3)
    fb = build_feedback_basis(4, 2, 2)
    corr = [row_correlation(e, reconstruct(quantize_typeii(e, fb, 4, 3, 3), fb)) for e in est]
    assert np.median(corr) >= 0.9


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (2, 2, 4), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (2, 2, 4), elements=st.floats(-1, 1)), st.integers(1, 4))
def test_reconstruction_in_span_of_selected_columns(re, im, l):
    est = re + 1j * im
    if np.linalg.norm(est) < 1e-3:
        return
    fb = build_feedback_basis(4, 2, 2)
    rep = quantize_typeii(est, fb, l)
    rec = reconstruct(rep, fb)
    B = fb.basis[:, rep.a[0, 0]]
    resid = rec - (rec @ np.linalg.pinv(B).T) @ B.T
    assert np.abs(resid).max() < 1e-10


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (2, 2, 4), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (2, 2, 4), elements=st.floats(-1, 1)))
def test_quantisation_is_idempotent(re, im):
    est = re + 1j * im
    if np.min(np.linalg.norm(est, axis=-1)) < 1e-3:
        return
    fb = build_feedback_basis(4, 2, 2)
    q1 = quantize_typeii(est, fb, 3)
    # the reference must stay strictly strongest after reconstruction
    assume(np.all(np.any(q1.amp_idx > 0, axis=(0, 1))))
    q2 = quantize_typeii(reconstruct(q1, fb), fb, 3)
    assert np.array_equal(q1.a, q2.a)
    assert np.array_equal(q1.amp_idx, q2.amp_idx) and np.array_equal(q1.phase_idx, q2.phase_idx)


def test_zero_estimate_is_flagged_degenerate():
    fb = build_feedback_basis(4, 1, 1)
    rep = quantize_typeii(np.zeros((2, 2, 4)), fb, 2)
    assert rep.degenerate and not np.any(reconstruct(rep, fb))


def test_out_of_range_index_is_malformed():
    fb = build_feedback_basis(4, 1, 1)
    rep = CsiReport(0, 1, np.full((1, 1, 1), 9), np.ones((1, 1, 1), complex), 0.0)
    with pytest.raises(MalformedReport):
        reconstruct(rep, fb)


def test_overhead_examples():
    cfg = ScenarioConfig(nx_phys=16, ny_phys=16, nx_dig=8, ny_dig=4, N_CSI=16, B_g=4, S_B=8,
                         n_rx=4, L_csi=4, amp_bits=3, phase_bits=3, O_h=2, O_v=2)
    # CRI: 4 resources -> 2 bits; RI: 4 ranks -> 2 bits; 16 basis columns -> 4 bits each
    assert overhead_bits(cfg) == 2 + 2 + 8 * 4 * 3 * 6 + 4 * 4
    one = cfg.with_(L_csi=1)
    assert overhead_bits(one) == 2 + 2 + 4
    coph = overhead_bits(cfg) - overhead_bits(one) - 3 * 4
    doubled = overhead_bits(cfg.with_(S_B=16)) - overhead_bits(one.with_(S_B=16)) - 3 * 4
    assert doubled == 2 * coph


def test_report_wire_round_trip(rng):
    cfg = ScenarioConfig()
    fb = build_feedback_basis(cfg.B_g, cfg.O_h, cfg.O_v)
    est = rng.standard_normal((cfg.S_B, cfg.n_rx, cfg.B_g)) * (1 + 1j)
    rep = quantize_typeii(est, fb, cfg.L_csi, cfg.amp_bits, cfg.phase_bits, cri=3, ri=2,
                          snr_db=17.5)
    data = pack_report(rep, cfg)
    back = unpack_report(data, cfg)
    assert back.cri == 3 and back.ri == 2 and back.snr_db == 17.5
    assert np.array_equal(back.a, rep.a) and np.array_equal(back.amp_idx, rep.amp_idx)
    np.testing.assert_allclose(back.k, rep.k, atol=1e-15)
    assert pack_report(back, cfg) == data
    bits = overhead_bits(cfg) + 8 + 1
    assert len(data) == math.ceil(bits / 8)


def test_truncated_report_is_malformed():
    cfg = ScenarioConfig()
    with pytest.raises(MalformedReport):
        unpack_report(b"\x00\x01", cfg)
