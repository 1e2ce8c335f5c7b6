import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xbeam.codebooks import Codebook, CodebookKind, constrained_dft
from xbeam.errors import InvalidArgument, SchedulingCapacity
from xbeam.link import (assemble_hybrid, effective_sse, greedy_schedule, group_transfer,
                        overhead_resources, rank_indicator, removed_cells, rzf_precoder, sinr,
                        spectral_efficiency)
from xbeam.beam_training import beam_groups
from xbeam.scenario import ChannelSet


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def sinr_oracle(h, f_rf, f_bb, owner, noise_var, n_t):
    """Per-stream LMMSE SINR by explicit loops, treating every other stream as interference."""
    U, T, K, R, _ = h.shape
    S = f_bb.shape[0]
    n_s = f_bb.shape[-1]
    U_a = int(owner.max()) + 1
    out = np.zeros((U, T, K, n_s))
    for u in range(U):
        for t in range(T):
            for k in range(K):
                fb = f_bb[k * S // K]
                cols = [h[u, t, k] @ f_rf @ fb[:, s] for s in range(n_s)]
                for s in range(n_s):
                    if owner[s] != u:
                        continue
                    q = U_a * n_t * noise_var * np.eye(R, dtype=complex)
                    for j in range(n_s):
                        if j != s:
                            q += np.outer(cols[j], cols[j].conj())
                    out[u, t, k, s] = np.real(cols[s].conj() @ np.linalg.solve(q, cols[s])) / K
    return out


# --------------------------------------------------------------------------
# RZF
# --------------------------------------------------------------------------

def test_rzf_single_user_row_direction():
    est = np.zeros((1, 1, 1, 4), complex)
    est[0, 0, 0, 0] = 1.0
    w = rzf_precoder(est, 0.1, 16)[0][0, :, 0]
    assert np.allclose(w / w[0], np.eye(4)[0], atol=1e-12)


def test_rzf_orthogonal_users_zero_forcing(rng):
    q, _ = np.linalg.qr(crandn(rng, 4, 4))
    est = np.stack([q[:1, :], q[1:2, :]])[:, None]          # 2 users, S=1, R=1, B=4
    digital = rzf_precoder(est, 1e-12, 16)
    for u in range(2):
        direct = abs(est[u, 0] @ digital[u][0]).max()
        cross = abs(est[1 - u, 0] @ digital[u][0]).max()
        assert cross < 1e-6 * direct


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.sampled_from([0.0, 1e-3, 1.0]))
def test_rzf_block_norm(seed, U, noise_var):
    r = np.random.default_rng(seed)
    est = crandn(r, U, 2, 2, 4)
    for block in rzf_precoder(est, noise_var, 16):
        assert np.allclose(np.sum(np.abs(block) ** 2, axis=(1, 2)), 16.0, atol=1e-9)


def test_rzf_rejects_nonfinite():
    est = np.full((1, 1, 1, 2), np.nan, complex)
    with pytest.raises(InvalidArgument):
        rzf_precoder(est, 1.0, 4)


def test_rank_indicator_threshold():
    m = np.diag([1.0, 0.5, 0.01])
    assert rank_indicator(m) == 2
    assert rank_indicator(m, threshold_db=50) == 3
    assert rank_indicator(np.zeros((2, 2))) == 1


def test_group_transfer_identity_and_map(rng):
    cb = constrained_dft(4, 4, 4, 4, 2)
    groups = beam_groups(8, 2)
    X = group_transfer(cb.subset(np.arange(8)), groups)
    assert np.allclose(X[1, 1], np.eye(2))
    # a channel lying in the span of group 0 is mapped exactly to group 1
    F = cb.beams[:, :8]
    hv = crandn(rng, 1, 2) @ np.linalg.pinv(F[:, groups[0]])
    assert np.allclose((hv @ F[:, groups[0]]) @ X[0, 1], hv @ F[:, groups[1]], atol=1e-9)


# --------------------------------------------------------------------------
# hybrid assembly
# --------------------------------------------------------------------------

def _hybrid(rng, n_users=2, b_g=2, r=1):
    cb = constrained_dft(4, 4, 4, 4, 2).subset(np.arange(8), CodebookKind.CSIRS_ACTIVE)
    groups = beam_groups(8, b_g)
    digital = [crandn(rng, 2, b_g, r) for _ in range(n_users)]
    return cb, groups, digital


def test_assemble_single_user(rng):
    cb, groups, digital = _hybrid(rng, 1)
    hp = assemble_hybrid([2], cb, groups, digital, n_ports=4)
    assert np.array_equal(hp.f_rf, cb.beams[:, groups[2]])
    assert np.array_equal(hp.f_bb, digital[0])


def test_assemble_column_order_and_blocks(rng):
    cb, groups, digital = _hybrid(rng, 2)
    hp = assemble_hybrid([3, 1], cb, groups, digital, n_ports=4)
    expected = np.concatenate([cb.beams[:, groups[3]], cb.beams[:, groups[1]]], axis=1)
    assert np.array_equal(hp.f_rf, expected)
    assert np.all(hp.f_bb[:, :2, 1:] == 0) and np.all(hp.f_bb[:, 2:, :1] == 0)
    assert np.allclose(np.abs(hp.f_rf), np.abs(hp.f_rf[0, 0]))
    assert list(hp.stream_user) == [0, 1]


def test_assemble_capacity(rng):
    cb, groups, digital = _hybrid(rng, 3)
    with pytest.raises(SchedulingCapacity):
        assemble_hybrid([0, 1, 2], cb, groups, digital, n_ports=4)


# --------------------------------------------------------------------------
# SINR
# --------------------------------------------------------------------------

def test_sinr_single_user_scalar_oracle(rng):
    n_t, noise_var = 16, 1e-2
    hvec = crandn(rng, 16)
    h = np.zeros((1, 1, 4, 1, 16), complex)
    h[0, 0, :, 0] = hvec
    f_rf = np.exp(1j * np.angle(hvec.conj()))[:, None]       # matched phases
    f_bb = np.full((1, 1, 1), np.sqrt(n_t), complex)
    from xbeam.link import HybridPrecoder
    hp = HybridPrecoder(np.array([0]), f_rf, f_bb, np.array([0]), n_t)
    got = sinr(ChannelSet.from_dense(h), hp, noise_var)
    signal = abs(hvec @ f_rf[:, 0]) ** 2 * n_t
    assert np.allclose(got[0, 0, :, 0], signal / (n_t * noise_var) / 4, rtol=1e-9)


def _random_link(rng, n_users=2, R=2, b_g=2, K=4, T=2, S=2):
    cb, groups, _ = _hybrid(rng, n_users, b_g)
    h = crandn(rng, n_users, T, K, R, 16)
    hs = ChannelSet.from_dense(h)
    cri = [0, 2][:n_users]
    est = np.stack([np.einsum("krn,nb->krb", h[u, 0], cb.beams[:, groups[c]])
                    .reshape(S, K // S, R, b_g).mean(1) for u, c in enumerate(cri)])
    digital = rzf_precoder(est, 1e-2, 16)
    hp = assemble_hybrid(cri, cb, groups, digital, n_ports=4)
    return h, hs, hp


def test_sinr_matches_loop_oracle(rng):
    h, hs, hp = _random_link(rng)
    got = sinr(hs, hp, 1e-2)
    want = sinr_oracle(h, hp.f_rf, hp.f_bb, hp.stream_user, 1e-2, hp.n_t)
    for u in range(2):
        mine = np.flatnonzero(hp.stream_user == u)
        assert np.allclose(got[u, ..., :len(mine)], want[u][..., mine], rtol=1e-9, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_sinr_below_interference_free(seed):
    r = np.random.default_rng(seed)
    h, hs, hp = _random_link(r)
    got = sinr(hs, hp, 1e-2)
    e = np.einsum("utkrn,nc->utkrc", h, hp.f_rf)
    K = h.shape[2]
    sb = np.arange(K) * hp.f_bb.shape[0] // K
    g = np.einsum("utkrc,kcs->utkrs", e, hp.f_bb[sb])
    reg = 2 * hp.n_t * 1e-2
    for u in range(2):
        for j, s in enumerate(np.flatnonzero(hp.stream_user == u)):
            alone = np.sum(np.abs(g[u, ..., s]) ** 2, axis=-1) / reg / K
            assert np.all(got[u, ..., j] <= alone * (1 + 1e-9) + 1e-12)


def test_sinr_orthogonal_users_match_single_user():
    n_t, noise_var = 16, 1e-3
    cb = constrained_dft(4, 4, 4, 4, 2).subset(np.arange(8))
    groups = beam_groups(8, 1)
    # each user sees exactly one DFT beam, so the two effective channels are orthogonal
    h = np.zeros((2, 1, 2, 1, 16), complex)
    h[0, 0, :, 0] = cb.beams[:, 0].conj()
    h[1, 0, :, 0] = cb.beams[:, 5].conj()
    hs = ChannelSet.from_dense(h)
    digital = [np.full((1, 1, 1), np.sqrt(n_t), complex)] * 2
    both = sinr(hs, assemble_hybrid([0, 5], cb, groups, digital, n_ports=4), noise_var)
    for u, c in enumerate([0, 5]):
        alone = sinr(hs.subset([u]), assemble_hybrid([c], cb, groups, digital[:1], n_ports=4),
                     noise_var)
        # the shared regulariser scales with the user count, hence the factor 2
        assert np.allclose(both[u], alone[0] / 2, rtol=1e-2)


def test_sinr_decreases_with_noise(rng):
    h, hs, hp = _random_link(rng)
    levels = [sinr(hs, hp, v).sum() for v in (1e-3, 1e-1, 10.0, 1e4)]
    assert all(a > b for a, b in zip(levels, levels[1:]))
    assert levels[-1] < 1e-3


# --------------------------------------------------------------------------
# spectral efficiency and overhead
# --------------------------------------------------------------------------

def test_se_trivial_values():
    se, sse = spectral_efficiency(np.ones((1, 1, 1, 1)))
    assert se[0] == 1.0 and sse == 1.0
    se, sse = spectral_efficiency(np.zeros((2, 2, 3, 1)))
    assert sse == 0.0


def test_se_matches_loop(rng):
    s = rng.exponential(size=(3, 2, 4, 2))
    se, sse = spectral_efficiency(s)
    want = np.zeros(3)
    for u in range(3):
        for t in range(2):
            for k in range(4):
                for r in range(2):
                    want[u] += np.log2(1 + s[u, t, k, r])
    assert np.allclose(se, want) and np.isclose(sse, want.sum())


def test_se_rejects_negative():
    with pytest.raises(InvalidArgument):
        spectral_efficiency(-np.ones((1, 1, 1, 1)))


def test_esse_cases(rng):
    s = np.full((2, 4, 8, 1), 3.0)
    _, sse = spectral_efficiency(s)
    assert effective_sse(s, 0) == pytest.approx(sse)
    assert effective_sse(s, 32) == 0.0
    assert effective_sse(s, 16) == pytest.approx(sse / 2, abs=1e-9)
    r = rng.exponential(size=(2, 4, 8, 1))
    assert effective_sse(r, removed_cells(4, 8, 0.3)) <= spectral_efficiency(r)[1]


def test_overhead_arithmetic(cfg):
    n, frac = overhead_resources(cfg)
    ssb = cfg.L_max * cfg.ssb_symbols * cfg.ssb_subcarriers
    csirs = -(-cfg.N_CSI // cfg.B_g) * cfg.N_RB * 12
    assert n == ssb + csirs
    assert frac == pytest.approx(n / (cfg.frame_symbols * cfg.frame_subcarriers))
    assert removed_cells(4, 10, 2.0) == 40 and removed_cells(4, 10, -1) == 0
    assert removed_cells(4, 10, 0.0) == 0 and removed_cells(4, 10, 1e-6) == 1
    assert removed_cells(4, 10, 0.5) == 20


# --------------------------------------------------------------------------
# scheduling
# --------------------------------------------------------------------------

def test_schedule_single_user(small_cfg, rng):
    est = crandn(rng, 1, 4, 2, 2)
    assert greedy_schedule(est, 1e-2, small_cfg) == (0,)


def test_schedule_duplicates_pick_one(small_cfg, rng):
    row = crandn(rng, 1, 4, 2, 2)
    est = np.concatenate([row, row])
    assert len(greedy_schedule(est, 1e-2, small_cfg, cri=[0, 0])) == 1


@pytest.mark.parametrize("seed", range(5))
def test_schedule_exhaustive_equals_greedy_orthogonal(small_cfg, seed):
    r = np.random.default_rng(seed)
    # four users with rank-1 channels along random unit rows and random gains
    gains = r.uniform(0.5, 2.0, 4)
    q, _ = np.linalg.qr(crandn(r, 2, 2))
    rows = np.stack([q[0], q[1], q[0], q[1]]) * gains[:, None]
    est = np.broadcast_to(rows[:, None, None, :], (4, 4, 2, 2)).copy()
    est[:, :, 1] *= 0.0
    a = greedy_schedule(est, 1e-3, small_cfg, method="exhaustive")
    b = greedy_schedule(est, 1e-3, small_cfg, method="greedy")
    assert a == b
