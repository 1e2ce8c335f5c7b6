"""Hybrid precoding, LMMSE SINR, spectral efficiency, overhead and scheduling."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .codebooks import Codebook
from .config import ScenarioConfig
from .errors import DegenerateInput, InvalidArgument, SchedulingCapacity
from .scenario import ChannelSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HybridPrecoder:
    """Analog beams of the scheduled users and their block-diagonal digital part.

    ``f_rf`` is ``N_T_phys x (U_a B_g)``; ``f_bb`` is
    ``S_B x (U_a B_g) x n_streams`` and is applied to every subcarrier of
    its subband. ``stream_user[s]`` is the position (in ``users``) of the
    user owning stream ``s``.
    """

    users: np.ndarray
    f_rf: np.ndarray
    f_bb: np.ndarray
    stream_user: np.ndarray
    n_t: int

    @property
    def n_streams(self) -> int:
        return self.f_bb.shape[-1]


@dataclass(frozen=True)
class LinkMetrics:
    sinr: np.ndarray          # U_a x T x K x R_max (zeros for unused streams)
    se: np.ndarray            # per scheduled user, summed over slots
    sse: float
    esse: float
    overhead_res: int


# --------------------------------------------------------------------------
# channel helpers
# --------------------------------------------------------------------------

def group_transfer(b_sub: Codebook, groups: np.ndarray) -> np.ndarray:
    """``X[a, b] = pinv(F_a) F_b`` for every pair of CSI-RS resources.

    A channel estimated through group ``a`` is mapped to group ``b`` by
    right-multiplying with ``X[a, b]``; the map is the identity for
    ``a == b``.
    """
    F = b_sub.beams[:, groups]                     # N_T x n_res x B_g
    F = np.transpose(F, (1, 0, 2))                 # n_res x N_T x B_g
    P = np.linalg.pinv(F)                          # n_res x B_g x N_T
    X = np.einsum("agn,bnh->abgh", P, F)
    n = len(groups)
    X[np.arange(n), np.arange(n)] = np.eye(groups.shape[1])
    return X


def rank_indicator(est: np.ndarray, threshold_db: float = 13.0) -> int:
    """Number of singular values of the stacked estimate within ``threshold_db`` of the largest."""
    m = np.asarray(est).reshape(-1, est.shape[-1])
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0:
        return 1
    return int(np.sum(20 * np.log10(np.maximum(s, 1e-300) / s[0]) >= -threshold_db))


def scale_reconstruction(rec: np.ndarray, snr_db: float, noise_var: float, k_total: int,
                         n_tx: int) -> np.ndarray:
    """Give a unit-norm reconstruction the magnitude implied by the reported SNR."""
    S = rec.shape[0]
    per_rx = (k_total / S) * np.sum(np.abs(rec) ** 2, axis=(0, 2))
    peak = per_rx.max() if per_rx.size else 0.0
    if peak == 0 or noise_var == 0:
        return rec
    snr = 10 ** (snr_db / 10)
    return rec * np.sqrt(snr * noise_var * k_total * n_tx / peak)


def _stream_rows(est_u: np.ndarray, rank: int) -> np.ndarray:
    """Dominant ``rank``-dimensional row space per subband: ``S_B x rank x B_g``."""
    u, s, vh = np.linalg.svd(est_u, full_matrices=False)
    return s[:, :rank, None] * vh[:, :rank, :]


# --------------------------------------------------------------------------
# precoding
# --------------------------------------------------------------------------

def rzf_precoder(est: np.ndarray, noise_var: float, n_t: int, ranks=None, cri=None,
                 transfer: np.ndarray | None = None) -> list[np.ndarray]:
    """Regularised zero-forcing digital precoders from estimated channels.

    ``est`` is ``U_a x S_B x N_R x B_g``. For user ``u`` and subband ``b``
    the precoder is ``(sum_i G_i^H G_i + U_a n_t sigma^2 I)^-1 H_u^H``
    with ``G_i`` the channel of user ``i`` seen through user ``u``'s
    analog group (via ``transfer`` and ``cri``; without them all users
    share one group). ``H_u`` keeps the ``ranks[u]`` dominant rows. Each
    block is scaled to squared Frobenius norm ``n_t`` per subband.
    Returns a list of ``S_B x B_g x R_u`` arrays.
    """
    est = np.asarray(est, dtype=complex)
    if est.ndim != 4 or est.shape[0] < 1:
        raise InvalidArgument("est must be U_a x S_B x N_R x B_g with U_a >= 1")
    if not np.all(np.isfinite(est)):
        raise InvalidArgument("estimates must be finite")
    U, S, R, B = est.shape
    ranks = [min(R, B)] * U if ranks is None else [int(r) for r in ranks]
    reg = U * n_t * noise_var * np.eye(B)
    out = []
    for u in range(U):
        gram = np.zeros((S, B, B), complex)
        for i in range(U):
            g = est[i]
            if transfer is not None and cri is not None and cri[i] != cri[u]:
                g = g @ transfer[cri[i], cri[u]]
            gram += np.swapaxes(g.conj(), 1, 2) @ g
        rows = _stream_rows(est[u], ranks[u])                    # S r B
        rhs = np.swapaxes(rows.conj(), 1, 2)                     # S B r
        a = gram + reg
        try:
            if noise_var > 0:
                w = np.linalg.solve(a, rhs)
            else:
                w = np.linalg.pinv(a) @ rhs
        except np.linalg.LinAlgError:
            w = np.linalg.pinv(a) @ rhs
        norms = np.linalg.norm(w, axis=(1, 2), keepdims=True)
        if np.any(norms == 0):
            raise DegenerateInput(f"user {u} has a zero channel estimate")
        out.append(w * np.sqrt(n_t) / norms)
    return out


def assemble_hybrid(cri, b_sub: Codebook, groups: np.ndarray, digital: list[np.ndarray],
                    n_ports: int, users=None) -> HybridPrecoder:
    """Concatenate the users' analog groups and place digital blocks on the diagonal."""
    cri = np.asarray(cri, dtype=int)
    U_a = len(cri)
    B = groups.shape[1]
    if U_a > n_ports // B:
        raise SchedulingCapacity(f"{U_a} users exceed capacity {n_ports // B}")
    if len(digital) != U_a:
        raise InvalidArgument("one digital block per scheduled user is required")
    f_rf = np.concatenate([b_sub.beams[:, groups[c]] for c in cri], axis=1)
    S = digital[0].shape[0]
    n_streams = sum(d.shape[-1] for d in digital)
    f_bb = np.zeros((S, U_a * B, n_streams), complex)
    owner = np.empty(n_streams, np.int64)
    col = 0
    for u, d in enumerate(digital):
        r = d.shape[-1]
        f_bb[:, u * B:(u + 1) * B, col:col + r] = d
        owner[col:col + r] = u
        col += r
    n_t = int(round(np.sum(np.abs(digital[0][0]) ** 2)))
    users = np.arange(U_a) if users is None else np.asarray(users, dtype=int)
    return HybridPrecoder(users, f_rf, f_bb, owner, n_t)


def _lmmse_sinr(g: np.ndarray, owner: np.ndarray, u: int, reg: float, k_total: int) -> np.ndarray:
    """Printed LMMSE SINR for the streams of user ``u``; ``g`` is ``... x N_R x n_streams``."""
    R = g.shape[-2]
    q_mat = g @ np.swapaxes(g.conj(), -1, -2) + reg * np.eye(R)
    mine = g[..., owner == u]
    try:
        sol = np.linalg.solve(q_mat, mine)
    except np.linalg.LinAlgError:
        sol = np.linalg.pinv(q_mat) @ mine
    q = np.real(np.sum(mine.conj() * sol, axis=-2))
    q = np.clip(q, 0.0, 1.0 - 1e-15)
    return (q / (1.0 - q)) / k_total


def sinr(hs: ChannelSet, hp: HybridPrecoder, noise_var: float) -> np.ndarray:
    """SINR per scheduled user, slot, subcarrier and stream (``U_a x T x K x R_max``).

    Uses the true channels: stream ``s`` of user ``i`` reaches user ``u``
    through ``H_u F_rf f_bb[:, s]``, the interference matrix adds
    ``U_a n_t sigma^2`` on the diagonal and the LMMSE ratio carries the
    ``1/K`` prefactor.
    """
    sub = hs.subset(hp.users)
    e = sub.apply(hp.f_rf)                                        # U_a T K R (U_a B)
    if not np.all(np.isfinite(e)):
        raise InvalidArgument("non-finite channel")
    S = hp.f_bb.shape[0]
    K = hs.K
    sb = np.arange(K) * S // K
    g = np.einsum("utkrc,kcs->utkrs", e, hp.f_bb[sb])
    U_a = len(hp.users)
    r_max = int(np.max(np.bincount(hp.stream_user, minlength=U_a)))
    out = np.zeros((U_a, hs.T, K, r_max))
    reg = U_a * hp.n_t * noise_var
    for u in range(U_a):
        val = _lmmse_sinr(g[u], hp.stream_user, u, reg, K)
        out[u, :, :, :val.shape[-1]] = val
    return out


def spectral_efficiency(sinr_values: np.ndarray):
    """Per-user SE (summed over slots, subcarriers and streams) and the sum SE."""
    s = np.asarray(sinr_values, dtype=float)
    if np.any(s < 0):
        raise InvalidArgument("SINR must be non-negative")
    bits = np.log2(1.0 + s)
    se = bits.reshape(bits.shape[0], -1).sum(axis=1) if bits.ndim > 1 else bits
    return se, float(bits.sum())


def overhead_resources(cfg: ScenarioConfig) -> tuple[int, float]:
    """Beam-management resource elements per period and their share of the frame."""
    ssb = cfg.L_max * cfg.ssb_symbols * cfg.ssb_subcarriers
    csirs = cfg.n_resources * cfg.N_RB * 12
    total = cfg.frame_symbols * cfg.frame_subcarriers
    return ssb + csirs, min(1.0, (ssb + csirs) / total)


def removed_cells(T: int, K: int, fraction: float) -> int:
    """Cells lost to overhead: any nonzero share removes at least one cell."""
    share = min(max(fraction, 0.0), 1.0) * T * K
    return int(math.ceil(share - 1e-9))


def effective_sse(sinr_values: np.ndarray, n_removed: int) -> float:
    """Sum SE after discarding the first ``n_removed`` (t, k) cells in row-major order.

    ``sinr_values`` is ``U x T x K x R``. Removing every cell gives 0.
    """
    s = np.asarray(sinr_values, dtype=float)
    T, K = s.shape[1:3]
    keep = np.ones(T * K, bool)
    keep[:min(max(n_removed, 0), T * K)] = False
    bits = np.log2(1.0 + s).sum(axis=(0, 3)).ravel()
    return float(bits[keep].sum())


# --------------------------------------------------------------------------
# scheduling
# --------------------------------------------------------------------------

def estimated_sse(est: np.ndarray, users, noise_var: float, n_t: int, k_total: int,
                  ranks=None, cri=None, transfer=None) -> float:
    """SSE predicted from estimated channels for one candidate user set."""
    users = list(users)
    e = est[users]
    rk = None if ranks is None else [ranks[u] for u in users]
    c = None if cri is None else np.asarray(cri)[users]
    digital = rzf_precoder(e, noise_var, n_t, rk, c, transfer)
    U_a = len(users)
    S = e.shape[1]
    owner = np.concatenate([np.full(d.shape[-1], i) for i, d in enumerate(digital)])
    reg = U_a * n_t * noise_var
    total = 0.0
    for u in range(U_a):
        cols = []
        for i in range(U_a):
            h = e[u]
            if transfer is not None and c is not None and c[u] != c[i]:
                h = h @ transfer[c[u], c[i]]
            cols.append(h @ digital[i])                           # S R r_i
        g = np.concatenate(cols, axis=-1)
        val = _lmmse_sinr(g, owner, u, reg, k_total)
        total += (k_total / S) * float(np.log2(1.0 + val).sum())
    return total


def greedy_schedule(est: np.ndarray, noise_var: float, cfg: ScenarioConfig, ranks=None,
                    cri=None, transfer=None, method: str = "auto") -> tuple[int, ...]:
    """Choose the user set with the highest estimated SSE.

    ``method`` is ``"exhaustive"``, ``"greedy"`` or ``"auto"`` (exhaustive
    for at most 8 users). Ties keep the earlier candidate, which prefers
    smaller and lexicographically lower sets.
    """
    U = est.shape[0]
    if U < 1:
        raise InvalidArgument("need at least one report")
    cap = max(1, cfg.N_P // cfg.B_g)
    if method == "auto":
        method = "exhaustive" if U <= 8 else "greedy"

    def score(users):
        return estimated_sse(est, users, noise_var, cfg.N_P, cfg.K, ranks, cri, transfer)

    best, best_val = None, -np.inf
    if method == "exhaustive":
        for size in range(1, min(cap, U) + 1):
            for users in itertools.combinations(range(U), size):
                v = score(users)
                if v > best_val * (1 + 1e-12) + 1e-12:
                    best, best_val = users, v
        return tuple(best)
    if method != "greedy":
        raise InvalidArgument(f"unknown scheduling method {method!r}")
    chosen: list[int] = []
    while len(chosen) < min(cap, U):
        cand_best, cand_val = None, best_val
        for u in range(U):
            if u in chosen:
                continue
            v = score(sorted(chosen + [u]))
            if v > cand_val * (1 + 1e-12) + 1e-12:
                cand_best, cand_val = u, v
        if cand_best is None:
            break
        chosen.append(cand_best)
        best_val = cand_val
    return tuple(sorted(chosen))
