"""SSB sweep, proportional CSI-RS selection, CSI-RS sounding and LS estimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .codebooks import Codebook, CodebookKind, cross_correlation
from .errors import ConfigError, ConstraintViolation, EstimationFailure, InvalidArgument
from .scenario import STAGE_CSIRS, STAGE_SSB, ChannelSet, stage_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SsbFeedback:
    """Best RSRP ``p`` and best beam ``m`` reported by each user."""

    p: np.ndarray
    m: np.ndarray

    def subset(self, mask) -> "SsbFeedback":
        return SsbFeedback(self.p[mask], self.m[mask])


@dataclass(frozen=True)
class Sounding:
    """Noisy CSI-RS observations.

    ``y`` has shape ``n_res x U x K x N_R x B_g`` (one pilot symbol per
    column); ``groups[i]`` lists the beams of ``b_sub`` sounded on
    resource ``i``.
    """

    y: np.ndarray
    pilots: np.ndarray
    groups: np.ndarray
    norm: float


@dataclass(frozen=True)
class BeamformedEstimate:
    """Per-user CSI derived from CSI-RS estimates.

    ``est`` is the estimate ``U x S_B x N_R x B_g`` on the selected
    resource. ``snr`` is linear; ``snr_all`` holds every resource.
    ``beam_rsrp`` is the per-beam RSRP with ideal receive combining
    (``U x n_res x B_g``) and ``resource_rsrp`` the per-resource RSRP with
    a max over receive antennas.
    """

    est: np.ndarray
    snr: np.ndarray
    cri: np.ndarray
    snr_all: np.ndarray
    beam_rsrp: np.ndarray
    resource_rsrp: np.ndarray
    est_all: np.ndarray

    @property
    def best_beam_rsrp(self) -> np.ndarray:
        return self.beam_rsrp.reshape(self.beam_rsrp.shape[0], -1).max(axis=1)


# --------------------------------------------------------------------------
# SSB
# --------------------------------------------------------------------------

def dmrs_symbols(n: int, seed: int = 0) -> np.ndarray:
    """Unit-modulus QPSK reference symbols."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD3]))
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, n)))


def ssb_rsrp(hs: ChannelSet, ssb: Codebook, noise_var: float, seed: int,
             slots=(0,), band=None) -> np.ndarray:
    """RSRP matrix ``U x L``: received energy of each SSB beam.

    ``y = H f s / sqrt(K N_T) + n`` is summed in energy over ``band`` and
    ``slots``; noise is complex Gaussian with variance ``noise_var`` per
    receive antenna and resource element. Noise draws are keyed by
    ``(seed, user id)``.
    """
    if not ssb.constrained:
        raise ConstraintViolation("SSB codebook must be constrained before transmission")
    band = np.arange(hs.K) if band is None else np.asarray(band, dtype=int)
    slots = np.asarray(slots, dtype=int)
    hf = hs.apply(ssb.beams, slots, band) / np.sqrt(hs.K * hs.n_tx)   # U t k R L
    s = dmrs_symbols(len(slots) * len(band)).reshape(len(slots), len(band))
    y = hf * s[None, :, :, None, None]
    if noise_var > 0:
        shape = y.shape[1:]
        for u, uid in enumerate(hs.user_ids):
            rng = stage_rng(seed, STAGE_SSB, int(uid))
            n = rng.standard_normal(shape + (2,)) @ np.array([1.0, 1j])
            y[u] += np.sqrt(noise_var / 2) * n
    return np.sum(np.abs(y) ** 2, axis=(1, 2, 3))


def ssb_feedback(rsrp: np.ndarray) -> SsbFeedback:
    """Row max and row argmax (ties go to the lowest index)."""
    rsrp = np.asarray(rsrp, dtype=float)
    if rsrp.ndim != 2 or rsrp.size == 0:
        raise InvalidArgument("rsrp must be a nonempty matrix")
    m = np.argmax(rsrp, axis=1)
    return SsbFeedback(rsrp[np.arange(len(m)), m], m.astype(np.int64))


# --------------------------------------------------------------------------
# proportional selection
# --------------------------------------------------------------------------

def allocate(m: np.ndarray, n_beams: int, n_csi: int) -> np.ndarray:
    """Active CSI-RS beams per SSB beam, proportional to the report counts.

    Nearest-integer rounding of ``n_csi * count / U`` may miss the total;
    the difference is repaired by largest remainder (adding where the
    rounded value fell furthest below the exact share, removing where it
    rose furthest above), ties to the lower index.
    """
    m = np.asarray(m, dtype=int)
    if m.size == 0:
        raise InvalidArgument("feedback must be nonempty")
    counts = np.bincount(m, minlength=n_beams)[:n_beams].astype(np.int64)
    U = m.size
    # shares are compared as integers scaled by U so exact ties stay ties
    num = n_csi * counts
    alloc = (2 * num + U) // (2 * U)
    diff = n_csi - int(alloc.sum())
    while diff > 0:
        i = int(np.argmax(num - alloc * U))
        alloc[i] += 1
        diff -= 1
    while diff < 0:
        score = np.where(alloc > 0, alloc * U - num, np.iinfo(np.int64).min)
        i = int(np.argmax(score))
        alloc[i] -= 1
        diff += 1
    return alloc


def select_by_correlation(m, corr: np.ndarray, n_csi: int) -> np.ndarray:
    """Indices of the proportionally selected pool beams given ``|ssb_i^H pool_j|``.

    Each SSB beam ``i`` receives ``allocate(...)[i]`` pool beams, taken in
    descending correlation with beam ``i`` and skipping beams already
    assigned to an earlier SSB beam. Correlations are compared after
    rounding to 1e-12 so ties resolve to the lower pool index.
    """
    n_ssb, n_pool = corr.shape
    if n_csi > n_pool:
        raise InvalidArgument(f"n_csi={n_csi} exceeds pool size {n_pool}")
    if n_csi < 1:
        raise InvalidArgument("n_csi must be >= 1")
    alloc = allocate(m, n_ssb, n_csi)
    c = np.round(corr, 12)
    idx = np.arange(n_pool)
    taken = np.zeros(n_pool, bool)
    chosen: list[int] = []
    for i in np.flatnonzero(alloc):
        order = np.lexsort((idx, -c[i]))
        free = order[~taken[order]][: alloc[i]]
        taken[free] = True
        chosen.extend(int(j) for j in free)
    return np.asarray(chosen, dtype=np.int64)


def proportional_select(m, ssb: Codebook, pool: Codebook, n_csi: int,
                        return_indices: bool = False):
    """Choose ``n_csi`` distinct pool beams in proportion to the SSB reports ``m``.

    The result is ordered by SSB beam (see :func:`select_by_correlation`).
    """
    if n_csi > pool.size:
        raise InvalidArgument(f"n_csi={n_csi} exceeds pool size {pool.size}")
    sel = select_by_correlation(m, cross_correlation(ssb, pool), n_csi)
    cb = pool.subset(sel, CodebookKind.CSIRS_ACTIVE)
    return (cb, sel) if return_indices else cb


# --------------------------------------------------------------------------
# CSI-RS sounding and estimation
# --------------------------------------------------------------------------

def beam_groups(n_beams: int, b_g: int) -> np.ndarray:
    """Group beam indices into resources of ``b_g``; the last group repeats its final beam."""
    n_res = -(-n_beams // b_g)
    idx = np.arange(n_res * b_g)
    return np.minimum(idx, n_beams - 1).reshape(n_res, b_g)


def pilot_matrix(b_g: int) -> np.ndarray:
    """Unitary DFT pilot (ports x symbols), so ``S S^H = S^H S = I``."""
    n = np.arange(b_g)
    return np.exp(-2j * np.pi * np.outer(n, n) / b_g) / np.sqrt(b_g)


def csi_rs_sound(hs: ChannelSet, b_sub: Codebook, b_g: int, noise_var: float, seed: int,
                 slot: int = 1, n_ports: int | None = None) -> Sounding:
    """Sound the active beams in groups of ``b_g`` with orthogonal pilots.

    Every resource spans all ``K`` subcarriers of ``slot`` and ``b_g``
    code-multiplexed symbols. Returns per-resource observations
    ``Y = H F_i S / sqrt(K N_T) + N``.
    """
    if n_ports is not None and b_g > n_ports:
        raise ConfigError(f"B_g={b_g} exceeds the {n_ports} available ports")
    if b_g < 1:
        raise ConfigError("B_g must be >= 1")
    groups = beam_groups(b_sub.size, b_g)
    s = pilot_matrix(b_g)
    norm = np.sqrt(hs.K * hs.n_tx)
    hf = hs.apply(b_sub.beams[:, groups.ravel()], [slot])[:, 0] / norm   # U K R (n_res*B_g)
    U, K, R = hf.shape[:3]
    hf = hf.reshape(U, K, R, len(groups), b_g)
    y = np.einsum("ukrib,bs->iukrs", hf, s)
    if noise_var > 0:
        for u, uid in enumerate(hs.user_ids):
            rng = stage_rng(seed, STAGE_CSIRS, int(uid))
            n = rng.standard_normal((len(groups), K, R, b_g, 2)) @ np.array([1.0, 1j])
            y[:, u] += np.sqrt(noise_var / 2) * n
    return Sounding(y, s, groups, float(norm))


def ls_estimate(y: np.ndarray, s_tr: np.ndarray, norm: float = 1.0,
                n_subbands: int | None = None) -> np.ndarray:
    """Least-squares estimate ``norm * Y S^+`` along the last axis.

    With ``n_subbands`` the estimate (axis ``-3`` indexing subcarriers) is
    averaged within each contiguous subband.
    """
    s_tr = np.asarray(s_tr, dtype=complex)
    if np.linalg.matrix_rank(s_tr) < s_tr.shape[0]:
        raise EstimationFailure("pilot matrix is not full row rank")
    est = norm * (y @ np.linalg.pinv(s_tr))
    if n_subbands is not None:
        K = est.shape[-3]
        if K % n_subbands:
            raise InvalidArgument("subband count must divide the subcarrier count")
        shp = est.shape[:-3] + (n_subbands, K // n_subbands) + est.shape[-2:]
        est = est.reshape(shp).mean(axis=-3)
    return est


def csi_metrics(est_k: np.ndarray, noise_var: float, k_total: int, n_tx: int,
                n_subbands: int) -> BeamformedEstimate:
    """Resource SNR, CRI and per-subband estimates from per-subcarrier LS estimates.

    ``est_k`` has shape ``n_res x U x K x N_R x B_g``. The SNR of a
    resource is the largest per-antenna estimate energy scaled by
    ``1 / (K N_T sigma^2)``; the CRI is its argmax.
    """
    est_k = np.asarray(est_k)
    if est_k.shape[0] < 1:
        raise InvalidArgument("at least one resource is required")
    norm = 1.0 / (k_total * n_tx)
    energy = np.sum(np.abs(est_k) ** 2, axis=2) * norm        # n_res U R B_g
    res_rsrp = energy.sum(axis=-1).max(axis=-1).T              # U n_res
    beam_rsrp = np.transpose(energy.sum(axis=2), (1, 0, 2))    # U n_res B_g
    with np.errstate(divide="ignore", invalid="ignore"):
        snr_all = res_rsrp / noise_var if noise_var > 0 else np.where(res_rsrp > 0, np.inf, 0.0)
    cri = np.argmax(snr_all, axis=1)
    K = est_k.shape[2]
    sub = est_k.reshape(est_k.shape[:2] + (n_subbands, K // n_subbands) + est_k.shape[3:]).mean(3)
    sub = np.transpose(sub, (1, 0, 2, 3, 4))                   # U n_res S_B R B_g
    users = np.arange(est_k.shape[1])
    return BeamformedEstimate(sub[users, cri], snr_all[users, cri], cri, snr_all, beam_rsrp,
                              res_rsrp, sub)
