"""Array responses and the synthetic clustered MU-MIMO OFDM channel family.

Channels are stored as a path model (complex gains, delays, Doppler shifts
and the per-path array responses). The dense tensor
``U x T x K x N_R x N_T`` is only materialised on demand; every consumer in
the simulator works through :meth:`ChannelSet.apply` (``H @ F``) or
:meth:`ChannelSet.gram_factor`, which are exact and much cheaper.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import ClusteredChannelParams, ScenarioConfig
from .errors import InvalidArgument, InvalidDimension

logger = logging.getLogger(__name__)

# stream identifiers used to derive independent random streams per stage
STAGE_CHANNEL = 1
STAGE_SSB = 2
STAGE_CSIRS = 3
STAGE_EPISODE = 4
STAGE_PRIOR = 5


def stage_rng(seed: int, stage: int, *keys: int) -> np.random.Generator:
    """Counter-style generator keyed by ``(seed, stage, *keys)``.

    Keys identify the consumer (user id, beam index ...) so draws do not
    depend on evaluation order, which keeps serial and parallel runs equal.
    """
    words = [int(seed) & 0xFFFFFFFFFFFF, int(stage)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


# --------------------------------------------------------------------------
# array responses
# --------------------------------------------------------------------------

def ula_response(psi, n: int) -> np.ndarray:
    """Unit-norm uniform linear array response with phase step ``psi``.

    ``psi`` may be an array; the antenna axis is appended last.
    """
    if n < 1:
        raise InvalidDimension(f"antenna count must be >= 1, got {n}")
    psi = np.asarray(psi, dtype=float)
    m = np.arange(n)
    return np.exp(1j * psi[..., None] * m) / np.sqrt(n)


def array_response(theta: float, phi: float, n: int) -> np.ndarray:
    """Response ``exp(j m pi cos(theta) sin(phi)) / sqrt(n)`` for m = 0..n-1."""
    return ula_response(np.pi * np.cos(theta) * np.sin(phi), n)


def planar_response_psi(psi_x, psi_y, nx: int, ny: int) -> np.ndarray:
    """Planar response from the two per-axis phase steps.

    The result is ``kron(v_x, v_y)``, i.e. the ``nx x ny`` outer product
    flattened in row-major order (x index major).
    """
    vx = ula_response(psi_x, nx)
    vy = ula_response(psi_y, ny)
    out = vx[..., :, None] * vy[..., None, :]
    return out.reshape(out.shape[:-2] + (nx * ny,))


def planar_response(theta: float, phi: float, nx: int, ny: int) -> np.ndarray:
    """Planar array response.

    The horizontal axis uses phase step ``pi cos(theta) sin(phi)`` and the
    vertical one ``pi cos(theta) cos(phi)``, so ``theta = pi/2`` is the
    all-ones (boresight) beam.
    """
    if nx < 1 or ny < 1:
        raise InvalidDimension("array dimensions must be >= 1")
    c = np.cos(theta)
    return planar_response_psi(np.pi * c * np.sin(phi), np.pi * c * np.cos(phi), nx, ny)


def direction_to_psi(az, el):
    """Map azimuth/elevation (radians) to the planar array phase steps."""
    az = np.asarray(az, dtype=float)
    el = np.asarray(el, dtype=float)
    return np.pi * np.cos(el) * np.sin(az), np.pi * np.sin(el)


# --------------------------------------------------------------------------
# channel container
# --------------------------------------------------------------------------

@dataclass
class PathModel:
    """Per-user multipath description.

    Shapes: ``gain``, ``delay``, ``doppler`` are ``U x P``; ``a_tx`` is
    ``U x P x N_T`` and ``a_rx`` is ``U x P x N_R``. ``scale`` multiplies
    every path so that the expected Frobenius power is ``N_R N_T``.
    """

    gain: np.ndarray
    delay: np.ndarray
    doppler: np.ndarray
    a_tx: np.ndarray
    a_rx: np.ndarray
    scale: float

    def take(self, idx) -> "PathModel":
        return PathModel(self.gain[idx], self.delay[idx], self.doppler[idx],
                         self.a_tx[idx], self.a_rx[idx], self.scale)


@dataclass
class ChannelSet:
    """Channels of a set of users over a ``T x K`` resource grid.

    Either ``paths`` or a dense tensor ``h_dense`` backs the set. ``h`` is
    always available as ``U x T x K x N_R x N_T``.
    """

    user_ids: np.ndarray
    known_mask: np.ndarray
    n_rx: int
    n_tx: int
    freqs: np.ndarray
    times: np.ndarray
    paths: PathModel | None = None
    h_dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.known_mask = np.asarray(self.known_mask, dtype=bool)
        if self.paths is None and self.h_dense is None:
            raise InvalidArgument("ChannelSet needs paths or a dense tensor")
        if self.h_dense is not None:
            h = np.asarray(self.h_dense, dtype=complex)
            expect = (len(self.user_ids), len(self.times), len(self.freqs), self.n_rx, self.n_tx)
            if h.shape != expect:
                raise InvalidDimension(f"dense channel shape {h.shape} != {expect}")
            if not np.all(np.isfinite(h)):
                raise InvalidArgument("channel contains non-finite entries")
            self.h_dense = h

    # sizes --------------------------------------------------------------
    @property
    def U(self) -> int:
        return len(self.user_ids)

    @property
    def T(self) -> int:
        return len(self.times)

    @property
    def K(self) -> int:
        return len(self.freqs)

    @classmethod
    def from_dense(cls, h, user_ids=None, known_mask=None) -> "ChannelSet":
        h = np.asarray(h, dtype=complex)
        U, T, K, nr, nt = h.shape
        ids = np.arange(U) if user_ids is None else user_ids
        known = np.ones(U, bool) if known_mask is None else known_mask
        return cls(ids, known, nr, nt, np.arange(K, dtype=float), np.arange(T, dtype=float),
                   h_dense=h)

    def _sel(self, slots, ks):
        slots = np.arange(self.T) if slots is None else np.atleast_1d(np.asarray(slots, int))
        ks = np.arange(self.K) if ks is None else np.atleast_1d(np.asarray(ks, int))
        if slots.size == 0 or ks.size == 0:
            raise InvalidArgument("resource selection must be nonempty")
        return slots, ks

    def coeffs(self, slots=None, ks=None) -> np.ndarray:
        """Per-path complex coefficients ``U x t x k x P`` (including ``scale``)."""
        p = self.paths
        slots, ks = self._sel(slots, ks)
        f = self.freqs[ks]
        t = self.times[slots]
        freq_phase = np.exp(-2j * np.pi * p.delay[:, None, :] * f[None, :, None])   # U k P
        time_phase = np.exp(2j * np.pi * p.doppler[:, None, :] * t[None, :, None])  # U t P
        return p.scale * p.gain[:, None, None, :] * time_phase[:, :, None, :] * freq_phase[:, None, :, :]

    @property
    def h(self) -> np.ndarray:
        """Dense channel tensor ``U x T x K x N_R x N_T`` (materialised lazily)."""
        if self.h_dense is None:
            c = self.coeffs()
            p = self.paths
            self.h_dense = np.einsum("utkp,upr,upn->utkrn", c, p.a_rx, p.a_tx.conj(),
                                     optimize=True)
        return self.h_dense

    def apply(self, F: np.ndarray, slots=None, ks=None) -> np.ndarray:
        """Return ``H[u,t,k] @ F`` with shape ``U x t x k x N_R x L``."""
        F = np.asarray(F, dtype=complex)
        if F.ndim == 1:
            F = F[:, None]
        if F.shape[0] != self.n_tx:
            raise InvalidDimension(f"beam length {F.shape[0]} != {self.n_tx} antennas")
        slots, ks = self._sel(slots, ks)
        if self.paths is None:
            h = self.h_dense[:, slots][:, :, ks]
            return h @ F
        p = self.paths
        c = self.coeffs(slots, ks)                                   # U t k P
        proj = p.a_tx.conj() @ F                                     # U P L
        x = p.a_rx[:, :, :, None] * proj[:, :, None, :]              # U P R L
        U, P = c.shape[0], c.shape[-1]
        out = c.reshape(U, -1, P) @ x.reshape(U, P, -1)
        return out.reshape(U, len(slots), len(ks), self.n_rx, F.shape[1])

    def gram_factor(self, slots=None, ks=None, norm: float | None = None) -> np.ndarray:
        """Factor ``G`` (``U x P x N_T``) with ``G^H G = norm * sum_{t,k} H^H H``.

        ``norm`` defaults to ``1 / (K * N_T)`` with ``K`` the full grid
        width, which is the symbol normalisation of the RSRP measurement.
        Then ``||G f||^2`` is the noiseless RSRP of beam ``f`` over the
        chosen resources.
        """
        slots, ks = self._sel(slots, ks)
        if norm is None:
            norm = 1.0 / (self.K * self.n_tx)
        if self.paths is None:
            h = self.h_dense[:, slots][:, :, ks]
            gram = norm * np.einsum("utkrn,utkrm->unm", h.conj(), h)
            w, v = np.linalg.eigh(gram)
            w = np.clip(w, 0.0, None)
            return (np.sqrt(w)[:, :, None] * np.swapaxes(v.conj(), 1, 2))
        p = self.paths
        c = self.coeffs(slots, ks)
        U, P = c.shape[0], c.shape[-1]
        c = c.reshape(U, -1, P)
        cc = np.swapaxes(c.conj(), 1, 2) @ c                         # U P P
        rr = p.a_rx.conj() @ np.swapaxes(p.a_rx, 1, 2)               # U P P : a_p^H a_q
        m = norm * rr * cc
        m = 0.5 * (m + np.swapaxes(m.conj(), 1, 2))
        w, v = np.linalg.eigh(m)
        w = np.clip(w, 0.0, None)
        # G = sqrt(w) V^H A_tx^H ; A_tx^H rows are a_tx^H
        return np.sqrt(w)[:, :, None] * (np.swapaxes(v.conj(), 1, 2) @ p.a_tx.conj())

    def subset(self, idx) -> "ChannelSet":
        idx = np.asarray(idx, dtype=int)
        return ChannelSet(self.user_ids[idx], self.known_mask[idx], self.n_rx, self.n_tx,
                          self.freqs, self.times,
                          paths=None if self.paths is None else self.paths.take(idx),
                          h_dense=None if self.h_dense is None else self.h_dense[idx])

    def with_known(self, known_mask) -> "ChannelSet":
        return replace(self, known_mask=np.asarray(known_mask, dtype=bool))


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteLayout:
    """Fixed geometry of one site: user hotspots and shared scatterers."""

    hotspots: np.ndarray    # n_hot x 2 (az, el)
    scatterers: np.ndarray  # n_sc x 2 (az, el)


def site_layout(ch: ClusteredChannelParams) -> SiteLayout:
    rng = np.random.default_rng(np.random.SeedSequence([int(ch.site_seed), 0x517E]))
    hot = np.column_stack([
        rng.uniform(-0.85 * ch.sector_az, 0.85 * ch.sector_az, ch.n_hotspots),
        rng.uniform(ch.el_min, ch.el_max, ch.n_hotspots),
    ])
    sc = np.column_stack([
        rng.uniform(-ch.sector_az, ch.sector_az, ch.n_site_scatterers),
        rng.uniform(ch.el_min, ch.el_max, ch.n_site_scatterers),
    ])
    return SiteLayout(hot.reshape(-1, 2), sc.reshape(-1, 2))


def _laplace(rng, scale, size):
    # Laplacian with standard deviation `scale`
    if scale == 0:
        return np.zeros(size)
    return rng.laplace(0.0, scale / np.sqrt(2.0), size)


def _draw_user(rng: np.random.Generator, ch: ClusteredChannelParams, site: SiteLayout):
    """Draw one user's paths: (gain, delay, doppler, tx az, tx el, rx aoa)."""
    n_c, n_p = ch.n_clusters, ch.paths_per_cluster
    # user direction
    if len(site.hotspots) and rng.random() < ch.hotspot_fraction:
        c = site.hotspots[rng.integers(len(site.hotspots))]
        az = c[0] + rng.normal(0.0, ch.hotspot_spread)
        el = c[1] + rng.normal(0.0, 0.5 * ch.hotspot_spread)
    else:
        az = rng.uniform(-ch.sector_az, ch.sector_az)
        el = rng.uniform(ch.el_min, ch.el_max)
    az = float(np.clip(az, -ch.sector_az, ch.sector_az))
    el = float(np.clip(el, ch.el_min, ch.el_max))

    k_lin = np.inf if np.isposinf(ch.rician_k_db) else 10 ** (ch.rician_k_db / 10)
    p_los = 1.0 if np.isinf(k_lin) else k_lin / (1 + k_lin)
    p_nlos = 1.0 - p_los

    # cluster centres: shared site scatterer or a local one around the user
    centres = np.empty((n_c, 2))
    for i in range(n_c):
        if len(site.scatterers) and rng.random() < ch.site_scatter_prob:
            centres[i] = site.scatterers[rng.integers(len(site.scatterers))]
        else:
            centres[i] = (az + rng.normal(0.0, ch.local_spread),
                          el + rng.normal(0.0, 0.5 * ch.local_spread))
    # exponential power-delay profile with log-normal shadowing
    if ch.delay_spread > 0:
        tau_c = np.sort(rng.exponential(ch.delay_spread, n_c))
        pw = np.exp(-tau_c * 1.3 / (2.3 * ch.delay_spread))
    else:
        tau_c = np.zeros(n_c)
        pw = np.ones(n_c)
    pw = pw * 10 ** (-rng.normal(0.0, 3.0, n_c) / 10)
    pw = pw / pw.sum()

    tx_az = np.concatenate([[az], np.repeat(centres[:, 0], n_p)
                            + _laplace(rng, ch.azimuth_spread, n_c * n_p)])
    tx_el = np.concatenate([[el], np.repeat(centres[:, 1], n_p)
                            + _laplace(rng, ch.elevation_spread, n_c * n_p)])
    rx_c = rng.uniform(-np.pi / 2, np.pi / 2, n_c)
    rx = np.concatenate([[rng.uniform(-np.pi / 2, np.pi / 2)],
                         np.repeat(rx_c, n_p) + _laplace(rng, ch.rx_spread, n_c * n_p)])
    intra = rng.uniform(0.0, 0.1 * ch.delay_spread, n_c * n_p) if ch.delay_spread > 0 \
        else np.zeros(n_c * n_p)
    delay = np.concatenate([[0.0], np.repeat(tau_c, n_p) + intra])
    power = np.concatenate([[p_los], p_nlos * np.repeat(pw, n_p) / n_p])
    phase = rng.uniform(0.0, 2 * np.pi, 1 + n_c * n_p)
    gain = np.sqrt(power) * np.exp(1j * phase)
    doppler = ch.doppler_max_hz * np.cos(rng.uniform(0.0, 2 * np.pi, 1 + n_c * n_p))
    return gain, delay, doppler, tx_az, tx_el, rx


def generate_channels(cfg: ScenarioConfig, ch: ClusteredChannelParams, u_count: int,
                      seed: int, user_ids: Sequence[int] | None = None,
                      known_mask=None) -> ChannelSet:
    """Draw ``u_count`` users from the clustered family.

    Each user's channel depends only on ``(seed, user_id, site)``, so the
    same user id always yields the same channel regardless of which other
    users are drawn alongside it. The total path power of every user is 1
    and the tensor is scaled by ``sqrt(N_R N_T)``, hence
    ``E ||H[u,t,k]||_F^2 = N_R N_T``.
    """
    if u_count < 1:
        raise InvalidArgument("u_count must be >= 1")
    ids = np.arange(u_count) if user_ids is None else np.asarray(user_ids, dtype=np.int64)
    if len(ids) != u_count:
        raise InvalidArgument("user_ids length must equal u_count")
    site = site_layout(ch)
    draws = [_draw_user(stage_rng(seed, STAGE_CHANNEL, int(uid)), ch, site) for uid in ids]
    gain, delay, doppler, az, el, rx = (np.stack(x) for x in zip(*draws))
    psi_x, psi_y = direction_to_psi(az, el)
    a_tx = planar_response_psi(psi_x, psi_y, cfg.nx_phys, cfg.ny_phys)
    a_rx = ula_response(np.pi * np.sin(rx), cfg.n_rx)
    paths = PathModel(gain, delay, doppler, a_tx, a_rx, float(np.sqrt(cfg.n_rx * cfg.n_tx)))
    freqs = np.arange(cfg.K) * (cfg.bandwidth_hz / cfg.K)
    times = np.arange(cfg.T) * cfg.slot_s
    known = np.ones(u_count, bool) if known_mask is None else known_mask
    return ChannelSet(ids, known, cfg.n_rx, cfg.n_tx, freqs, times, paths=paths)


def svd_reference(hs: ChannelSet, band=None, slots=None) -> np.ndarray:
    """Dominant squared singular value of each user's stacked channel.

    The channel is stacked over the given slots and subcarriers and scaled
    by ``1 / (K N_T)``, so the result is the largest noiseless RSRP any
    unit-norm beam can collect on those resources.
    """
    if band is not None and np.size(band) == 0:
        raise InvalidArgument("band must be nonempty")
    g = hs.gram_factor(slots, band)
    return np.linalg.eigvalsh(g @ np.swapaxes(g.conj(), 1, 2))[:, -1]
