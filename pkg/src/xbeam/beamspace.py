"""Fixed-resolution angular (beamspace) representation of codebooks.

A beam on an ``nx x ny`` array is reshaped to a matrix ``F`` and mapped to
``U_x^H F U_y`` where ``U_n`` holds ``n_m`` array responses at uniformly
spaced spatial frequencies. Because the grid only depends on
``(n_x0, n_y0)`` the same observation shape serves every array size.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .codebooks import Codebook, CodebookKind
from .errors import AliasingError, InvalidDimension

# scaling of the side channels fed to the network
COUNT_SCALE = 0.25
DB_SCALE = 0.1
DB_FLOOR = -40.0


@lru_cache(maxsize=64)
def _angular(n_s: int, n_m: int, grid: str) -> np.ndarray:
    n = np.arange(n_s)[:, None]
    m = np.arange(n_m)[None, :]
    if grid == "dft":
        psi = 2 * np.pi * m / n_m
    elif grid == "literal":
        psi = np.pi * np.cos(m / np.pi)
    else:
        raise ValueError(f"unknown grid {grid!r}")
    out = np.exp(1j * n * psi) / np.sqrt(n_s)
    out.setflags(write=False)
    return out


def angular_matrix(n_s: int, n_m: int, grid: str = "dft") -> np.ndarray:
    """``n_s x n_m`` matrix of array responses on an angular grid.

    The default grid spaces ``n_m`` spatial frequencies uniformly over one
    period, so ``n_m == n_s`` yields a unitary DFT matrix. ``grid="literal"``
    uses the irregular angle set ``theta_m = m / pi``.
    """
    if n_s < 1 or n_m < 1:
        raise InvalidDimension("grid sizes must be >= 1")
    if n_m < n_s:
        raise AliasingError(f"{n_m} grid points cannot represent {n_s} antennas")
    return _angular(int(n_s), int(n_m), grid).copy()


@lru_cache(maxsize=64)
def _pinvs(nx: int, ny: int, n_x0: int, n_y0: int, grid: str):
    ux = _angular(nx, n_x0, grid)
    uy = _angular(ny, n_y0, grid)
    px = np.linalg.pinv(ux.conj().T)       # nx x n_x0
    py = np.linalg.pinv(uy)                # n_y0 x ny
    px.setflags(write=False)
    py.setflags(write=False)
    return px, py


def _check(nx, ny, n_x0, n_y0):
    if min(nx, ny, n_x0, n_y0) < 1:
        raise InvalidDimension("grid and array sizes must be >= 1")
    if n_x0 < nx or n_y0 < ny:
        raise AliasingError(f"grid {n_x0}x{n_y0} is coarser than array {nx}x{ny}")


def to_beamspace(cb, nx: int, ny: int, n_x0: int, n_y0: int, grid: str = "dft") -> np.ndarray:
    """Beamspace image ``n_x0 x n_y0 x L`` of the codebook columns."""
    _check(nx, ny, n_x0, n_y0)
    beams = cb.beams if isinstance(cb, Codebook) else np.asarray(cb, dtype=complex)
    if beams.ndim == 1:
        beams = beams[:, None]
    if beams.shape[0] != nx * ny:
        raise InvalidDimension(f"beam length {beams.shape[0]} != {nx}x{ny}")
    F = beams.T.reshape(-1, nx, ny)
    ux = _angular(nx, n_x0, grid)
    uy = _angular(ny, n_y0, grid)
    out = ux.conj().T[None] @ F @ uy[None]
    return np.moveaxis(out, 0, -1)


def from_beamspace(grid_values: np.ndarray, nx: int, ny: int, grid: str = "dft") -> np.ndarray:
    """Invert :func:`to_beamspace` with the pseudo-inverses; returns ``N_T x L`` beams."""
    g = np.asarray(grid_values, dtype=complex)
    if g.ndim == 2:
        g = g[..., None]
    n_x0, n_y0 = g.shape[:2]
    _check(nx, ny, n_x0, n_y0)
    px, py = _pinvs(nx, ny, n_x0, n_y0, grid)
    F = px[None] @ np.moveaxis(g, -1, 0) @ py[None]
    return F.reshape(F.shape[0], nx * ny).T


def grid_gain(nx: int, ny: int, n_x0: int, n_y0: int) -> float:
    """Energy gain ``||to_beamspace(f)||^2 / ||f||^2`` of the uniform DFT frame."""
    return (n_x0 / nx) * (n_y0 / ny)


@dataclass(frozen=True)
class BeamspaceObservation:
    """Network input for one SSB period.

    ``grid`` is ``n_x0 x n_y0 x 2L`` with interleaved real and imaginary
    planes per SSB beam, ``counts`` and ``rsrp_sum`` are the per-beam
    number of reporting users and their summed linear RSRP.
    """

    grid: np.ndarray
    counts: np.ndarray
    rsrp_sum: np.ndarray
    noise_var: float
    frame_gain: float = 1.0

    @property
    def n_beams(self) -> int:
        return self.counts.shape[0]

    def rsrp_db(self) -> np.ndarray:
        """Summed RSRP relative to the noise power in dB, floored."""
        ref = self.noise_var if self.noise_var > 0 else 1.0
        with np.errstate(divide="ignore"):
            db = 10 * np.log10(self.rsrp_sum / ref)
        return np.where(self.rsrp_sum > 0, np.maximum(db, DB_FLOOR), DB_FLOOR)

    def planes(self) -> np.ndarray:
        """Channel-first input tensor ``4L x n_x0 x n_y0`` (float32).

        Per SSB beam the planes are real part, imaginary part, user count
        and RSRP level. The beamspace image is divided by the frame gain
        so its energy does not depend on the array size.
        """
        L = self.n_beams
        nx0, ny0 = self.grid.shape[:2]
        g = self.grid / np.sqrt(self.frame_gain)
        side = np.stack([self.counts * COUNT_SCALE,
                         (self.rsrp_db() - DB_FLOOR) * DB_SCALE], axis=-1)   # L x 2
        out = np.empty((L, 4, nx0, ny0), np.float32)
        out[:, 0] = np.moveaxis(g[..., 0::2], -1, 0)
        out[:, 1] = np.moveaxis(g[..., 1::2], -1, 0)
        out[:, 2:] = side[:, :, None, None]
        return out.reshape(4 * L, nx0, ny0)


def complex_to_planes(z: np.ndarray) -> np.ndarray:
    """``... x L`` complex -> ``... x 2L`` real with interleaved (re, im)."""
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def planes_to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0::2] + 1j * x[..., 1::2]


def assemble_observation(prev_ssb: Codebook, m, p, nx: int, ny: int, n_x0: int, n_y0: int,
                         noise_var: float) -> BeamspaceObservation:
    """Build the observation from the previous SSB codebook and known users' feedback.

    ``m`` and ``p`` are the beam indices and RSRPs of the users that took
    part in the previous sweep (possibly empty).
    """
    L = prev_ssb.size
    m = np.asarray(m, dtype=int)
    p = np.asarray(p, dtype=float)
    if m.size and (m.min() < 0 or m.max() >= L):
        raise InvalidDimension("feedback beam index out of range")
    counts = np.bincount(m, minlength=L).astype(float)[:L]
    sums = np.bincount(m, weights=p, minlength=L)[:L] if m.size else np.zeros(L)
    bs = to_beamspace(prev_ssb, nx, ny, n_x0, n_y0)
    return BeamspaceObservation(complex_to_planes(bs), counts, sums, noise_var,
                                grid_gain(nx, ny, n_x0, n_y0))
