"""Analog beamforming codebooks and the hardware constraint projector."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConstraintViolation, DegenerateInput, InvalidArgument, InvalidDimension
from .scenario import planar_response_psi


class CodebookKind(enum.Enum):
    SSB = "ssb"
    CSIRS_POOL = "csirs_pool"
    CSIRS_ACTIVE = "csirs_active"


@dataclass(frozen=True)
class Codebook:
    """Columns of ``beams`` (``N_T x L``) are analog beamformers.

    ``b_phase`` records the phase resolution when ``constrained`` is set.
    """

    beams: np.ndarray
    kind: CodebookKind = CodebookKind.SSB
    constrained: bool = False
    b_phase: int | None = None

    def __post_init__(self):
        beams = np.asarray(self.beams, dtype=complex)
        if beams.ndim == 1:
            beams = beams[:, None]
        if beams.ndim != 2 or beams.shape[1] < 1 or beams.shape[0] < 1:
            raise InvalidDimension(f"codebook must be a nonempty matrix, got {beams.shape}")
        beams.setflags(write=False)
        object.__setattr__(self, "beams", beams)

    @property
    def n_tx(self) -> int:
        return self.beams.shape[0]

    @property
    def size(self) -> int:
        return self.beams.shape[1]

    def __len__(self) -> int:
        return self.size

    def subset(self, idx, kind: CodebookKind | None = None) -> "Codebook":
        return Codebook(self.beams[:, np.asarray(idx, dtype=int)], kind or self.kind,
                        self.constrained, self.b_phase)

    def check_constraints(self, b_phase: int | None = None, atol: float = 1e-12) -> None:
        """Raise :class:`ConstraintViolation` unless all entries are on the hardware grid."""
        b = b_phase if b_phase is not None else self.b_phase
        mag = np.abs(self.beams)
        if np.max(np.abs(mag - 1 / np.sqrt(self.n_tx))) > atol:
            raise ConstraintViolation("entries are not constant modulus 1/sqrt(N_T)")
        if b is not None:
            steps = np.angle(self.beams) * 2 ** b / (2 * np.pi)
            if np.max(np.abs(steps - np.round(steps))) > 1e-9:
                raise ConstraintViolation(f"phases are not on the {2 ** b}-level grid")


def dft_codebook(nx: int, ny: int, lx: int, ly: int,
                 kind: CodebookKind = CodebookKind.SSB) -> Codebook:
    """Planar DFT beams at phase steps ``(2 pi p / lx, 2 pi q / ly)``.

    Columns are ordered with ``p`` major. ``lx = nx`` and ``ly = ny`` gives
    an orthonormal basis; larger values oversample the angular grid.
    """
    if min(nx, ny, lx, ly) < 1:
        raise InvalidDimension("dft_codebook sizes must be >= 1")
    p, q = np.meshgrid(np.arange(lx), np.arange(ly), indexing="ij")
    beams = planar_response_psi(2 * np.pi * p.ravel() / lx, 2 * np.pi * q.ravel() / ly, nx, ny)
    return Codebook(beams.T, kind, False)


def split_grid(L: int) -> tuple[int, int]:
    """Split ``L`` beams into an ``lx x ly`` grid with ``lx >= ly`` powers of two."""
    if L < 1 or L & (L - 1):
        raise InvalidArgument(f"beam count must be a power of two, got {L}")
    ly = 2 ** (int(np.log2(L)) // 2)
    return L // ly, ly


def _phase_levels(beams: np.ndarray, b_phase: int) -> np.ndarray:
    """Integer phase level per entry, rounding to nearest with ties to the lower level."""
    levels = 2 ** b_phase
    x = np.mod(np.angle(beams), 2 * np.pi) * levels / (2 * np.pi)
    return np.mod(np.ceil(x - 0.5), levels).astype(np.int64)


def constrain_beams(beams: np.ndarray, b_phase: int) -> np.ndarray:
    """Constant-modulus projection followed by phase quantisation."""
    if b_phase < 1:
        raise InvalidArgument("b_phase must be >= 1")
    beams = np.asarray(beams, dtype=complex)
    n = beams.shape[0]
    q = _phase_levels(beams, b_phase)
    return np.exp(2j * np.pi * q / 2 ** b_phase) / np.sqrt(n)


def quantize_phases(cb: Codebook, b_phase: int) -> Codebook:
    """Return the constrained version of ``cb`` (idempotent)."""
    return Codebook(constrain_beams(cb.beams, b_phase), cb.kind, True, b_phase)


def constrained_dft(nx: int, ny: int, lx: int, ly: int, b_phase: int,
                    kind: CodebookKind = CodebookKind.SSB) -> Codebook:
    return quantize_phases(dft_codebook(nx, ny, lx, ly, kind), b_phase)


def normalize_digital(precoder: np.ndarray, n_t: int) -> np.ndarray:
    """Scale a digital precoder so its squared Frobenius norm equals ``n_t``."""
    precoder = np.asarray(precoder, dtype=complex)
    norm = np.linalg.norm(precoder)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateInput("cannot normalise a zero or non-finite precoder")
    return precoder * (np.sqrt(n_t) / norm)


def cross_correlation(a: Codebook, b: Codebook) -> np.ndarray:
    """Matrix ``|a_i^H b_j|`` of beam cross-correlations."""
    if a.n_tx != b.n_tx:
        raise InvalidDimension(f"codebooks have {a.n_tx} and {b.n_tx} antennas")
    return np.abs(a.beams.conj().T @ b.beams)
