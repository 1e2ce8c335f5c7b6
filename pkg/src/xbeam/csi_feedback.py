"""Type-II style PMI quantisation, reconstruction and the report wire format."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig
from .errors import InvalidArgument, MalformedReport

SNR_WORD_BITS = 8
SNR_FLOOR_DB = -20.0
SNR_STEP_DB = 0.5
AMP_RANGE_DB = 24.0


@dataclass(frozen=True)
class FeedbackCodebook:
    """Oversampled DFT basis over the ``B_g`` ports of one beam group."""

    basis: np.ndarray
    oversampling: int

    @property
    def b_g(self) -> int:
        return self.basis.shape[0]

    @property
    def size(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class CsiReport:
    """Feedback of one user.

    ``a`` and ``k`` are ``S_B x N_R x L_csi``; ``k[..., 0] == 1``. When
    quantised, ``amp_idx`` / ``phase_idx`` hold the integer words of the
    components ``1..L_csi-1``.
    """

    cri: int
    ri: int
    a: np.ndarray
    k: np.ndarray
    snr_db: float
    amp_idx: np.ndarray | None = None
    phase_idx: np.ndarray | None = None
    degenerate: bool = False


def build_feedback_basis(b_g: int, o_h: int = 1, o_v: int = 1) -> FeedbackCodebook:
    """``b_g``-point DFT columns on an ``o_h * o_v`` times finer frequency grid."""
    if b_g < 1 or o_h < 1 or o_v < 1:
        raise InvalidArgument("basis sizes must be >= 1")
    o = o_h * o_v
    n = np.arange(b_g)[:, None]
    j = np.arange(o * b_g)[None, :]
    return FeedbackCodebook(np.exp(2j * np.pi * n * j / (o * b_g)) / np.sqrt(b_g), o)


def amplitude_levels(bits: int) -> np.ndarray:
    """Amplitude grid: ``2**bits`` levels spaced uniformly in dB from 0 dB down."""
    step = AMP_RANGE_DB / 2 ** bits
    return 10 ** (-step * np.arange(2 ** bits) / 20)


def _quantize_amp(x: np.ndarray, bits: int) -> np.ndarray:
    step = AMP_RANGE_DB / 2 ** bits
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(np.maximum(np.abs(x), 1e-300))
    return np.clip(np.round(-db / step), 0, 2 ** bits - 1).astype(np.int64)


def _quantize_phase(x: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** bits
    v = np.mod(np.angle(x), 2 * np.pi) * levels / (2 * np.pi)
    return np.mod(np.ceil(v - 0.5), levels).astype(np.int64)


def _dequantize(amp_idx, phase_idx, amp_bits, phase_bits) -> np.ndarray:
    amp = amplitude_levels(amp_bits)[amp_idx]
    return amp * np.exp(2j * np.pi * phase_idx / 2 ** phase_bits)


def quantize_snr_db(snr_db: float) -> float:
    word = int(np.clip(np.round((snr_db - SNR_FLOOR_DB) / SNR_STEP_DB), 0,
                       2 ** SNR_WORD_BITS - 1)) if np.isfinite(snr_db) else 2 ** SNR_WORD_BITS - 1
    return SNR_FLOOR_DB + SNR_STEP_DB * word


def select_basis(est: np.ndarray, fb: FeedbackCodebook, l_csi: int) -> np.ndarray:
    """Wideband basis choice: best orthogonal rotation, then its ``l_csi`` strongest columns.

    The strongest column comes first (it is the cophasing reference) and
    the remaining ones are listed in ascending index order.
    """
    proj = est @ fb.basis.conj()
    energy = np.sum(np.abs(proj) ** 2, axis=tuple(range(proj.ndim - 1)))
    o = fb.oversampling
    # every rotation group is a complete basis, so groups are ranked by the
    # energy their l_csi strongest columns capture
    per_group = np.sort(energy.reshape(fb.b_g, o), axis=0)[::-1]   # column q + o*i -> [i, q]
    q = int(np.argmax(np.round(per_group[:l_csi].sum(axis=0), 12)))
    cols = q + o * np.arange(fb.b_g)
    ce = np.round(energy[cols], 12)
    top = cols[np.lexsort((cols, -ce))[:l_csi]]
    # the strongest column is the cophasing reference; the rest follow in index order
    return np.concatenate([top[:1], np.sort(top[1:])])


def quantize_typeii(est: np.ndarray, fb: FeedbackCodebook, l_csi: int,
                    amp_bits: int | None = 3, phase_bits: int | None = 3,
                    cri: int = 0, ri: int = 1, snr_db: float = 0.0) -> CsiReport:
    """Quantise one user's estimate ``S_B x N_R x B_g`` to a report.

    The basis columns are chosen once for the whole band. Per subband and
    receive antenna the coefficient of the strongest column is the
    reference; the others are reported relative to it with dB-uniform
    amplitude and uniform phase words (``None`` bit widths keep them
    exact). A zero estimate yields a degenerate all-zero report.
    """
    est = np.asarray(est, dtype=complex)
    if est.ndim != 3 or est.shape[-1] != fb.b_g:
        raise InvalidArgument(f"estimate must be S_B x N_R x {fb.b_g}")
    if not 1 <= l_csi <= fb.b_g:
        raise InvalidArgument("l_csi must lie in [1, B_g]")
    S, R, _ = est.shape
    if not np.any(est):
        z = np.zeros((S, R, l_csi))
        zi = np.zeros((S, R, l_csi - 1), np.int64)
        return CsiReport(cri, ri, z.astype(np.int64), z.astype(complex), quantize_snr_db(snr_db),
                         None if amp_bits is None else zi, None if phase_bits is None else zi,
                         degenerate=True)
    cols = select_basis(est, fb, l_csi)
    coef = est @ fb.basis[:, cols].conj()                    # S R L
    ref = coef[..., :1]
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(ref != 0, coef / np.where(ref == 0, 1, ref), 0)
    rel[..., 0] = 1.0
    rest = rel[..., 1:]
    amp_idx = phase_idx = None
    if amp_bits is not None:
        amp_idx = _quantize_amp(rest, amp_bits)
        mag = amplitude_levels(amp_bits)[amp_idx]
    else:
        mag = np.abs(rest)
    if phase_bits is not None:
        phase_idx = _quantize_phase(rest, phase_bits)
        ph = np.exp(2j * np.pi * phase_idx / 2 ** phase_bits)
    else:
        ph = np.exp(1j * np.angle(rest))
    k = np.concatenate([np.ones((S, R, 1), complex), mag * ph], axis=-1)
    a = np.broadcast_to(cols, (S, R, l_csi)).astype(np.int64)
    return CsiReport(int(cri), int(ri), a.copy(), k, quantize_snr_db(snr_db), amp_idx, phase_idx)


def reconstruct(report: CsiReport, fb: FeedbackCodebook) -> np.ndarray:
    """Rebuild ``S_B x N_R x B_g`` as ``sum_l k_l b_{a_l}``, scaled to unit Frobenius norm."""
    a = np.asarray(report.a)
    if a.size and (a.min() < 0 or a.max() >= fb.size):
        raise MalformedReport("basis index out of range")
    if report.degenerate:
        return np.zeros(a.shape[:2] + (fb.b_g,), complex)
    rec = np.einsum("srl,nsrl->srn", report.k, fb.basis[:, a])
    norm = np.linalg.norm(rec)
    return rec / norm if norm > 0 else rec


def row_correlation(est: np.ndarray, rec: np.ndarray) -> float:
    """Mean over (subband, rx antenna) rows of ``|<est, rec>| / (||est|| ||rec||)``.

    Per-row amplitude and phase are not reported, so the match is
    measured row by row.
    """
    num = np.abs(np.sum(est.conj() * rec, axis=-1))
    den = np.linalg.norm(est, axis=-1) * np.linalg.norm(rec, axis=-1)
    ok = den > 0
    return float(np.mean(num[ok] / den[ok])) if np.any(ok) else 0.0


def reconstruction_error(est: np.ndarray, rec: np.ndarray) -> float:
    """Mean squared chordal distance ``1 - corr^2`` between matching rows."""
    num = np.abs(np.sum(est.conj() * rec, axis=-1)) ** 2
    den = (np.linalg.norm(est, axis=-1) * np.linalg.norm(rec, axis=-1)) ** 2
    ok = den > 0
    return float(np.mean(1.0 - num[ok] / den[ok])) if np.any(ok) else 1.0


# --------------------------------------------------------------------------
# overhead and wire format
# --------------------------------------------------------------------------

def _bits(n: int) -> int:
    return math.ceil(math.log2(n)) if n > 1 else 0


def field_widths(cfg: ScenarioConfig) -> dict:
    basis = cfg.O_h * cfg.O_v * cfg.B_g
    return {
        "cri": _bits(cfg.n_resources),
        "ri": _bits(min(cfg.B_g, cfg.n_rx)),
        "index": _bits(basis),
        "amp": cfg.amp_bits or 0,
        "phase": cfg.phase_bits or 0,
    }


def overhead_bits(cfg: ScenarioConfig) -> int:
    """Bits of one report excluding the SNR word."""
    w = field_widths(cfg)
    coph = cfg.S_B * cfg.n_rx * (cfg.L_csi - 1) * (w["amp"] + w["phase"])
    return w["cri"] + w["ri"] + coph + cfg.L_csi * w["index"]


class _BitWriter:
    def __init__(self):
        self.bits: list[int] = []

    def put(self, value: int, width: int):
        if width and not 0 <= value < 2 ** width:
            raise MalformedReport(f"value {value} does not fit in {width} bits")
        self.bits.extend((int(value) >> i) & 1 for i in range(width))

    def tobytes(self) -> bytes:
        return np.packbits(np.asarray(self.bits, np.uint8), bitorder="little").tobytes()


class _BitReader:
    def __init__(self, data: bytes):
        self.bits = np.unpackbits(np.frombuffer(data, np.uint8), bitorder="little")
        self.pos = 0

    def get(self, width: int) -> int:
        if self.pos + width > len(self.bits):
            raise MalformedReport("report is truncated")
        chunk = self.bits[self.pos:self.pos + width]
        self.pos += width
        return int(sum(int(b) << i for i, b in enumerate(chunk)))


def pack_report(report: CsiReport, cfg: ScenarioConfig) -> bytes:
    """Serialise a quantised report (little-endian, LSB-first bit fields).

    Field order: CRI, RI-1, the wideband basis indices, then per subband
    the amplitude words followed by the phase words, and a final SNR word.
    """
    if cfg.amp_bits is None or cfg.phase_bits is None:
        raise MalformedReport("only quantised reports have a wire encoding")
    w = field_widths(cfg)
    out = _BitWriter()
    out.put(report.cri, w["cri"])
    out.put(report.ri - 1, w["ri"])
    for idx in np.asarray(report.a)[0, 0]:
        out.put(int(idx), w["index"])
    S, R = report.a.shape[:2]
    amp = np.zeros((S, R, cfg.L_csi - 1), np.int64) if report.amp_idx is None else report.amp_idx
    ph = np.zeros((S, R, cfg.L_csi - 1), np.int64) if report.phase_idx is None else report.phase_idx
    for s in range(S):
        for v in amp[s].ravel():
            out.put(int(v), w["amp"])
        for v in ph[s].ravel():
            out.put(int(v), w["phase"])
    word = int(round((report.snr_db - SNR_FLOOR_DB) / SNR_STEP_DB))
    out.put(int(np.clip(word, 0, 2 ** SNR_WORD_BITS - 1)), SNR_WORD_BITS)
    out.put(int(report.degenerate), 1)
    return out.tobytes()


def unpack_report(data: bytes, cfg: ScenarioConfig) -> CsiReport:
    """Inverse of :func:`pack_report`."""
    w = field_widths(cfg)
    rd = _BitReader(data)
    cri = rd.get(w["cri"])
    ri = rd.get(w["ri"]) + 1
    cols = np.array([rd.get(w["index"]) for _ in range(cfg.L_csi)], np.int64)
    S, R, L = cfg.S_B, cfg.n_rx, cfg.L_csi
    amp = np.zeros((S, R, L - 1), np.int64)
    ph = np.zeros((S, R, L - 1), np.int64)
    for s in range(S):
        amp[s] = np.array([rd.get(w["amp"]) for _ in range(R * (L - 1))]).reshape(R, L - 1)
        ph[s] = np.array([rd.get(w["phase"]) for _ in range(R * (L - 1))]).reshape(R, L - 1)
    snr_db = SNR_FLOOR_DB + SNR_STEP_DB * rd.get(SNR_WORD_BITS)
    degenerate = bool(rd.get(1))
    a = np.broadcast_to(cols, (S, R, L)).astype(np.int64)
    if degenerate:
        k = np.zeros((S, R, L), complex)
    else:
        k = np.concatenate([np.ones((S, R, 1), complex),
                            _dequantize(amp, ph, cfg.amp_bits, cfg.phase_bits)], axis=-1)
    return CsiReport(cri, ri, a.copy(), k, snr_db, amp, ph, degenerate)
