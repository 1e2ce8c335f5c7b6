"""Episode orchestration, training data, training and fine-tuning loops.

An episode follows the SSB-period timing: the codebook generator only
sees the previous cycle (known users' feedback on the prior SSB
codebook), while CSI-RS selection uses the current cycle's SSB feedback.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import io
from .beam_training import (SsbFeedback, beam_groups, csi_metrics, csi_rs_sound, ls_estimate,
                            proportional_select, ssb_feedback, ssb_rsrp)
from .beamspace import assemble_observation
from .codebooks import Codebook, CodebookKind, constrain_beams, constrained_dft, split_grid
from .config import ClusteredChannelParams, ScenarioConfig, TrainConfig
from .csi_feedback import build_feedback_basis, quantize_typeii, reconstruct
from .errors import InvalidArgument
from .link import (assemble_hybrid, effective_sse, greedy_schedule, group_transfer,
                   overhead_resources, rank_indicator, removed_cells, rzf_precoder,
                   scale_reconstruction, sinr, spectral_efficiency)
from .network import TrainBatch, Xbm, beam_power, episode_losses, project_ste, train_step
from .scenario import (STAGE_EPISODE, STAGE_PRIOR, ChannelSet, generate_channels, stage_rng,
                       svd_reference)

logger = logging.getLogger(__name__)

# user ids at or above this value are never used for training
HELDOUT_BASE = 1 << 40
HELDOUT_SPAN = 1 << 30

SOURCES = ("dft", "xbm", "xbm-finetuned")


# --------------------------------------------------------------------------
# codebook helpers
# --------------------------------------------------------------------------

def dft_ssb(cfg: ScenarioConfig, L: int | None = None) -> Codebook:
    """Critically spaced DFT SSB codebook with ``L`` beams on an ``lx x ly`` grid."""
    lx, ly = split_grid(L or cfg.L_max)
    return constrained_dft(cfg.nx_phys, cfg.ny_phys, lx, ly, cfg.b_phase)


def dft_pool(cfg: ScenarioConfig, oversampling: int = 2) -> Codebook:
    """Oversampled DFT CSI-RS pool."""
    return constrained_dft(cfg.nx_phys, cfg.ny_phys, oversampling * cfg.nx_phys,
                           oversampling * cfg.ny_phys, cfg.b_phase, CodebookKind.CSIRS_POOL)


def random_dft_prior(cfg: ScenarioConfig, rng: np.random.Generator) -> Codebook:
    """Random subset of DFT beams used as the very first prior SSB codebook."""
    n = cfg.nx_phys * cfg.ny_phys
    if n >= cfg.L_max:
        grid = constrained_dft(cfg.nx_phys, cfg.ny_phys, cfg.nx_phys, cfg.ny_phys, cfg.b_phase)
    else:
        grid = dft_pool(cfg)
    idx = np.sort(rng.choice(grid.size, cfg.L_max, replace=False))
    return grid.subset(idx, CodebookKind.SSB)


def noise_floor(cfg: ScenarioConfig) -> float:
    """Expected noise energy in an SSB RSRP measurement."""
    return cfg.K * len(cfg.ssb_slots) * cfg.n_rx * cfg.noise_var


# --------------------------------------------------------------------------
# user pools (training data)
# --------------------------------------------------------------------------

@dataclass
class UserPool:
    """Per-user factors of the SSB-slot channel energy.

    ``gram[i]`` satisfies ``||gram[i] f||^2 = noiseless SSB RSRP of f``
    and ``svd[i]`` is its best achievable value.
    """

    ids: np.ndarray
    gram: np.ndarray
    svd: np.ndarray
    nx: int
    ny: int

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "UserPool":
        return UserPool(self.ids[idx], self.gram[idx], self.svd[idx], self.nx, self.ny)


def build_user_pool(cfg: ScenarioConfig, ch: ClusteredChannelParams, n_users: int,
                    first_id: int = 0, chunk: int = 256) -> UserPool:
    ids = np.arange(first_id, first_id + n_users, dtype=np.int64)
    grams, svds = [], []
    for s in range(0, n_users, chunk):
        part = ids[s:s + chunk]
        hs = generate_channels(cfg, ch, len(part), ch.site_seed, part)
        g = hs.gram_factor(cfg.ssb_slots)
        grams.append(g)
        svds.append(np.linalg.eigvalsh(g @ np.swapaxes(g.conj(), 1, 2))[:, -1])
    return UserPool(ids, np.concatenate(grams), np.concatenate(svds), cfg.nx_phys, cfg.ny_phys)


def pool_bytes(pool: UserPool, meta: dict) -> bytes:
    return io.pack_arrays(b"XBMD", (pool.nx, pool.ny, len(pool)), meta,
                          {"ids": pool.ids, "gram": pool.gram, "svd": pool.svd})


def save_pool(path, pool: UserPool, meta: dict | None = None) -> None:
    io.save_arrays(path, b"XBMD", (pool.nx, pool.ny, len(pool)), meta or {},
                   {"ids": pool.ids, "gram": pool.gram, "svd": pool.svd})


def load_pool(path) -> tuple[UserPool, dict]:
    fp, meta, arr = io.load_arrays(path, b"XBMD")
    return UserPool(arr["ids"], arr["gram"], arr["svd"], fp[0], fp[1]), meta


# --------------------------------------------------------------------------
# training batches
# --------------------------------------------------------------------------

def _observation_planes(cfg, prior_beams, gram, mask, known, nx, ny):
    """Network input from a prior codebook and the known users' noiseless feedback."""
    y = gram[mask & known] @ prior_beams                     # U P L
    p = np.sum(np.abs(y) ** 2, axis=1) + noise_floor(cfg)
    m = np.argmax(p, axis=1)
    prior = Codebook(prior_beams, CodebookKind.SSB, True, cfg.b_phase)
    obs = assemble_observation(prior, m, p[np.arange(len(m)), m], nx, ny, cfg.n_x0, cfg.n_y0,
                               cfg.noise_var)
    return obs.planes()


def make_batch(pool: UserPool, cfg: ScenarioConfig, rng: np.random.Generator, batch: int,
               model: Xbm | None = None, self_feed_prob: float = 0.0) -> TrainBatch:
    """Sample ``batch`` episodes from the pool.

    Each episode draws ``U ~ U[U_min, U_max]`` users, marks a share of them
    as known, and builds the observation from a random DFT prior. With
    probability ``self_feed_prob`` the prior is instead the model's own
    SSB codebook generated from that first observation, which matches
    what the generator sees in steady-state operation.
    """
    nx, ny = pool.nx, pool.ny
    P, N = pool.gram.shape[1:]
    U_max = cfg.U_max
    gram = np.zeros((batch, U_max, P, N), np.complex128)
    svd = np.ones((batch, U_max))
    mask = np.zeros((batch, U_max), bool)
    known = np.zeros((batch, U_max), bool)
    priors = []
    for b in range(batch):
        U = int(rng.integers(cfg.U_min, cfg.U_max + 1))
        idx = rng.choice(len(pool), U, replace=False)
        gram[b, :U] = pool.gram[idx]
        svd[b, :U] = pool.svd[idx]
        mask[b, :U] = True
        known[b, rng.permutation(U)[:int(round(cfg.known_fraction * U))]] = True
        priors.append(random_dft_prior(cfg.with_(nx_phys=nx, ny_phys=ny), rng).beams)
    planes = np.stack([_observation_planes(cfg, priors[b], gram[b], mask[b], known[b], nx, ny)
                       for b in range(batch)])
    if model is not None and self_feed_prob > 0:
        feed = rng.random(batch) < self_feed_prob
        if feed.any():
            with torch.no_grad():
                ssb_g, _ = model.forward(planes[feed], train=False)
                beams = model.mapper(nx, ny).beams(ssb_g).to(torch.complex128).numpy()
            for j, b in enumerate(np.flatnonzero(feed)):
                prior = constrain_beams(beams[j], cfg.b_phase)
                planes[b] = _observation_planes(cfg, prior, gram[b], mask[b], known[b], nx, ny)
    return TrainBatch(planes.astype(np.float32), gram, svd, mask, nx, ny)


def tau_schedule(tc: TrainConfig, step: int, total: int) -> float:
    """Geometric annealing of the softmax temperature from ``tau_start`` to ``tau_end``."""
    if total <= 1:
        return tc.tau_end
    frac = min(1.0, step / (total - 1))
    return float(tc.tau_start * (tc.tau_end / tc.tau_start) ** frac)


@torch.no_grad()
def evaluate_pool_gap(model: Xbm, pool: UserPool, cfg: ScenarioConfig, n_batches: int = 4,
                      seed: int = 12345, batch: int = 32, self_feed: bool = True) -> dict:
    """Mean hard-max SSB and CSI-RS gaps (dB, unsquared) on noiseless pool episodes."""
    rng = np.random.default_rng(seed)
    ssb, csi = [], []
    for _ in range(n_batches):
        tb = make_batch(pool, cfg, rng, batch, model, 1.0 if self_feed else 0.0)
        _, _, _, ex = episode_losses(model, tb, None, train=False)
        s = torch.as_tensor(tb.svd)
        m = torch.as_tensor(tb.mask)
        ssb.append((10 * torch.log10(s / ex["p_ssb"].double()))[m].numpy())
        csi.append((10 * torch.log10(s / ex["p_csi"].double()))[m].numpy())
    return {"ssb_gap_db": float(np.mean(np.concatenate(ssb))),
            "csi_gap_db": float(np.mean(np.concatenate(csi)))}


def train_model(model: Xbm, pool: UserPool, steps: int | None = None, seed: int | None = None,
                time_budget_s: float | None = None, log_every: int = 100,
                val_pool: UserPool | None = None, callback=None) -> list:
    """Supervised training loop; returns per-step diagnostics."""
    tc = model.train_cfg
    cfg = model.cfg
    steps = tc.steps if steps is None else steps
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed if seed is None else seed, 77]))
    history = []
    t0 = time.time()
    for i in range(steps):
        tau = tau_schedule(tc, i, steps)
        tb = make_batch(pool, cfg, rng, tc.batch, model, tc.self_feed_prob if i > 0 else 0.0)
        d = train_step(model, tb, tau)
        history.append(d)
        if log_every and (i % log_every == 0 or i == steps - 1):
            msg = f"step {i} loss {d.loss:.3f} ssb {d.ssb_loss:.3f} csi {d.csi_loss:.3f} " \
                  f"lr {d.lr:.2e} tau {tau:.3f}"
            if val_pool is not None:
                msg += " val " + str(evaluate_pool_gap(model, val_pool, cfg, n_batches=1))
            logger.info(msg)
        if callback is not None:
            callback(i, d)
        if time_budget_s is not None and time.time() - t0 > time_budget_s:
            logger.info("time budget reached after %d steps", i + 1)
            break
    return history


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    seed: int
    source: str
    n_users: int
    user_ids: np.ndarray
    known: np.ndarray
    ssb_rsrp: np.ndarray
    csi_rsrp: np.ndarray
    svd_ssb: np.ndarray
    svd_csi: np.ndarray
    ssb_gap_db: np.ndarray
    csi_gap_db: np.ndarray
    snr_db: np.ndarray
    scheduled: tuple
    sse: float
    esse: float
    overhead_res: int
    overhead_fraction: float
    reports: list = field(default_factory=list, repr=False)
    rec_scaled: np.ndarray | None = field(default=None, repr=False)
    ssb: Codebook | None = field(default=None, repr=False)
    b_sub: Codebook | None = field(default=None, repr=False)
    groups: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean_ssb_gap_db(self) -> float:
        return float(np.mean(self.ssb_gap_db))

    @property
    def mean_csi_gap_db(self) -> float:
        return float(np.mean(self.csi_gap_db))

    def row(self) -> dict:
        """Flat metrics row for CSV output."""
        return {
            "seed": self.seed, "source": self.source, "U": self.n_users,
            "U_a": len(self.scheduled), "ssb_gap_db": self.mean_ssb_gap_db,
            "csi_gap_db": self.mean_csi_gap_db, "snr_db": float(np.mean(self.snr_db)),
            "sse": self.sse, "esse": self.esse, "overhead_res": self.overhead_res,
        }


def draw_episode_users(cfg: ScenarioConfig, seed: int, heldout: bool = True):
    """Number of users, their ids and the known mask for an episode seed."""
    rng = stage_rng(seed, STAGE_EPISODE)
    U = int(rng.integers(cfg.U_min, cfg.U_max + 1))
    base = HELDOUT_BASE if heldout else 0
    span = HELDOUT_SPAN if heldout else cfg.user_pool
    ids = base + rng.choice(span, U, replace=False).astype(np.int64)
    known = np.zeros(U, bool)
    known[rng.permutation(U)[:int(round(cfg.known_fraction * U))]] = True
    return U, ids, known


def episode_channels(cfg: ScenarioConfig, ch: ClusteredChannelParams, seed: int,
                     heldout: bool = True) -> ChannelSet:
    U, ids, known = draw_episode_users(cfg, seed, heldout)
    return generate_channels(cfg, ch, U, ch.site_seed, ids, known)


def generator_codebooks(cfg: ScenarioConfig, hs: ChannelSet, model: Xbm, seed: int,
                        warmup: int = 1, prior: Codebook | None = None) -> tuple[Codebook, Codebook]:
    """Run the generator for ``warmup + 1`` SSB periods.

    The first period starts from ``prior`` (a random DFT subset when not
    given). Each period the known users report on the previous SSB
    codebook and the generator proposes the next one; the last proposal
    is returned.
    """
    if prior is None:
        prior = random_dft_prior(cfg, stage_rng(seed, STAGE_PRIOR))
    known = np.flatnonzero(hs.known_mask)
    for cycle in range(warmup + 1):
        if known.size:
            rs = ssb_rsrp(hs.subset(known), prior, cfg.noise_var, seed * 131 + cycle,
                          cfg.ssb_slots)
            fb = ssb_feedback(rs)
            m, p = fb.m, fb.p
        else:
            m, p = np.zeros(0, int), np.zeros(0)
        obs = assemble_observation(prior, m, p, cfg.nx_phys, cfg.ny_phys, cfg.n_x0, cfg.n_y0,
                                   cfg.noise_var)
        ssb, pool = model.codebooks(obs, cfg.nx_phys, cfg.ny_phys, cfg.b_phase)
        prior = ssb
    return ssb, pool


def run_episode(cfg: ScenarioConfig, ch: ClusteredChannelParams, source: str, seed: int,
                model: Xbm | None = None, heldout: bool = True,
                codebooks: tuple[Codebook, Codebook] | None = None,
                schedule: bool = True, keep_reports: bool = False,
                prior: Codebook | None = None, warmup: int = 1,
                channels: ChannelSet | None = None) -> EpisodeResult:
    """Run the full SSB -> CSI-RS -> feedback -> scheduling -> precoding chain.

    ``source`` selects the codebooks: ``dft`` uses the fixed DFT SSB grid
    and the oversampled DFT pool, the ``xbm`` variants query ``model``
    starting from the previous SSB codebook ``prior``. ``codebooks``
    overrides both. ``channels`` replaces the drawn users with a given
    channel set. Everything is a function of ``seed``.
    """
    if source not in SOURCES:
        raise InvalidArgument(f"unknown codebook source {source!r}")
    hs = channels if channels is not None else episode_channels(cfg, ch, seed, heldout)
    if codebooks is not None:
        ssb, pool = codebooks
    elif source == "dft":
        ssb, pool = dft_ssb(cfg), dft_pool(cfg)
    else:
        if model is None:
            raise InvalidArgument("learned sources need a model")
        ssb, pool = generator_codebooks(cfg, hs, model, seed, warmup, prior)

    sig = cfg.noise_var
    rsrp = ssb_rsrp(hs, ssb, sig, seed, cfg.ssb_slots)
    fb = ssb_feedback(rsrp)
    b_sub = proportional_select(fb.m, ssb, pool, min(cfg.N_CSI, pool.size))
    snd = csi_rs_sound(hs, b_sub, cfg.B_g, sig, seed, cfg.csirs_slot, cfg.N_P)
    est_k = ls_estimate(snd.y, snd.pilots, snd.norm)
    met = csi_metrics(est_k, sig, hs.K, hs.n_tx, cfg.S_B)

    svd_ssb = svd_reference(hs, slots=cfg.ssb_slots)
    svd_csi = svd_reference(hs, slots=[cfg.csirs_slot])
    csi_rsrp = met.best_beam_rsrp
    with np.errstate(divide="ignore"):
        ssb_gap = 10 * np.log10(svd_ssb / np.maximum(fb.p, 1e-300))
        csi_gap = 10 * np.log10(svd_csi / np.maximum(csi_rsrp, 1e-300))
        snr_db = 10 * np.log10(np.maximum(met.snr, 1e-300))

    fbk = build_feedback_basis(cfg.B_g, cfg.O_h, cfg.O_v)
    ranks, reports, scaled = [], [], []
    for u in range(hs.U):
        ri = min(rank_indicator(met.est[u], cfg.ri_threshold_db), cfg.B_g, cfg.n_rx)
        rep = quantize_typeii(met.est[u], fbk, cfg.L_csi, cfg.amp_bits, cfg.phase_bits,
                              int(met.cri[u]), ri, float(snr_db[u]))
        reports.append(rep)
        ranks.append(ri)
        scaled.append(scale_reconstruction(reconstruct(rep, fbk), rep.snr_db, sig, hs.K, hs.n_tx))
    scaled = np.stack(scaled)
    cri = np.array([r.cri for r in reports])
    transfer = group_transfer(b_sub, snd.groups)
    n_over, frac = overhead_resources(cfg)
    n_removed = removed_cells(cfg.T, cfg.K, frac)
    if schedule:
        sched = greedy_schedule(scaled, sig, cfg, ranks, cri, transfer)
        digital = rzf_precoder(scaled[list(sched)], sig, cfg.N_P, [ranks[u] for u in sched],
                               cri[list(sched)], transfer)
        hp = assemble_hybrid(cri[list(sched)], b_sub, snd.groups, digital, cfg.N_P, sched)
        s = sinr(hs, hp, sig)
        _, sse = spectral_efficiency(s)
        esse = effective_sse(s, n_removed)
    else:
        sched, sse, esse = (), 0.0, 0.0
    return EpisodeResult(
        seed=seed, source=source, n_users=hs.U, user_ids=hs.user_ids, known=hs.known_mask,
        ssb_rsrp=fb.p, csi_rsrp=csi_rsrp, svd_ssb=svd_ssb, svd_csi=svd_csi,
        ssb_gap_db=ssb_gap, csi_gap_db=csi_gap, snr_db=snr_db, scheduled=tuple(int(u) for u in sched),
        sse=float(sse), esse=float(esse), overhead_res=int(n_over), overhead_fraction=float(frac),
        reports=reports if keep_reports else [], rec_scaled=scaled if keep_reports else None,
        ssb=ssb if keep_reports else None, b_sub=b_sub if keep_reports else None,
        groups=snd.groups if keep_reports else None)


# --------------------------------------------------------------------------
# fine-tuning from reported CSI
# --------------------------------------------------------------------------

def estimated_gram(cfg: ScenarioConfig, res: EpisodeResult) -> np.ndarray:
    """Per-user energy factors rebuilt from the quantised reports only.

    The reconstructed beamformed channel of each subband is mapped back to
    the antenna domain through the pseudo-inverse of the reported beam
    group, giving ``U x (S_B N_R) x N_T`` factors whose ``||G f||^2``
    approximates the SSB-slot RSRP of beam ``f``.
    """
    out = []
    for u, rep in enumerate(res.reports):
        F = res.b_sub.beams[:, res.groups[rep.cri]]                  # N_T x B_g
        h = res.rec_scaled[u] @ np.linalg.pinv(F)                    # S R N_T
        out.append(h.reshape(-1, F.shape[0]) * np.sqrt(1.0 / (cfg.S_B * cfg.n_tx)))
    return np.stack(out)


@dataclass
class FinetuneEpisode:
    planes: np.ndarray
    gram: np.ndarray


def collect_finetune_data(cfg: ScenarioConfig, ch: ClusteredChannelParams, model: Xbm,
                          seeds, source: str = "xbm") -> list[FinetuneEpisode]:
    """Run episodes and keep only BS-side information.

    ``source`` chooses the codebooks used for sounding: ``xbm`` queries the
    current model, ``dft`` uses the fixed DFT grid and pool.
    """
    data = []
    for seed in seeds:
        hs = episode_channels(cfg, ch, seed, heldout=False)
        res = run_episode(cfg, ch, source, seed, model, heldout=False, schedule=False,
                          keep_reports=True, channels=hs)
        g = estimated_gram(cfg, res)
        # observation built from reported feedback on a random prior
        prior = random_dft_prior(cfg, stage_rng(seed, STAGE_PRIOR))
        known = np.flatnonzero(hs.known_mask)
        rs = ssb_rsrp(hs.subset(known), prior, cfg.noise_var, seed * 131, cfg.ssb_slots)
        fb = ssb_feedback(rs)
        obs = assemble_observation(prior, fb.m, fb.p, cfg.nx_phys, cfg.ny_phys, cfg.n_x0,
                                   cfg.n_y0, cfg.noise_var)
        data.append(FinetuneEpisode(obs.planes(), g))
    return data


def finetune_batch(cfg: ScenarioConfig, data: list[FinetuneEpisode], rng, batch: int) -> TrainBatch:
    idx = rng.choice(len(data), min(batch, len(data)), replace=False)
    P = max(d.gram.shape[1] for d in data)
    N = data[0].gram.shape[2]
    U_max = cfg.U_max
    gram = np.zeros((len(idx), U_max, P, N), np.complex128)
    mask = np.zeros((len(idx), U_max), bool)
    for j, i in enumerate(idx):
        g = data[i].gram
        gram[j, :g.shape[0], :g.shape[1]] = g
        mask[j, :g.shape[0]] = True
    planes = np.stack([data[i].planes for i in idx]).astype(np.float32)
    return TrainBatch(planes, gram, np.ones((len(idx), U_max)), mask, cfg.nx_phys, cfg.ny_phys)


def finetune_model(model: Xbm, data: list[FinetuneEpisode], steps: int, seed: int = 0,
                   lr: float | None = None, batch: int | None = None, tau: float = 0.05) -> list:
    """Unsupervised fine-tuning on reconstructed CSI (no true channels involved)."""
    tc = model.train_cfg
    lr = tc.finetune_lr if lr is None else lr
    model.set_learning_rate(lr / 10, lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    hist = []
    for _ in range(steps):
        tb = finetune_batch(model.cfg, data, rng, batch or tc.batch)
        hist.append(train_step(model, tb, tau, finetune=True))
    return hist


def summarize(values) -> dict:
    """Mean and the 5/20/50/80/95th percentiles."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"n": 0}
    q = np.percentile(v, [5, 20, 50, 80, 95])
    return {"n": int(v.size), "mean": float(v.mean()),
            **{f"p{p}": float(x) for p, x in zip((5, 20, 50, 80, 95), q)}}
