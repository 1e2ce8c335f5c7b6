"""Dual-head convolutional codebook generator and its differentiable training core.

One head emits the next SSB codebook, the other a pool of candidate
CSI-RS beams, both as beamspace images. Beams are recovered with the
beamspace pseudo-inverse, projected onto the hardware constraints with a
straight-through gradient, and scored by the received power they collect.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .beam_training import proportional_select, select_by_correlation
from .beamspace import BeamspaceObservation, _pinvs
from .codebooks import Codebook, CodebookKind, constrain_beams
from .config import ScenarioConfig, TrainConfig
from .errors import ConfigError, FingerprintMismatch, FormatError

logger = logging.getLogger(__name__)

POWER_FLOOR = 1e-20


@dataclass(frozen=True)
class XbmShape:
    """Everything that determines layer shapes; used as checkpoint fingerprint."""

    n_x0: int
    n_y0: int
    planes: int
    n_ssb: int
    n_pool: int

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "XbmShape":
        return cls(cfg.n_x0, cfg.n_y0, cfg.input_planes, cfg.L_max, cfg.N_CSI_pool)

    def as_tuple(self) -> tuple[int, ...]:
        return (self.n_x0, self.n_y0, self.planes, self.n_ssb, self.n_pool)


def _pool_out(n: int) -> int:
    return math.ceil(n / 2)


class XbmHead(nn.Module):
    """Conv(128)+pool, conv(96)+pool, dropout, conv(320), flatten, dropout, dense.

    The first convolution pads by two so the spatial size grows to
    ``n + 2`` before ceil-mode pooling, giving ``ceil((n+2)/2)`` and then
    ``ceil((n+2)/4)`` after the second stage.
    """

    def __init__(self, planes: int, n_x0: int, n_y0: int, n_beams: int,
                 widths=(128, 96, 320), dropout=(0.3, 0.1)):
        super().__init__()
        w1, w2, w3 = widths
        self.n_x0, self.n_y0, self.n_beams = n_x0, n_y0, n_beams
        self.conv1 = nn.Conv2d(planes, w1, 3, padding=2)
        self.conv2 = nn.Conv2d(w1, w2, 3, padding=1)
        self.conv3 = nn.Conv2d(w2, w3, 3, padding=1)
        self.pool = nn.MaxPool2d(2, ceil_mode=True)
        self.drop1 = nn.Dropout(dropout[0])
        self.drop2 = nn.Dropout(dropout[1])
        hx = _pool_out(_pool_out(n_x0 + 2))
        hy = _pool_out(_pool_out(n_y0 + 2))
        self.flat = hx * hy * w3
        self.dense = nn.Linear(self.flat, 2 * n_x0 * n_y0 * n_beams)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        x = self.drop1(x)
        x = torch.relu(self.conv3(x))
        x = self.drop2(torch.flatten(x, 1))
        x = self.dense(x)
        return x.view(-1, self.n_x0, self.n_y0, 2 * self.n_beams)


class XbmNet(nn.Module):
    """Two parallel heads sharing the same input."""

    def __init__(self, shape: XbmShape, widths=(128, 96, 320), dropout=(0.3, 0.1)):
        super().__init__()
        self.shape = shape
        self.ssb = XbmHead(shape.planes, shape.n_x0, shape.n_y0, shape.n_ssb, widths, dropout)
        self.pool = XbmHead(shape.planes, shape.n_x0, shape.n_y0, shape.n_pool, widths, dropout)

    def forward(self, x: torch.Tensor):
        if x.shape[1:] != (self.shape.planes, self.shape.n_x0, self.shape.n_y0):
            raise ConfigError(f"input shape {tuple(x.shape[1:])} does not match network "
                              f"{(self.shape.planes, self.shape.n_x0, self.shape.n_y0)}")
        return self.ssb(x), self.pool(x)


# --------------------------------------------------------------------------
# differentiable beam recovery and projection
# --------------------------------------------------------------------------

class BeamMapper:
    """Torch version of the beamspace pseudo-inverse for one array geometry."""

    def __init__(self, nx: int, ny: int, n_x0: int, n_y0: int, dtype=torch.complex64):
        px, py = _pinvs(nx, ny, n_x0, n_y0, "dft")
        self.nx, self.ny = nx, ny
        self.px = torch.as_tensor(np.array(px), dtype=dtype)
        self.py = torch.as_tensor(np.array(py), dtype=dtype)

    def to(self, dtype):
        self.px = self.px.to(dtype)
        self.py = self.py.to(dtype)
        return self

    def beams(self, grid: torch.Tensor) -> torch.Tensor:
        """``B x n_x0 x n_y0 x 2N`` real planes -> ``B x N_T x N`` complex beams."""
        z = torch.complex(grid[..., 0::2], grid[..., 1::2]).to(self.px.dtype)
        z = z.permute(0, 3, 1, 2)                                   # B N nx0 ny0
        f = self.px @ z @ self.py                                   # B N nx ny
        return f.reshape(f.shape[0], f.shape[1], -1).transpose(1, 2)


def project_ste(beams: torch.Tensor, b_phase: int, enabled: bool = True) -> torch.Tensor:
    """Unit-normalise columns, then constant-modulus + phase quantisation.

    The projection is applied in the forward pass only; the backward pass
    treats it as the identity (straight-through). With ``enabled=False``
    only the exact column normalisation is applied.
    """
    n = beams.shape[-2]
    norm = torch.sqrt(torch.sum(beams.real ** 2 + beams.imag ** 2, dim=-2, keepdim=True) + 1e-30)
    unit = beams / norm
    if not enabled:
        return unit
    with torch.no_grad():
        levels = 2 ** b_phase
        x = torch.remainder(torch.angle(unit), 2 * math.pi) * levels / (2 * math.pi)
        q = torch.remainder(torch.ceil(x - 0.5), levels)
        ph = 2 * math.pi * q / levels
        proj = torch.polar(torch.full_like(ph, 1 / math.sqrt(n)), ph).to(unit.dtype)
    return unit + (proj - unit).detach()


def beam_power(gram: torch.Tensor, beams: torch.Tensor) -> torch.Tensor:
    """Noiseless RSRP ``||G_u f||^2``: ``gram`` is ``B x U x P x N_T``, beams ``B x N_T x L``."""
    y = gram @ beams.unsqueeze(1)                                   # B U P L
    return torch.sum(y.real ** 2 + y.imag ** 2, dim=-2)             # B U L


def soft_best(power: torch.Tensor, tau: float | None) -> torch.Tensor:
    """Best-beam power; softmax over dB powers at temperature ``tau`` (hard max if None)."""
    if tau is None:
        return power.max(dim=-1).values
    db = 10 * torch.log10(power.clamp_min(POWER_FLOOR))
    w = torch.softmax(db / tau, dim=-1)
    return torch.sum(w * power, dim=-1)


def _masked_mean(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return x.mean()
    m = mask.to(x.dtype)
    return (x * m).sum() / m.sum().clamp_min(1)


def loss_supervised(svd_ref, p, mask=None, squared: bool = True):
    """Mean gap ``10 log10(S^2) - 10 log10(p^2)`` between SVD and achieved power.

    With ``squared=False`` the plain ``10 log10(S) - 10 log10(p)`` gap is
    used (half the value). Accepts numpy or torch inputs.
    """
    as_np = not isinstance(p, torch.Tensor)
    s = torch.as_tensor(svd_ref, dtype=torch.float64) if as_np else svd_ref
    p = torch.as_tensor(p, dtype=torch.float64) if as_np else p
    k = 20.0 if squared else 10.0
    gap = k * (torch.log10(s.clamp_min(POWER_FLOOR)) - torch.log10(p.clamp_min(POWER_FLOOR)))
    out = _masked_mean(gap, None if mask is None else torch.as_tensor(mask))
    return float(out) if as_np else out


def loss_finetune(p, mask=None):
    """Unsupervised loss ``-mean(10 log10(p^2))``; lower when received power grows."""
    as_np = not isinstance(p, torch.Tensor)
    p = torch.as_tensor(p, dtype=torch.float64) if as_np else p
    val = -20.0 * torch.log10(p.clamp_min(POWER_FLOOR))
    out = _masked_mean(val, None if mask is None else torch.as_tensor(mask))
    return float(out) if as_np else out


# --------------------------------------------------------------------------
# model bundle
# --------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """One minibatch of training episodes.

    ``planes``: ``B x 4L x n_x0 x n_y0`` network input; ``gram``: per-user
    factors ``B x U x P x N_T`` with ``||G f||^2`` the RSRP of beam ``f``;
    ``svd``: ``B x U`` reference powers; ``mask``: valid users.
    """

    planes: np.ndarray
    gram: np.ndarray
    svd: np.ndarray
    mask: np.ndarray
    nx: int
    ny: int


class Xbm:
    """Network, Adam optimiser with a triangular cyclic learning rate, and step counter."""

    def __init__(self, cfg: ScenarioConfig, train: TrainConfig | None = None, seed: int = 0,
                 widths=(128, 96, 320)):
        self.cfg = cfg
        self.train_cfg = train or TrainConfig()
        self.shape = XbmShape.from_config(cfg)
        self.widths = tuple(widths)
        torch.manual_seed(seed)
        self.net = XbmNet(self.shape, self.widths)
        self.step = 0
        self._make_optimizer()
        self._mappers: dict = {}

    def _make_optimizer(self, lr_min=None, lr_max=None):
        tc = self.train_cfg
        lo = tc.lr_min if lr_min is None else lr_min
        hi = tc.lr_max if lr_max is None else lr_max
        self.opt = torch.optim.Adam(self.net.parameters(), lr=lo, foreach=True)
        self.sched = torch.optim.lr_scheduler.CyclicLR(
            self.opt, base_lr=lo, max_lr=hi, step_size_up=max(1, tc.cycle_steps // 2),
            mode="triangular", cycle_momentum=False)

    def set_learning_rate(self, lr_min: float, lr_max: float):
        self._make_optimizer(lr_min, lr_max)

    def mapper(self, nx: int, ny: int) -> BeamMapper:
        key = (nx, ny, next(self.net.parameters()).dtype)
        if key not in self._mappers:
            dt = torch.complex128 if key[2] == torch.float64 else torch.complex64
            self._mappers[key] = BeamMapper(nx, ny, self.shape.n_x0, self.shape.n_y0, dt)
        return self._mappers[key]

    @property
    def lr(self) -> float:
        return float(self.opt.param_groups[0]["lr"])

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    # inference -----------------------------------------------------------
    def forward(self, planes, train: bool = False):
        x = torch.as_tensor(np.asarray(planes), dtype=next(self.net.parameters()).dtype)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        self.net.train(train)
        return self.net(x)

    @torch.no_grad()
    def codebooks(self, obs: BeamspaceObservation | np.ndarray, nx: int, ny: int,
                  b_phase: int) -> tuple[Codebook, Codebook]:
        """Eval-mode forward and projection to constrained SSB and pool codebooks."""
        planes = obs.planes() if isinstance(obs, BeamspaceObservation) else obs
        ssb_g, pool_g = self.forward(planes, train=False)
        m = self.mapper(nx, ny)
        out = []
        for g, kind in ((ssb_g, CodebookKind.SSB), (pool_g, CodebookKind.CSIRS_POOL)):
            f = m.beams(g)[0].to(torch.complex128).numpy()
            out.append(Codebook(constrain_beams(f, b_phase), kind, True, b_phase))
        return out[0], out[1]


def generate_codebooks(obs: BeamspaceObservation, model: Xbm, cfg: ScenarioConfig,
                       feedback_fn=None):
    """Produce the next SSB codebook and the CSI-RS pool.

    When ``feedback_fn`` is given it is called with the new SSB codebook
    and must return the users' reported beam indices; the active CSI-RS
    subset is then chosen from the pool and returned instead of the pool.
    """
    ssb, pool = model.codebooks(obs, cfg.nx_phys, cfg.ny_phys, cfg.b_phase)
    if feedback_fn is None:
        return ssb, pool
    m = feedback_fn(ssb)
    return ssb, proportional_select(m, ssb, pool, cfg.N_CSI)


# --------------------------------------------------------------------------
# training step
# --------------------------------------------------------------------------

def _select_active(ssb_beams: torch.Tensor, pool_beams: torch.Tensor, power: torch.Tensor,
                   mask: torch.Tensor, n_csi: int) -> np.ndarray:
    """Indices ``B x n_csi`` of the pool beams chosen by proportional selection.

    Selection runs on detached values; gradients later flow only through
    the chosen beams.
    """
    corr = torch.abs(ssb_beams.conj().transpose(1, 2) @ pool_beams).detach().cpu().numpy()
    m_all = power.detach().argmax(dim=-1).cpu().numpy()
    mk = mask.cpu().numpy()
    return np.stack([select_by_correlation(m_all[b][mk[b]], corr[b], n_csi)
                     for b in range(corr.shape[0])])


def episode_losses(model: Xbm, batch: TrainBatch, tau: float | None, train: bool = True,
                   project: bool = True, squared: bool | None = None,
                   finetune: bool = False):
    """Forward pass and losses for a batch; returns ``(total, ssb_loss, csi_loss, extras)``."""
    cfg = model.cfg
    squared = model.train_cfg.squared_loss if squared is None else squared
    dtype = next(model.net.parameters()).dtype
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    ssb_g, pool_g = model.forward(batch.planes, train=train)
    mapper = model.mapper(batch.nx, batch.ny)
    ssb_b = project_ste(mapper.beams(ssb_g), cfg.b_phase, project)
    pool_b = project_ste(mapper.beams(pool_g), cfg.b_phase, project)
    gram = torch.as_tensor(batch.gram, dtype=cdtype)
    svd = torch.as_tensor(batch.svd, dtype=dtype)
    mask = torch.as_tensor(batch.mask)
    p_ssb_all = beam_power(gram, ssb_b)                              # B U L
    p_ssb = soft_best(p_ssb_all, tau)
    idx = _select_active(ssb_b, pool_b, p_ssb_all, mask, cfg.N_CSI)
    sel = torch.gather(pool_b, 2, torch.as_tensor(idx).unsqueeze(1).expand(-1, pool_b.shape[1], -1))
    p_csi = soft_best(beam_power(gram, sel), tau)
    if finetune:
        l_ssb = loss_finetune(p_ssb, mask)
        l_csi = loss_finetune(p_csi, mask)
    else:
        l_ssb = loss_supervised(svd, p_ssb, mask, squared)
        l_csi = loss_supervised(svd, p_csi, mask, squared)
    total = l_ssb + model.train_cfg.csi_loss_weight * l_csi
    return total, l_ssb, l_csi, {"ssb_beams": ssb_b, "p_ssb": p_ssb, "p_csi": p_csi}


@dataclass
class StepDiagnostics:
    loss: float
    ssb_loss: float
    csi_loss: float
    grad_norm: float
    lr: float
    rejected: bool = False


def train_step(model: Xbm, batch: TrainBatch, tau: float = 0.05,
               finetune: bool = False) -> StepDiagnostics:
    """One Adam update on ``batch``; non-finite gradients reject the step."""
    model.opt.zero_grad(set_to_none=True)
    total, l_ssb, l_csi, _ = episode_losses(model, batch, tau, train=True, finetune=finetune)
    total.backward()
    grads = [p.grad for p in model.net.parameters() if p.grad is not None]
    gnorm = float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads)))) if grads else 0.0
    lr = model.lr
    if not math.isfinite(gnorm) or not math.isfinite(float(total.detach())):
        model.opt.zero_grad(set_to_none=True)
        logger.warning("rejected step %d: non-finite gradient", model.step)
        return StepDiagnostics(float(total.detach()), float(l_ssb.detach()), float(l_csi.detach()), gnorm, lr, True)
    model.opt.step()
    model.sched.step()
    model.step += 1
    return StepDiagnostics(float(total.detach()), float(l_ssb.detach()), float(l_csi.detach()), gnorm, lr)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"XBMK"


def _checkpoint_items(model: Xbm):
    """Named arrays of a checkpoint: parameters, Adam moments, step and schedule position.

    Tensors are handed out as float32 views; the container writer widens
    them to doubles chunk by chunk.
    """
    for name, t in model.net.state_dict().items():
        yield f"param.{name}", t.detach().cpu().numpy()
    names = {p: n for n, p in model.net.named_parameters()}
    for p, st in model.opt.state.items():
        for key in ("exp_avg", "exp_avg_sq"):
            if key in st:
                yield f"adam.{key}.{names[p]}", st[key].detach().cpu().numpy()
        if "step" in st:
            yield f"adam.step.{names[p]}", np.array([float(st["step"])])
    yield "meta.step", np.array([model.step], np.int64)
    yield "meta.sched_epoch", np.array([model.sched.last_epoch], np.int64)


def _checkpoint_header(model: Xbm, meta: dict | None):
    from .config import to_dict

    info = {"config": to_dict(model.cfg, model.train_cfg), "widths": list(model.widths)}
    info.update(meta or {})
    return model.shape.as_tuple(), info


def checkpoint_bytes(model: Xbm, meta: dict | None = None) -> bytes:
    """Serialise parameters, Adam moments, step counter and schedule position."""
    from . import io

    fp, info = _checkpoint_header(model, meta)
    return io.pack_arrays(CHECKPOINT_MAGIC, fp, info, _checkpoint_items(model))


def save_checkpoint(path, model: Xbm, meta: dict | None = None) -> None:
    """Stream a checkpoint to disk; the bytes equal :func:`checkpoint_bytes`."""
    from . import io

    fp, info = _checkpoint_header(model, meta)
    io.save_arrays(path, CHECKPOINT_MAGIC, fp, info, _checkpoint_items(model))


def load_checkpoint(path, expected: XbmShape | tuple | None = None,
                    cfg: ScenarioConfig | None = None) -> Xbm:
    """Rebuild a model from a checkpoint file.

    ``expected`` (a shape or fingerprint tuple) makes the load refuse
    files produced for a different network shape. ``cfg`` replaces the
    stored scenario, which is how a model trained on one array is run on
    another with the same beamspace grid. Arrays are read one at a time.
    """
    from . import io

    with open(path, "rb") as fh:
        return _model_from_container(*io.read_arrays(fh, CHECKPOINT_MAGIC), expected, cfg)


def checkpoint_from_bytes(data: bytes, expected: XbmShape | tuple | None = None,
                          cfg: ScenarioConfig | None = None) -> Xbm:
    """In-memory counterpart of :func:`load_checkpoint`."""
    import io as stdio

    from . import io

    return _model_from_container(*io.read_arrays(stdio.BytesIO(data), CHECKPOINT_MAGIC),
                                 expected, cfg)


def _model_from_container(fp, meta, items, expected, cfg) -> Xbm:
    from . import io
    from .config import ScenarioConfig as SC, TrainConfig as TC

    if isinstance(expected, XbmShape):
        expected = expected.as_tuple()
    io.check_fingerprint(fp, expected)
    stored = meta["config"]
    sc = dict(stored["ScenarioConfig"])
    sc["ssb_slots"] = tuple(sc["ssb_slots"])
    base_cfg = SC(**sc)
    tc = TC(**stored["TrainConfig"])
    run_cfg = base_cfg if cfg is None else cfg
    model = Xbm(run_cfg, tc, widths=tuple(meta.get("widths", (128, 96, 320))))
    if model.shape.as_tuple() != tuple(fp):
        raise FingerprintMismatch(f"config shape {model.shape.as_tuple()} != checkpoint {fp}")
    state = model.net.state_dict()
    params = dict(model.net.named_parameters())
    loaded, adam, arrays = set(), {}, {}
    for key, arr in items:
        kind, _, name = key.partition(".")
        if kind == "param":
            if name not in state:
                raise FormatError(f"unexpected tensor {name!r} in checkpoint")
            t = state[name]
            with torch.no_grad():
                t.copy_(torch.from_numpy(arr).reshape(t.shape))
            loaded.add(name)
        elif kind == "adam":
            moment, _, pname = name.partition(".")
            p = params[pname]
            if moment == "step":
                val = torch.tensor(float(arr[0]))
            else:
                val = torch.from_numpy(arr).to(p.dtype).reshape(p.shape)
            adam.setdefault(pname, {})[moment] = val
        else:
            arrays[key] = arr
    missing = set(state) - loaded
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
    model._make_optimizer()
    for pname, st in adam.items():
        model.opt.state[params[pname]] = st
    model.step = int(arrays["meta.step"][0])
    model.sched.last_epoch = int(arrays["meta.sched_epoch"][0])
    model.sched._get_lr_called_within_step = True
    for group, lr in zip(model.opt.param_groups, model.sched.get_lr()):
        group["lr"] = lr
    model.sched._get_lr_called_within_step = False
    model.meta = meta
    return model
