import math
import time

import numpy as np
import pytest
import torch

from oracles import finite_difference_check
from xbeam.beamspace import assemble_observation, from_beamspace, to_beamspace
from xbeam.codebooks import Codebook, CodebookKind, constrain_beams, constrained_dft
from xbeam.config import ScenarioConfig, TrainConfig
from xbeam.errors import ConfigError, FingerprintMismatch, FormatError
from xbeam.network import (TrainBatch, Xbm, XbmShape, checkpoint_bytes, episode_losses,
                           load_checkpoint, loss_finetune, loss_supervised, project_ste,
                           save_checkpoint, train_step)
from xbeam.scenario import planar_response_psi

TINY_WIDTHS = (4, 3, 5)


def tiny_cfg(**kw) -> ScenarioConfig:
    base = dict(nx_phys=4, ny_phys=4, nx_dig=2, ny_dig=2, n_rx=1, K=4, T=2, L_max=2,
                N_CSI=2, N_CSI_pool=2, B_g=2, S_B=2, L_csi=1, U_min=1, U_max=1, n_x0=4,
                n_y0=4, user_pool=10)
    base.update(kw)
    return ScenarioConfig(**base)


def single_user_batch(cfg, gram, seed=0):
    rng = np.random.default_rng(seed)
    prior = Codebook(constrain_beams(rng.standard_normal((cfg.n_tx, cfg.L_max))
                                     + 1j * rng.standard_normal((cfg.n_tx, cfg.L_max)), 2),
                     CodebookKind.SSB, True, 2)
    obs = assemble_observation(prior, [0], [1.0], cfg.nx_phys, cfg.ny_phys, cfg.n_x0, cfg.n_y0,
                               cfg.noise_var)
    svd = np.linalg.eigvalsh(gram @ gram.conj().T)[-1]
    return TrainBatch(obs.planes()[None], gram[None, None], np.array([[svd]]),
                      np.ones((1, 1), bool), cfg.nx_phys, cfg.ny_phys)


def random_gram(cfg, seed=0, rows=2):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, cfg.n_tx)) + 1j * rng.standard_normal((rows, cfg.n_tx))


# --------------------------------------------------------------------------
# architecture
# --------------------------------------------------------------------------

def test_head_output_shape_full_grid():
    cfg = ScenarioConfig(n_x0=16, n_y0=16, L_max=16, N_CSI=16, N_CSI_pool=64)
    model = Xbm(cfg, widths=(8, 8, 8))
    ssb, pool = model.forward(np.zeros((1, cfg.input_planes, 16, 16), np.float32))
    assert ssb.shape == (1, 16, 16, 32)
    assert pool.shape == (1, 16, 16, 128)


def test_default_widths_and_shape_check():
    model = Xbm(tiny_cfg())
    assert model.net.ssb.conv1.out_channels == 128
    assert model.net.ssb.conv2.out_channels == 96
    assert model.net.ssb.conv3.out_channels == 320
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 3, 4, 4), np.float32))


def test_eval_is_deterministic():
    cfg = tiny_cfg()
    model = Xbm(cfg, widths=TINY_WIDTHS)
    x = np.random.default_rng(0).standard_normal((2, cfg.input_planes, 4, 4)).astype(np.float32)
    a = model.forward(x, train=False)
    b = model.forward(x, train=False)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_zero_input_zero_biases_gives_dense_bias():
    cfg = tiny_cfg()
    model = Xbm(cfg, widths=TINY_WIDTHS)
    for name, p in model.net.named_parameters():
        if name.endswith("bias") and "dense" not in name:
            torch.nn.init.zeros_(p)
    ssb, _ = model.forward(np.zeros((1, cfg.input_planes, 4, 4), np.float32))
    assert torch.allclose(ssb.reshape(-1), model.net.ssb.dense.bias.detach())


def test_layer_shapes_ignore_array_size():
    a = Xbm(tiny_cfg(nx_phys=4, ny_phys=4), widths=TINY_WIDTHS)
    b = Xbm(tiny_cfg(nx_phys=8, ny_phys=8, nx_dig=4, ny_dig=4, n_x0=8, n_y0=8),
            widths=TINY_WIDTHS)
    c = Xbm(tiny_cfg(nx_phys=2, ny_phys=4, nx_dig=2, ny_dig=2), widths=TINY_WIDTHS)
    assert a.shape == c.shape
    assert [p.shape for p in a.net.parameters()] == [p.shape for p in c.net.parameters()]
    assert a.shape != b.shape


def test_same_model_runs_on_two_array_sizes():
    cfg8 = ScenarioConfig(nx_phys=8, ny_phys=8, n_x0=16, n_y0=16, L_max=4, N_CSI=4,
                          N_CSI_pool=8)
    model = Xbm(cfg8, widths=TINY_WIDTHS)
    prior = constrained_dft(8, 8, 2, 2, 2)
    obs = assemble_observation(prior, [0, 1], [1.0, 2.0], 8, 8, 16, 16, 1e-3)
    for n in (8, 16):
        ssb, pool = model.codebooks(obs, n, n, 2)
        assert ssb.beams.shape == (n * n, 4) and pool.beams.shape == (n * n, 8)
        ssb.check_constraints(2)
        pool.check_constraints(2)


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def test_projection_fixed_point(rng):
    cb = Codebook(constrain_beams(rng.standard_normal((16, 3)) + 1j * rng.standard_normal((16, 3)),
                                  2), CodebookKind.SSB, True, 2)
    beams = torch.as_tensor(from_beamspace(to_beamspace(cb, 4, 4, 8, 8), 4, 4))[None]
    out = project_ste(beams, 2)[0].numpy()
    assert np.allclose(out, cb.beams, atol=1e-12)


def test_projection_phase_oracle(rng):
    grid = rng.standard_normal((4, 4, 3)) + 1j * rng.standard_normal((4, 4, 3))
    raw = from_beamspace(grid, 4, 4)
    out = project_ste(torch.as_tensor(raw)[None], 3)[0].numpy()
    for i in range(raw.shape[0]):
        for j in range(raw.shape[1]):
            ang = math.atan2(raw[i, j].imag, raw[i, j].real) % (2 * math.pi)
            level = math.ceil(ang * 8 / (2 * math.pi) - 0.5) % 8
            want = complex(math.cos(2 * math.pi * level / 8), math.sin(2 * math.pi * level / 8)) / 4
            assert abs(out[i, j] - want) < 1e-12


def test_projection_is_straight_through():
    x = torch.randn(1, 16, 2, dtype=torch.complex128, requires_grad=True)
    y = project_ste(x, 2)
    w = torch.randn(1, 16, 2, dtype=torch.complex128)
    torch.sum((w.conj() * y).real).backward()
    norm = torch.linalg.vector_norm(x.detach(), dim=-2, keepdim=True)
    # gradient equals that of the exact column normalisation alone
    x2 = x.detach().clone().requires_grad_(True)
    torch.sum((w.conj() * (x2 / torch.linalg.vector_norm(x2, dim=-2, keepdim=True))).real).backward()
    assert torch.allclose(x.grad, x2.grad)
    assert torch.all(norm > 0)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def test_supervised_loss_examples():
    assert loss_supervised([3.0, 5.0], [3.0, 5.0]) == 0.0
    s = np.array([1.0, 8.0, 0.3])
    assert loss_supervised(s, s / 10 ** 0.3) == pytest.approx(6.0, abs=1e-9)
    assert loss_supervised([4.0], [1.0]) == pytest.approx(10 * math.log10(16) - 10 * math.log10(1))
    assert loss_supervised([4.0], [1.0], squared=False) == pytest.approx(10 * math.log10(4))


def test_finetune_loss_examples():
    assert loss_finetune([1.0, 1.0, 1.0]) == 0.0
    p = np.array([2.0, 4.0])
    assert loss_finetune(p) == pytest.approx(-(10 * math.log10(4) + 10 * math.log10(16)) / 2)
    assert loss_finetune(2 * p) < loss_finetune(p)


def test_losses_floor_nonpositive_powers():
    assert math.isfinite(loss_supervised([1.0], [0.0]))
    assert math.isfinite(loss_finetune([-1.0]))


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

def fd_check(finetune: bool, squared: bool = True):
    cfg = tiny_cfg()
    model = Xbm(cfg, TrainConfig(squared_loss=squared), seed=3, widths=TINY_WIDTHS)
    model.net.double()
    batch = single_user_batch(cfg, random_gram(cfg))

    def loss():
        return episode_losses(model, batch, tau=0.5, train=False, project=False,
                              finetune=finetune)[0]

    return finite_difference_check(model.net, loss)[0]


@pytest.mark.parametrize("finetune", [False, True])
def test_finite_difference_gradients(finetune):
    assert fd_check(finetune) < 1e-4


def test_optimisation_smoke():
    cfg = tiny_cfg()
    ok = 0
    for seed in range(10):
        model = Xbm(cfg, TrainConfig(lr_min=1e-4, lr_max=1e-3), seed=seed, widths=(8, 8, 8))
        batch = single_user_batch(cfg, random_gram(cfg, seed), seed)
        before = episode_losses(model, batch, 0.1, train=False)[0].item()
        for _ in range(50):
            train_step(model, batch, 0.1)
        after = episode_losses(model, batch, 0.1, train=False)[0].item()
        ok += after <= before
    assert ok >= 9


def test_zero_learning_rate_leaves_parameters():
    cfg = tiny_cfg()
    model = Xbm(cfg, widths=TINY_WIDTHS)
    model.set_learning_rate(0.0, 0.0)
    before = [p.detach().clone() for p in model.net.parameters()]
    train_step(model, single_user_batch(cfg, random_gram(cfg)), 0.5)
    assert all(torch.equal(a, b) for a, b in zip(before, model.net.parameters()))


def test_nonfinite_gradient_rejected():
    cfg = tiny_cfg()
    model = Xbm(cfg, widths=TINY_WIDTHS)
    batch = single_user_batch(cfg, random_gram(cfg))
    batch.planes[:] = np.nan
    before = [p.detach().clone() for p in model.net.parameters()]
    d = train_step(model, batch, 0.5)
    assert d.rejected and model.step == 0
    assert all(torch.equal(a, b) for a, b in zip(before, model.net.parameters()))


def test_overfit_single_aligned_path():
    cfg = tiny_cfg()
    # rank-1 channel towards a grid angle
    a = planar_response_psi(2 * np.pi / 4, 2 * np.pi * 2 / 4, 4, 4)
    gram = np.sqrt(cfg.n_tx) * a.conj()[None, :]
    batch = single_user_batch(cfg, gram)
    model = Xbm(cfg, TrainConfig(lr_min=1e-4, lr_max=2e-3, cycle_steps=400), seed=0,
                widths=(16, 16, 16))
    for i in range(300):
        train_step(model, batch, max(0.05, 0.5 * 0.98 ** i))
    ssb, _ = model.codebooks(batch.planes[0], 4, 4, cfg.b_phase)
    p = np.max(np.abs(gram @ ssb.beams) ** 2)
    assert 10 * np.log10(batch.svd[0, 0] / p) < 1.0


# --------------------------------------------------------------------------
# inference budget and checkpoints
# --------------------------------------------------------------------------

def test_inference_time_budget():
    cfg = ScenarioConfig()
    model = Xbm(cfg)
    obs = assemble_observation(constrained_dft(8, 8, 4, 4, 2), [0, 3], [1.0, 1.0], 8, 8, 8, 8,
                               cfg.noise_var)
    model.codebooks(obs, 8, 8, 2)
    times = []
    for _ in range(15):
        t = time.perf_counter()
        model.codebooks(obs, 8, 8, 2)
        times.append(time.perf_counter() - t)
    assert np.median(times) < 0.02


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    model = Xbm(cfg, widths=TINY_WIDTHS)
    batch = single_user_batch(cfg, random_gram(cfg))
    for _ in range(3):
        train_step(model, batch, 0.5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    # the streamed file and the in-memory container are the same bytes
    assert path.read_bytes() == checkpoint_bytes(model)
    back = load_checkpoint(path, XbmShape.from_config(cfg))
    assert back.step == 3 and back.lr == model.lr
    for a, b in zip(model.net.state_dict().values(), back.net.state_dict().values()):
        assert torch.equal(a, b)
    assert checkpoint_bytes(back) == checkpoint_bytes(model)
    # training continues identically (dropout masks drawn from the same seed)
    torch.manual_seed(11)
    train_step(model, batch, 0.5)
    torch.manual_seed(11)
    train_step(back, batch, 0.5)
    for a, b in zip(model.net.parameters(), back.net.parameters()):
        assert torch.equal(a, b)


def test_checkpoint_fingerprint(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Xbm(cfg, widths=TINY_WIDTHS))
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(path, XbmShape.from_config(tiny_cfg(L_max=4, N_CSI=4, N_CSI_pool=4)))
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(path, cfg=tiny_cfg(n_x0=8, n_y0=8))
    # a different array size with the same grid is accepted
    other = load_checkpoint(path, cfg=tiny_cfg(nx_phys=2, ny_phys=4, nx_dig=2, ny_dig=2))
    assert other.cfg.nx_phys == 2


def test_truncated_checkpoint_rejected(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Xbm(cfg, widths=TINY_WIDTHS))
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_zero_step_training_keeps_initialisation():
    cfg = tiny_cfg()
    a = Xbm(cfg, seed=7, widths=TINY_WIDTHS)
    b = Xbm(cfg, seed=7, widths=TINY_WIDTHS)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
