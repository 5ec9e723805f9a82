import numpy as np
import pytest
import torch
import torch.nn.functional as F

from repil.dataio import ActionSpace
from repil.models import (
    ActionFusion, Encoder, ImageDecoder, InverseActionHead, MomentumEncoder, ProjectionHead,
    ProjectionHeadConfig, encode, fuse_action, load_checkpoint, load_encoder, momentum_update,
    obs_to_tensor, predict_inverse_action, project, read_checkpoint_manifest, reconstruct_image,
    sample_latent, save_checkpoint, save_encoder)

from conftest import autograd_grad, central_difference, rel_err

OBS = (48, 48, 9)


def test_encode_shape_and_determinism():
    torch.manual_seed(0)
    enc = Encoder(OBS)
    x = torch.rand(5, 9, 48, 48)
    x[3] = x[1]
    z = encode(enc, x)
    assert z.shape == (5, 128)
    assert torch.isfinite(z).all()
    assert torch.equal(z[3], z[1])
    assert torch.equal(z, encode(enc, x))


def test_zero_final_layer_gives_zero_z():
    enc = Encoder(OBS)
    with torch.no_grad():
        enc.head.weight.zero_()
        enc.head.bias.zero_()
    assert torch.equal(enc(torch.rand(3, 9, 48, 48)), torch.zeros(3, 128))


def test_encoder_rejects_wrong_shape():
    with pytest.raises(ValueError):
        Encoder(OBS)(torch.rand(2, 3, 48, 48))


def test_gaussian_encoder_clamps_logvar():
    enc = Encoder((8, 8, 3), repr_dim=16, gaussian=True)
    with torch.no_grad():
        enc.logvar_head.bias[:] = 100.0
    mean, logvar = enc(torch.rand(2, 3, 8, 8))
    assert mean.shape == logvar.shape == (2, 16)
    assert torch.all(logvar == 2.0)


def test_obs_to_tensor_layout():
    obs = np.zeros((2, 4, 5, 3), np.uint8)
    obs[1, 2, 3, 1] = 255
    t = obs_to_tensor(obs)
    assert t.shape == (2, 3, 4, 5) and t[1, 1, 2, 3] == 1.0


def test_sample_latent_zero_noise():
    mean = torch.randn(4, 3)
    z = sample_latent(mean, torch.full((4, 3), -float("inf")))
    assert torch.equal(z, mean)


def test_sample_latent_moments_and_seed():
    g = torch.Generator().manual_seed(0)
    z = sample_latent(torch.zeros(100_000, 4, dtype=torch.float64),
                      torch.zeros(100_000, 4, dtype=torch.float64), g)
    assert z.mean(0).abs().max() < 0.02
    assert (z.var(0) - 1).abs().max() < 0.02
    a = sample_latent(torch.zeros(3, 2), torch.zeros(3, 2), torch.Generator().manual_seed(7))
    b = sample_latent(torch.zeros(3, 2), torch.zeros(3, 2), torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


def test_sample_latent_reparameterised():
    mean = torch.zeros(2, 3, requires_grad=True)
    logvar = torch.zeros(2, 3, requires_grad=True)
    sample_latent(mean, logvar, torch.Generator().manual_seed(0)).sum().backward()
    assert mean.grad is not None and logvar.grad is not None
    assert torch.all(mean.grad == 1)


def _scalar_momentum(alpha, t0, c0):
    enc = torch.nn.Linear(1, 1, bias=False).double()
    state = MomentumEncoder(enc, alpha)
    with torch.no_grad():
        state.target.weight.fill_(t0)
        state.context.weight.fill_(c0)
    return state


def test_momentum_single_step():
    state = momentum_update(_scalar_momentum(0.999, 1.0, 0.0))
    assert state.target.weight.item() == pytest.approx(0.999, abs=1e-15)
    assert state.context.weight.item() == 0.0


def test_momentum_alpha_zero_copies():
    state = momentum_update(_scalar_momentum(0.0, 3.0, -2.0))
    assert state.target.weight.item() == -2.0


def test_momentum_closed_form():
    alpha, n = 0.999, 250
    state = _scalar_momentum(alpha, 1.5, -0.25)
    for _ in range(n):
        momentum_update(state)
    closed = alpha ** n * 1.5 + (1 - alpha ** n) * -0.25
    assert abs(state.target.weight.item() - closed) < 1e-10


def test_momentum_stop_gradient():
    torch.manual_seed(0)
    state = MomentumEncoder(Encoder((8, 8, 3), repr_dim=8))
    before = {k: v.clone() for k, v in state.target.state_dict().items()}
    opt = torch.optim.Adam([p for p in state.parameters() if p.requires_grad], lr=0.1)
    x = torch.rand(4, 3, 8, 8)
    loss = (state(x) * state.encode_target(x)).sum() + state.target(x).sum()
    opt.zero_grad()
    loss.backward()
    opt.step()
    for k, v in state.target.state_dict().items():
        assert torch.equal(v, before[k])
    assert all(p.grad is None for p in state.target.parameters())


def test_projection_modes():
    z = torch.randn(4, 128)
    assert torch.equal(project(ProjectionHead(ProjectionHeadConfig("none")), z, "target"), z)
    sym = ProjectionHead(ProjectionHeadConfig("symmetric", 32, 16))
    assert torch.equal(sym(z, "context"), sym(z, "target"))
    torch.manual_seed(1)
    asym = ProjectionHead(ProjectionHeadConfig("asymmetric", 32, 16))
    ctx, tgt = asym(z, "context"), asym(z, "target")
    assert ctx.shape == (4, 16)
    assert not torch.allclose(ctx, tgt)
    # direct evaluation of the two MLPs
    assert torch.allclose(ctx, asym.heads["context"](z))
    with pytest.raises(ValueError):
        sym(z, "sideways")


def test_reconstruct_shape_and_constant_bias():
    dec = ImageDecoder(OBS)
    img = reconstruct_image(dec, torch.randn(3, 128))
    assert img.shape == (3, 9, 48, 48) and torch.isfinite(img).all()
    with torch.no_grad():
        dec.out.weight.zero_()
        dec.out.bias.copy_(torch.arange(9.0))
    img = dec(torch.randn(2, 128))
    assert torch.equal(img, torch.arange(9.0).view(1, 9, 1, 1).expand(2, 9, 48, 48))
    with pytest.raises(TypeError):
        reconstruct_image(ProjectionHead(ProjectionHeadConfig()), torch.randn(1, 128))


def test_reconstruction_mse_gradient_matches_fd():
    torch.manual_seed(0)
    dec = ImageDecoder((8, 8, 3), in_dim=6).double()
    target = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    z = torch.randn(2, 6, dtype=torch.float64)
    f = lambda zz: F.mse_loss(dec(zz), target)
    assert rel_err(autograd_grad(f, z), central_difference(f, z)) < 1e-4


def test_fuse_action():
    torch.manual_seed(0)
    space = ActionSpace("discrete", 5)
    fusion = ActionFusion(space)
    z = torch.randn(1, 128).repeat(2, 1)
    out = fuse_action(fusion, z, torch.tensor([0, 3]))
    assert out.shape == (2, 128)
    assert not torch.allclose(out[0], out[1])
    # one-hot concatenation contract, evaluated directly
    manual = fusion.fuse(torch.cat([z, F.one_hot(torch.tensor([0, 3]), 5).float()], 1))
    assert torch.allclose(out, manual)
    assert ImageDecoder(OBS)(out).shape == (2, 9, 48, 48)
    with pytest.raises(ValueError):
        fusion(z, torch.tensor([0, 7]))
    with pytest.raises(ValueError):
        fusion(z, torch.tensor([0, 1, 2]))


def test_inverse_head():
    torch.manual_seed(0)
    head = InverseActionHead(ActionSpace("discrete", 5))
    a, b = torch.randn(4, 128), torch.randn(4, 128)
    logits = predict_inverse_action(head, a, b)
    assert logits.shape == (4, 5) and torch.isfinite(logits).all()
    assert not torch.allclose(logits, head(b, a))
    cont = InverseActionHead(ActionSpace("continuous", 2))
    mean, log_std = cont(a, b)
    assert mean.shape == log_std.shape == (4, 2)
    with pytest.raises(TypeError):
        predict_inverse_action(ImageDecoder(OBS), a, b)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    enc = Encoder((8, 8, 3), repr_dim=16)
    dec = ImageDecoder((8, 8, 3), in_dim=16)
    save_checkpoint(tmp_path / "x.ckpt", {"encoder": enc, "decoder": dec}, {"note": "hi"})
    manifest, groups = load_checkpoint(tmp_path / "x.ckpt")
    assert set(manifest["groups"]) == {"encoder", "decoder"}
    assert manifest["meta"] == {"note": "hi"}
    for k, v in enc.state_dict().items():
        assert torch.equal(groups["encoder"][k], v)
    save_encoder(tmp_path / "enc.ckpt", enc)
    assert set(read_checkpoint_manifest(tmp_path / "enc.ckpt")["groups"]) == {"encoder"}
    back = load_encoder(tmp_path / "enc.ckpt")
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(back(x), enc(x))


def test_gaussian_mean_path_matches_deterministic_init():
    torch.manual_seed(3)
    det = Encoder((8, 8, 3), repr_dim=16)
    torch.manual_seed(3)
    gauss = Encoder((8, 8, 3), repr_dim=16, gaussian=True)
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(gauss(x)[0], det(x))
    assert torch.equal(gauss.deterministic()(x), det(x))
