import math

import pytest
import torch

from pseudoseg.dgcc import DGCC
from pseudoseg.exceptions import ShapeError
from pseudoseg.nets import (LatentDiscriminator, NetConfig, PatchDiscriminator, ShapeVAE, UNetGenerator,
                            build_generator, build_latent_discriminator, build_patch_discriminator, build_vae,
                            load_checkpoint, reparameterize, save_checkpoint)


def test_patch_discriminator_geometry():
    d = PatchDiscriminator()
    assert d.receptive_field() == 70
    assert d.grid_size(256) == 30
    assert d(torch.zeros(1, 1, 256, 256)).shape == (1, 1, 30, 30)
    tiny = build_patch_discriminator(NetConfig(image_size=64, base_channels=16, disc_channels=16))
    assert tiny.grid_size(64) == 6 and tiny(torch.zeros(2, 1, 64, 64)).shape == (2, 1, 6, 6)
    out, emb = tiny(torch.zeros(1, 1, 64, 64), return_embedding=True)
    assert emb.shape[1] == tiny.embedding_channels == 128


@pytest.mark.parametrize("act,lo,hi", [("tanh", -1, 1), ("sigmoid", 0, 1)])
def test_generator_output_range_and_shape(act, lo, hi):
    g = UNetGenerator(base_channels=4, downsample_levels=3, residual_blocks=2, output_activation=act)
    y = g(torch.randn(3, 1, 32, 32) * 5)
    assert y.shape == (3, 1, 32, 32) and lo <= y.min() and y.max() <= hi


def test_generator_rejects_bad_inputs():
    g = UNetGenerator(base_channels=4, downsample_levels=3, residual_blocks=1)
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 1, 30, 30))
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 1, 32, 16))
    with pytest.raises(ValueError):
        UNetGenerator(output_activation="relu")


def test_full_decoder_channels():
    assert build_generator(NetConfig()).decoder_channels == (1024, 512, 256, 128)


def test_vae_shapes_and_reparameterization():
    vae = build_vae(NetConfig(image_size=64))
    m = torch.sign(torch.randn(4, 1, 64, 64))
    mean, logvar, z = vae.encode(m, eps=torch.zeros(4, 32))
    assert mean.shape == logvar.shape == z.shape == (4, 32)
    assert torch.equal(z, mean)
    recon = vae.decode(z)
    assert recon.shape == (4, 1, 64, 64) and recon.abs().max() <= 1
    eps = torch.randn(4, 32)
    assert torch.allclose(reparameterize(mean, logvar, eps), mean + torch.exp(0.5 * logvar) * eps)
    with pytest.raises(FloatingPointError):
        vae.decode(torch.full((1, 32), math.nan))


def test_latent_discriminator_scores():
    d = build_latent_discriminator(NetConfig())
    assert isinstance(d, LatentDiscriminator)
    assert d(torch.zeros(5, 32)).shape == (5,)
    assert sum(isinstance(m, torch.nn.Linear) for m in d.modules()) == 3


@pytest.mark.parametrize("module", [
    UNetGenerator(base_channels=4, downsample_levels=2, residual_blocks=1, output_activation="sigmoid"),
    PatchDiscriminator(base_channels=4, n_layers=2),
    ShapeVAE(resolution=16, latent_length=8, base_channels=4, max_channels=8),
    LatentDiscriminator(latent_length=8, hidden=6),
    DGCC(16, (8, 4), reduction=2, zero_init=False),
])
def test_checkpoint_round_trip(tmp_path, module):
    opt = torch.optim.Adam(module.parameters(), lr=1e-3)
    save_checkpoint(tmp_path / "m.pt", module, opt, epoch=7, extra={"note": "x"})
    loaded, payload = load_checkpoint(tmp_path / "m.pt")
    assert type(loaded) is type(module) and loaded.spec == module.spec
    assert payload["epoch"] == 7 and payload["extra"] == {"note": "x"} and payload["optimizer"] is not None
    for a, b in zip(module.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")
