import pytest
import torch
from torch.func import functional_call

from pseudoseg.dgcc import (DGCC, RecurrentTrace, calibrate_features, extract_feedback, recurrent_generate)
from pseudoseg.exceptions import ShapeError
from pseudoseg.nets import NetConfig, PatchDiscriminator, UNetGenerator, build_generator, build_patch_discriminator


def _tiny_trio(zero_init=True, dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    g = UNetGenerator(base_channels=4, downsample_levels=2, residual_blocks=1).to(dtype)
    d = PatchDiscriminator(base_channels=4, n_layers=2).to(dtype)
    dg = DGCC(d.embedding_channels, g.decoder_channels, reduction=2, zero_init=zero_init).to(dtype)
    return g, d, dg


def test_extract_feedback_is_global_average():
    e = torch.arange(2 * 3 * 4 * 5, dtype=torch.float64).reshape(2, 3, 4, 5)
    expected = torch.tensor([[e[b, c].sum().item() / 20 for c in range(3)] for b in range(2)], dtype=torch.float64)
    assert torch.allclose(extract_feedback(e), expected)


def test_calibrate_features_formula_and_shapes():
    u = torch.randn(2, 3, 4, 4)
    beta = torch.tensor([[0.5, -1.0, 0.0], [2.0, 0.0, 1.0]])
    out = calibrate_features(u, beta)
    for b in range(2):
        for c in range(3):
            assert torch.allclose(out[b, c], beta[b, c] * u[b, c] + u[b, c])
    assert torch.equal(calibrate_features(u, torch.zeros(3)), u)
    with pytest.raises(ShapeError):
        calibrate_features(u, torch.zeros(4))


def test_zero_beta_forward_bit_identical():
    g, _, _ = _tiny_trio()
    x = torch.randn(2, 1, 16, 16)
    betas = [torch.zeros(2, c) for c in g.decoder_channels]
    assert torch.equal(g(x), g(x, betas))


def test_zero_initialised_dgcc_emits_zero_vectors():
    g, d, dg = _tiny_trio()
    x = torch.randn(1, 1, 16, 16)
    betas = dg(d.embedding(g(x)))
    assert all(torch.count_nonzero(b) == 0 for b in betas)
    assert torch.equal(recurrent_generate(x, g, d, dg, turns=2), g(x))


def test_one_turn_is_plain_forward():
    g, d, dg = _tiny_trio(zero_init=False)
    x = torch.randn(2, 1, 16, 16)
    trace = RecurrentTrace()
    assert torch.equal(recurrent_generate(x, g, d, dg, turns=1, trace=trace), g(x))
    assert len(trace.masks) == 1 and trace.betas == []
    with pytest.raises(ValueError):
        recurrent_generate(x, g, d, dg, turns=0)


def test_later_turns_use_calibration():
    g, d, dg = _tiny_trio(zero_init=False)
    x = torch.randn(1, 1, 16, 16)
    trace = RecurrentTrace()
    out = recurrent_generate(x, g, d, dg, turns=3, trace=trace)
    assert len(trace.masks) == 3 and len(trace.betas) == 2
    assert torch.equal(out, trace.masks[-1])
    assert not torch.equal(trace.masks[0], trace.masks[1])
    assert torch.allclose(trace.masks[1], g(x, dg(d.embedding(trace.masks[0]))))


def test_full_preset_vector_lengths():
    net = NetConfig()
    g = build_generator(net)
    d = build_patch_discriminator(net)
    dg = DGCC(d.embedding_channels, g.decoder_channels, net.dgcc_reduction)
    assert d.embedding_channels == 512
    betas = dg(torch.zeros(1, 512, 30, 30))
    assert [tuple(b.shape) for b in betas] == [(1, 1024), (1, 512), (1, 256), (1, 128)]
    assert [dg.compute_calibration(torch.zeros(1, 512), s).shape[-1] for s in range(1, 5)] == [1024, 512, 256, 128]
    with pytest.raises(ValueError):
        dg.compute_calibration(torch.zeros(1, 512), 5)


def test_tiny_preset_vector_lengths():
    net = NetConfig(image_size=64, base_channels=16)
    g = build_generator(net)
    assert g.decoder_channels == (256, 128, 64, 32)
    assert g(torch.zeros(1, 1, 64, 64)).shape == (1, 1, 64, 64)


def test_dgcc_layers_are_bias_free():
    _, _, dg = _tiny_trio()
    for scale in dg.scales:
        assert scale.squeeze.bias is None and scale.excite.bias is None


def test_wrong_calibration_shapes_raise():
    g, _, _ = _tiny_trio()
    x = torch.randn(1, 1, 16, 16)
    with pytest.raises(ShapeError):
        g(x, [torch.zeros(c) for c in g.decoder_channels[:-1]])
    with pytest.raises(ShapeError):
        g(x, [torch.zeros(c + 1) for c in g.decoder_channels])


@pytest.mark.parametrize("seed", range(2))
def test_dgcc_path_gradients_match_finite_differences(seed):
    g, d, dg = _tiny_trio(zero_init=False, dtype=torch.float64, seed=seed)
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    names = [n for n, _ in dg.named_parameters()]
    # scaled weights keep beta well away from zero
    init = tuple(p.detach().clone() * 3 for p in dg.parameters())

    def objective(*params):
        out = recurrent_generate(x, g, d, WithParams(dg, names, params), turns=2)
        return (out ** 2).mean()

    inputs = tuple(p.requires_grad_(True) for p in init)
    grads = torch.autograd.grad(objective(*inputs), inputs)
    assert all(gr.abs().max() > 1e-8 for gr in grads)
    assert torch.autograd.gradcheck(objective, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_calibrated_generator_input_gradients_match_finite_differences():
    g, d, dg = _tiny_trio(zero_init=False, dtype=torch.float64, seed=3)
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda im: recurrent_generate(im, g, d, dg, turns=2).sum(), (x,),
                                    eps=1e-6, atol=1e-8, rtol=1e-4)


class WithParams(torch.nn.Module):
    """Run ``module`` with its parameters replaced by explicit tensors."""

    def __init__(self, module, names, params):
        super().__init__()
        self._module, self._params = module, dict(zip(names, params))

    def forward(self, embedding):
        return functional_call(self._module, self._params, (embedding,))
