import numpy as np
import pytest
import torch

from conftest import desk_network_config, gradcheck_module, tiny_network_config
from mgcc.backbone import (ConvMixerLayer, ConvMixerStack, Decoder, Encoder, ForwardOutputs,
                           MgccNet, MultiScaleAttentionGate, NetworkConfig, PerturbationSpec,
                           initialize_parameters, perturb)
from mgcc.errors import ConfigError
from mgcc.objective import WarmupSchedule, consistency_loss, lambda_at, supervised_loss

torch.manual_seed(0)


# ---------------------------------------------------------------- config

def test_config_validation_rejects_bad_taps():
    with pytest.raises(ConfigError):
        NetworkConfig(taps=(0, 6, 3, 9)).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(taps=(0, 3, 6, 8)).validate()       # last tap != length
    with pytest.raises(ConfigError):
        NetworkConfig(taps=(0, 3, 6, 9, 9)).validate()    # wrong arity
    with pytest.raises(ConfigError):
        NetworkConfig(convmixer_kernel=6).validate()
    with pytest.raises(ConfigError):
        NetworkConfig(perturbations=[PerturbationSpec("f-noise")]).validate()


def test_config_alternative_tap_reading_allowed():
    # aux decoders at 3/6/9 with the main decoder sharing tap 9
    cfg = NetworkConfig(taps=(3, 6, 9, 9))
    cfg.validate()


# ---------------------------------------------------------------- encoder

def test_encoder_shapes_default_config():
    enc = Encoder(1, (64, 128, 256, 512), 1024)
    skips, bottleneck = enc(torch.randn(1, 1, 256, 256))
    assert [tuple(s.shape) for s in skips] == [
        (1, 64, 256, 256), (1, 128, 128, 128), (1, 256, 64, 64), (1, 512, 32, 32)]
    assert tuple(bottleneck.shape) == (1, 1024, 16, 16)


def test_encoder_batch_passthrough():
    enc = Encoder(1, (4, 8), 8)
    skips, bottleneck = enc(torch.randn(2, 1, 16, 16))
    assert all(s.shape[0] == 2 for s in skips)
    assert bottleneck.shape[0] == 2


def test_encoder_divisibility_error():
    enc = Encoder(1, (4, 8, 16, 32), 64)
    with pytest.raises(ValueError, match="divisible"):
        enc(torch.randn(1, 1, 100, 100))


def test_encoder_zero_input_zero_bias_propagation():
    # with zero conv biases and BN affine (1,0), a zero input stays exactly zero
    enc = Encoder(1, (4, 8), 8)
    initialize_parameters(enc, 0)
    skips, bottleneck = enc(torch.zeros(2, 1, 16, 16))
    assert torch.all(bottleneck == 0)
    assert all(torch.all(s == 0) for s in skips)


# ---------------------------------------------------------------- convmixer

def test_convmixer_tap_zero_is_identity():
    stack = ConvMixerStack(8, 3, 3)
    x = torch.randn(1, 8, 4, 4)
    feats = stack(x, {0, 3})
    assert torch.equal(feats[0], x)


def test_convmixer_preserves_shape():
    stack = ConvMixerStack(16, 9, 7)
    x = torch.randn(2, 16, 16, 16)
    feats = stack(x, {9})
    assert feats[9].shape == x.shape


def test_convmixer_tap_out_of_range():
    stack = ConvMixerStack(4, 2, 3)
    with pytest.raises(ValueError):
        stack(torch.randn(1, 4, 4, 4), {3})


def test_convmixer_tap_prefix_property():
    stack = ConvMixerStack(6, 4, 3).eval()
    x = torch.randn(1, 6, 8, 8)
    with torch.no_grad():
        full = stack(x, {1, 2, 4})
        short = stack(x, {1, 2})
    assert torch.equal(full[1], short[1])
    assert torch.equal(full[2], short[2])


def test_convmixer_layer_param_count_closed_form():
    for c, k in ((4, 7), (8, 7), (1024, 7)):
        layer = ConvMixerLayer(c, k)
        n = sum(p.numel() for p in layer.parameters())
        assert n == c * c + 55 * c


def test_convmixer_layer_param_count_brute_enumeration():
    layer = ConvMixerLayer(4, 7)
    declared = {name: tuple(p.shape) for name, p in layer.named_parameters()}
    assert declared == {
        "depthwise.weight": (4, 1, 7, 7), "depthwise.bias": (4,),
        "bn1.weight": (4,), "bn1.bias": (4,),
        "pointwise.weight": (4, 4, 1, 1), "pointwise.bias": (4,),
        "bn2.weight": (4,), "bn2.bias": (4,),
    }
    assert sum(int(np.prod(s)) for s in declared.values()) == 4 * 4 + 55 * 4 == 236


# ---------------------------------------------------------------- msag

def test_msag_param_count_closed_form():
    for c in (4, 64, 128, 256, 512):
        gate = MultiScaleAttentionGate(c)
        assert sum(p.numel() for p in gate.parameters()) == 22 * c * c + 10 * c


def test_msag_zero_select_gives_one_point_five():
    gate = MultiScaleAttentionGate(4).eval()
    with torch.no_grad():
        gate.select.weight.zero_()
        gate.select.bias.zero_()
        f = torch.randn(2, 4, 6, 6)
        out = gate(f)
    assert torch.allclose(out, 1.5 * f, atol=1e-6)


def test_msag_preserves_shape():
    for c, h, w in ((3, 7, 9), (8, 16, 16), (16, 5, 5)):
        gate = MultiScaleAttentionGate(c)
        f = torch.randn(1, c, h, w)
        assert gate(f).shape == f.shape


# ---------------------------------------------------------------- perturbations

def test_fnoise_zero_bound_is_identity():
    f = torch.randn(2, 4, 5, 5)
    spec = PerturbationSpec("f-noise", noise_bound=0.0)
    out = perturb(f, spec, torch.Generator().manual_seed(0))
    assert torch.equal(out, f)


def test_fnoise_bound_property():
    f = torch.randn(4, 8, 6, 6, dtype=torch.float64)
    spec = PerturbationSpec("f-noise", noise_bound=0.3)
    for seed in range(10):
        out = perturb(f, spec, torch.Generator().manual_seed(seed))
        assert torch.all((out - f).abs() <= 0.3 * f.abs() + 1e-12)


def test_fdrop_threshold_separates_saliency():
    f = torch.randn(3, 4, 8, 8, dtype=torch.float64)
    spec = PerturbationSpec("f-drop", drop_threshold_range=(0.6, 0.9))
    out = perturb(f, spec, torch.Generator().manual_seed(1))
    sal = f.abs().sum(dim=1)
    sal = sal / sal.amax(dim=(1, 2), keepdim=True)
    for b in range(f.shape[0]):
        kept = (out[b] != 0).any(dim=0)
        dropped = ~kept
        # positions are zeroed as whole columns across channels
        assert torch.all((out[b] == 0).all(dim=0) == dropped)
        if kept.any() and dropped.any():
            assert sal[b][kept].max() < sal[b][dropped].min()
        # the most salient position always crosses any threshold < 1
        assert dropped.any()


def test_dropout_statistics():
    f = torch.ones(1, 64, 64, 64, dtype=torch.float64)
    spec = PerturbationSpec("dropout", dropout_rate=0.5)
    out = perturb(f, spec, torch.Generator().manual_seed(2))
    n = f.numel()
    survive = float((out != 0).double().mean())
    sigma = np.sqrt(0.25 / n)
    assert abs(survive - 0.5) <= 3 * sigma
    assert float(out.mean()) == pytest.approx(1.0, abs=5 * sigma * 2)
    assert set(np.unique(out.numpy())) <= {0.0, 2.0}


def test_perturb_deterministic_given_generator_state():
    f = torch.randn(2, 4, 4, 4)
    spec = PerturbationSpec("dropout")
    a = perturb(f, spec, torch.Generator().manual_seed(9))
    b = perturb(f, spec, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


# ---------------------------------------------------------------- full network

def test_forward_train_output_arity():
    net = MgccNet(desk_network_config())
    out = net(torch.randn(2, 1, 64, 64), mode="train", generator=torch.Generator().manual_seed(0))
    assert isinstance(out, ForwardOutputs)
    assert out.main_logits.shape == (2, 1, 64, 64)
    assert len(out.aux_logits) == 3
    assert all(a.shape == (2, 1, 64, 64) for a in out.aux_logits)


def test_forward_eval_runs_main_only():
    net = MgccNet(desk_network_config())
    calls = {"aux": 0}
    for dec in net.aux_decoders:
        dec.register_forward_hook(lambda *a: calls.__setitem__("aux", calls["aux"] + 1))
    out = net(torch.randn(1, 1, 64, 64), mode="eval")
    assert len(out.aux_logits) == 0
    assert calls["aux"] == 0


def test_forward_eval_deterministic():
    net = MgccNet(desk_network_config())
    initialize_parameters(net, 3)
    net.eval()
    x = torch.randn(1, 1, 64, 64)
    with torch.no_grad():
        a = net(x, mode="eval").main_logits
        b = net(x, mode="eval").main_logits
    assert torch.equal(a, b)


def test_aux_equals_main_with_shared_tap_and_weights():
    cfg = tiny_network_config(taps=(1, 2, 2), msag_enabled=(True, True, True),
                              perturbations=[PerturbationSpec("f-noise", noise_bound=0.0),
                                             PerturbationSpec("f-noise", noise_bound=0.0)])
    net = MgccNet(cfg)
    initialize_parameters(net, 5)
    net.aux_decoders[1].load_state_dict(net.main_decoder.state_dict())
    net.eval()
    with torch.no_grad():
        out = net(torch.randn(1, 1, 8, 8), mode="train", generator=torch.Generator().manual_seed(0))
    assert torch.equal(out.aux_logits[1], out.main_logits)


def test_initialize_deterministic_and_decoders_differ():
    net1 = initialize_parameters(MgccNet(tiny_network_config()), 7)
    net2 = initialize_parameters(MgccNet(tiny_network_config()), 7)
    for p1, p2 in zip(net1.parameters(), net2.parameters()):
        assert torch.equal(p1, p2)
    w_main = net1.main_decoder.blocks[0].block[0].weight
    w_aux = net1.aux_decoders[0].blocks[0].block[0].weight
    assert not torch.equal(w_main, w_aux)


def test_decoder_shape_arithmetic():
    dec = Decoder(64, (4, 8, 16, 32))
    enc = Encoder(1, (4, 8, 16, 32), 64)
    skips, bott = enc(torch.randn(1, 1, 64, 64))
    assert dec(bott, skips).shape == (1, 1, 64, 64)


def test_msag_disabled_decode_path():
    cfg = desk_network_config(msag_enabled=(False, False, False, False))
    net = MgccNet(cfg)
    assert net.gates is None
    out = net(torch.randn(1, 1, 64, 64), mode="eval")
    assert out.main_logits.shape == (1, 1, 64, 64)
    assert net.count_parameters("msag") == 0


# ---------------------------------------------------------------- parameter accounting

def test_default_parameter_counts_match_closed_forms():
    net = MgccNet(NetworkConfig())
    assert net.count_parameters("convmixer") == 9_944_064
    assert net.count_parameters("msag") == 7_669_120
    baseline = net.count_parameters("baseline")
    assert abs(baseline - 34_530_000) / 34_530_000 <= 0.15
    assert net.count_parameters("inference") == baseline + 9_944_064 + 7_669_120
    total = (net.count_parameters("baseline") + net.count_parameters("convmixer")
             + net.count_parameters("msag")
             + sum(p.numel() for d in net.aux_decoders for p in d.parameters()))
    assert net.count_parameters("training") == total


def test_inference_to_baseline_ratio_without_gates():
    net = MgccNet(NetworkConfig(msag_enabled=(False, False, False, False)))
    ratio = net.count_parameters("inference") / net.count_parameters("baseline")
    assert 1.25 <= ratio <= 1.32


def test_count_parameters_unknown_scope():
    net = MgccNet(tiny_network_config())
    with pytest.raises(ValueError):
        net.count_parameters("bogus")


# ---------------------------------------------------------------- gradients

def test_gradcheck_convmixer_layer():
    layer = ConvMixerLayer(8, 3).double()
    x = torch.randn(1, 8, 8, 8, dtype=torch.float64)

    def loss_fn():
        return (layer(x) ** 2).mean()

    assert gradcheck_module(layer, loss_fn) <= 1e-4


def test_gradcheck_msag():
    gate = MultiScaleAttentionGate(8).double()
    x = torch.randn(1, 8, 8, 8, dtype=torch.float64)

    def loss_fn():
        return (gate(x) ** 2).mean()

    assert gradcheck_module(gate, loss_fn) <= 1e-4


def test_gradcheck_composed_objective():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)   # tiny tensors: thread sync dominates otherwise
    try:
        cfg = tiny_network_config()
        net = MgccNet(cfg).double()
        initialize_parameters(net, 11)
        rng = np.random.default_rng(0)
        x_lab = torch.tensor(rng.random((1, 1, 8, 8)))
        y_lab = torch.tensor((rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64))
        x_unl = torch.tensor(rng.random((1, 1, 8, 8)))
        sched = WarmupSchedule(w_max=0.1, t_max=100)
        lam = lambda_at(50, sched)

        # The consistency target is a fixed tensor (stop-gradient contract), so
        # the differentiable objective uses the precomputed main probabilities.
        with torch.no_grad():
            out0 = net(torch.cat([x_lab, x_unl]), mode="train",
                       generator=torch.Generator().manual_seed(123))
            target_u = torch.sigmoid(out0.main_logits[1:])

        def loss_fn():
            gen = torch.Generator().manual_seed(123)   # frozen perturbation draws
            out = net(torch.cat([x_lab, x_unl]), mode="train", generator=gen)
            out_l = ForwardOutputs(out.main_logits[:1], [a[:1] for a in out.aux_logits])
            sup, _ = supervised_loss(out_l, y_lab)
            cons = torch.stack([((torch.sigmoid(a[1:]) - target_u) ** 2).mean()
                                for a in out.aux_logits]).mean()
            return sup + lam * cons

        # the frozen-target objective equals the detached consistency loss in value
        with torch.no_grad():
            out = net(torch.cat([x_lab, x_unl]), mode="train",
                      generator=torch.Generator().manual_seed(123))
            out_u = ForwardOutputs(out.main_logits[1:], [a[1:] for a in out.aux_logits])
            sup0, _ = supervised_loss(
                ForwardOutputs(out.main_logits[:1], [a[:1] for a in out.aux_logits]), y_lab)
            assert float(loss_fn()) == pytest.approx(
                float(sup0 + lam * consistency_loss(out_u)), rel=1e-12)

        assert gradcheck_module(net, loss_fn) <= 1e-4
    finally:
        torch.set_num_threads(threads)
