"""Segmentation network: shared U-Net encoder, a bottleneck stack of
depthwise/pointwise mixing layers with intermediate taps, shared multi-scale
attention gates on the skip paths, one main decoder and K perturbed auxiliary
decoders.

All decoders read the single mixing stack: tap t is the stack output after t
layers (tap 0 is the encoder output itself), so recomputing the stack to a
shorter length reproduces the corresponding tap bit-exactly.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

PERTURBATION_KINDS = ("f-noise", "f-drop", "dropout")


@dataclass
class PerturbationSpec:
    kind: str
    noise_bound: float = 0.3                 # f-noise: multiplicative uniform bound
    drop_threshold_range: tuple = (0.6, 0.9)  # f-drop: saliency threshold draw range
    dropout_rate: float = 0.5

    def validate(self):
        errs = []
        if self.kind not in PERTURBATION_KINDS:
            errs.append(f"unknown perturbation kind {self.kind!r}")
        if self.noise_bound < 0:
            errs.append(f"noise_bound must be >= 0, got {self.noise_bound}")
        lo, hi = self.drop_threshold_range
        if not (0 < lo <= hi < 1):
            errs.append(f"drop_threshold_range must satisfy 0 < lo <= hi < 1, got {self.drop_threshold_range}")
        if not (0 < self.dropout_rate < 1):
            errs.append(f"dropout_rate must be in (0,1), got {self.dropout_rate}")
        return errs


def default_perturbations(num_aux=3):
    kinds = [PERTURBATION_KINDS[i % len(PERTURBATION_KINDS)] for i in range(num_aux)]
    return [PerturbationSpec(kind=k) for k in kinds]


@dataclass
class NetworkConfig:
    input_channels: int = 1
    encoder_channels: tuple = (64, 128, 256, 512)
    bottleneck_channels: int = 1024
    convmixer_length: int = 9
    convmixer_kernel: int = 7
    taps: tuple = (0, 3, 6, 9)               # aux_1..aux_K taps, then main tap (= length)
    num_aux: int = 3
    msag_enabled: tuple = (True, True, True, True)   # aux_1..aux_K, main
    perturbations: list = field(default_factory=default_perturbations)

    def validate(self):
        errs = []
        if self.input_channels < 1:
            errs.append("input_channels must be >= 1")
        if not self.encoder_channels:
            errs.append("encoder_channels must not be empty")
        if self.convmixer_kernel % 2 == 0:
            errs.append(f"convmixer_kernel must be odd, got {self.convmixer_kernel}")
        if self.convmixer_length < 1:
            errs.append("convmixer_length must be >= 1")
        if self.num_aux < 1:
            errs.append("num_aux must be >= 1")
        if len(self.taps) != self.num_aux + 1:
            errs.append(f"taps must have num_aux+1={self.num_aux + 1} entries, got {len(self.taps)}")
        else:
            if any(t < 0 or t > self.convmixer_length for t in self.taps):
                errs.append(f"taps must lie in [0,{self.convmixer_length}], got {self.taps}")
            if list(self.taps) != sorted(self.taps):
                errs.append(f"taps must be ascending, got {self.taps}")
            aux = self.taps[:-1]
            if len(set(aux)) != len(aux):
                errs.append(f"auxiliary taps must be distinct, got {aux}")
            if self.taps[-1] != self.convmixer_length:
                errs.append(f"last tap must equal convmixer_length {self.convmixer_length}, got {self.taps[-1]}")
        if len(self.msag_enabled) != self.num_aux + 1:
            errs.append(f"msag_enabled must have num_aux+1 entries, got {len(self.msag_enabled)}")
        if len(self.perturbations) != self.num_aux:
            errs.append(f"need one perturbation per auxiliary decoder ({self.num_aux}), got {len(self.perturbations)}")
        for i, spec in enumerate(self.perturbations):
            errs.extend(f"perturbations[{i}]: {e}" for e in spec.validate())
        if errs:
            raise ConfigError("; ".join(errs))
        return self


@dataclass
class ForwardOutputs:
    main_logits: torch.Tensor
    aux_logits: list


def perturb(features, spec, generator=None):
    """Apply a feature-space perturbation (train-time only; callers skip in eval).

    f-noise: f * (1 + U(-b, b)) elementwise.
    f-drop:  zero all spatial positions whose channel-summed |f| saliency,
             normalized to [0,1] per sample, is >= a per-sample gamma drawn
             uniformly from the threshold range.
    dropout: zero elements with the configured rate, rescale survivors.
    """
    if spec.kind == "f-noise":
        noise = (torch.rand(features.shape, generator=generator, dtype=features.dtype) * 2.0 - 1.0)
        return features * (1.0 + spec.noise_bound * noise.to(features.device))
    if spec.kind == "f-drop":
        sal = features.abs().sum(dim=1, keepdim=True)
        peak = sal.amax(dim=(2, 3), keepdim=True).clamp_min(1e-12)
        sal = sal / peak
        lo, hi = spec.drop_threshold_range
        gamma = lo + (hi - lo) * torch.rand((features.shape[0], 1, 1, 1),
                                            generator=generator, dtype=features.dtype)
        keep = (sal < gamma.to(features.device)).to(features.dtype)
        return features * keep
    if spec.kind == "dropout":
        keep = (torch.rand(features.shape, generator=generator, dtype=features.dtype)
                >= spec.dropout_rate).to(features.dtype)
        return features * keep.to(features.device) / (1.0 - spec.dropout_rate)
    raise ConfigError(f"unknown perturbation kind {spec.kind!r}")


class DoubleConv(nn.Module):
    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(ch_in, ch_out, 3, padding=1),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch_out, ch_out, 3, padding=1),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Encoder(nn.Module):
    """Stacked double-conv stages with 2x2 max-pooling between them."""

    def __init__(self, in_channels, stage_channels, bottleneck_channels):
        super().__init__()
        stages = []
        prev = in_channels
        for ch in stage_channels:
            stages.append(DoubleConv(prev, ch))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.bottleneck = DoubleConv(prev, bottleneck_channels)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        factor = 2 ** len(self.stages)
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise ValueError(f"input spatial size {h}x{w} must be divisible by {factor}")
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        return skips, self.bottleneck(x)


class ConvMixerLayer(nn.Module):
    """Depthwise kxk mixing with residual, then pointwise; GELU+BN after each conv."""

    def __init__(self, channels, kernel):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, kernel, padding=kernel // 2, groups=channels)
        self.bn1 = nn.BatchNorm2d(channels)
        self.pointwise = nn.Conv2d(channels, channels, 1)
        self.bn2 = nn.BatchNorm2d(channels)
        self.act = nn.GELU()

    def forward(self, x):
        h = self.bn1(self.act(self.depthwise(x))) + x
        return self.bn2(self.act(self.pointwise(h)))


class ConvMixerStack(nn.Module):
    def __init__(self, channels, length, kernel):
        super().__init__()
        self.layers = nn.ModuleList(ConvMixerLayer(channels, kernel) for _ in range(length))

    def forward(self, x, capture):
        """Run the stack once and return {tap: feature} for the requested taps.

        Tap 0 is the input unchanged; tap t is the output after t layers.
        """
        capture = set(capture)
        bad = [t for t in capture if t < 0 or t > len(self.layers)]
        if bad:
            raise ValueError(f"taps out of range [0,{len(self.layers)}]: {sorted(bad)}")
        feats = {}
        if 0 in capture:
            feats[0] = x
        deepest = max(capture)
        for depth, layer in enumerate(self.layers, start=1):
            if depth > deepest:
                break
            x = layer(x)
            if depth in capture:
                feats[depth] = x
        return feats


class MultiScaleAttentionGate(nn.Module):
    """Three parallel receptive fields -> sigmoid gate -> residual reweighting."""

    def __init__(self, channels):
        super().__init__()
        self.pointwise = nn.Sequential(nn.Conv2d(channels, channels, 1),
                                       nn.BatchNorm2d(channels))
        self.ordinary = nn.Sequential(nn.Conv2d(channels, channels, 3, stride=1, padding=1),
                                      nn.BatchNorm2d(channels))
        self.dilated = nn.Sequential(nn.Conv2d(channels, channels, 3, stride=1, padding=2, dilation=2),
                                     nn.BatchNorm2d(channels))
        self.relu = nn.ReLU(inplace=True)
        self.select = nn.Conv2d(3 * channels, channels, 1)

    def forward(self, f):
        mixed = self.relu(torch.cat([self.pointwise(f), self.ordinary(f), self.dilated(f)], dim=1))
        gate = torch.sigmoid(self.select(mixed))
        return f * gate + f


class Decoder(nn.Module):
    """Bilinear 2x upsampling with (optionally gated) skip concatenation."""

    def __init__(self, bottleneck_channels, skip_channels):
        super().__init__()
        blocks = []
        prev = bottleneck_channels
        for ch in reversed(skip_channels):
            blocks.append(DoubleConv(prev + ch, ch))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(skip_channels[0], 1, 1)

    def forward(self, x, skips, gates=None):
        for block, idx in zip(self.blocks, reversed(range(len(skips)))):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            skip = skips[idx]
            if x.shape[-2:] != skip.shape[-2:]:
                raise ValueError(f"decoder/skip spatial mismatch: {tuple(x.shape[-2:])} vs {tuple(skip.shape[-2:])}")
            if gates is not None:
                skip = gates[idx](skip)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class MgccNet(nn.Module):
    """Shared encoder + mixing stack + shared gates + main and auxiliary decoders."""

    def __init__(self, config=None):
        super().__init__()
        config = config or NetworkConfig()
        config.validate()
        self.config = config
        self.encoder = Encoder(config.input_channels, config.encoder_channels, config.bottleneck_channels)
        self.mixer = ConvMixerStack(config.bottleneck_channels, config.convmixer_length, config.convmixer_kernel)
        if any(config.msag_enabled):
            self.gates = nn.ModuleList(MultiScaleAttentionGate(c) for c in config.encoder_channels)
        else:
            self.gates = None
        self.main_decoder = Decoder(config.bottleneck_channels, config.encoder_channels)
        self.aux_decoders = nn.ModuleList(
            Decoder(config.bottleneck_channels, config.encoder_channels) for _ in range(config.num_aux))

    def _gates_for(self, decoder_index):
        # decoder_index: 0..K-1 aux, K = main
        if self.gates is not None and self.config.msag_enabled[decoder_index]:
            return self.gates
        return None

    def forward(self, x, mode="train", generator=None):
        """Run the network.  In train mode returns main plus K perturbed auxiliary
        logits; in eval mode only the main decoder executes and no perturbation
        is applied."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        skips, bottleneck = self.encoder(x)
        main_tap = cfg.taps[-1]
        capture = {main_tap} if mode == "eval" else set(cfg.taps)
        feats = self.mixer(bottleneck, capture)
        main = self.main_decoder(feats[main_tap], skips, self._gates_for(cfg.num_aux))
        if mode == "eval":
            return ForwardOutputs(main, [])
        aux = []
        for k in range(cfg.num_aux):
            perturbed = perturb(feats[cfg.taps[k]], cfg.perturbations[k], generator)
            aux.append(self.aux_decoders[k](perturbed, skips, self._gates_for(k)))
        return ForwardOutputs(main, aux)

    def count_parameters(self, scope="training"):
        """Parameter counts by subsystem.

        inference: encoder + mixing stack + main decoder + gates when the main
        decoder uses them (auxiliary decoders excluded); baseline: the same
        encoder/decoder pair without the mixing stack and gates.
        """
        def num(module):
            return sum(p.numel() for p in module.parameters()) if module is not None else 0

        if scope == "training":
            return sum(p.numel() for p in self.parameters())
        if scope == "convmixer":
            return num(self.mixer)
        if scope == "msag":
            return num(self.gates)
        if scope == "baseline":
            return num(self.encoder) + num(self.main_decoder)
        if scope == "inference":
            total = num(self.encoder) + num(self.mixer) + num(self.main_decoder)
            if self._gates_for(self.config.num_aux) is not None:
                total += num(self.gates)
            return total
        raise ValueError(f"unknown scope {scope!r}")


def initialize_parameters(model, seed):
    """Seeded Kaiming fan-in init for conv weights, zero biases, BN affine (1,0).

    Iteration follows module registration order, so a fixed seed reproduces
    the exact parameter values.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = (module.in_channels // module.groups) * module.kernel_size[0] * module.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen,
                                                dtype=module.weight.dtype) * std)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model
