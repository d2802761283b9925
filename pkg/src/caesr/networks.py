"""Enhancement-layer networks: conditional hyperprior autoencoder and SR module.

Tensors are batched ``[B, C, H, W]`` float32 unless stated otherwise.  The
autoencoder input is ``cat(upscaled_base, source)`` for conditional coding or
the three-channel difference ``source - upscaled_base`` for residual modes.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import layers
from .entropy.gmm import SCALE_MIN
from .entropy.quantize import quantize
from .layers import GDN, Conv2d, MaskedConv2d, leaky_relu

LIKELIHOOD_BOUND = 1e-9
BRANCH_INIT_SCALE = 0.1


def _shrink_(conv: nn.Module, scale: float = BRANCH_INIT_SCALE) -> None:
    # residual branches start small; IGDN chains otherwise overflow at init
    with torch.no_grad():
        conv.weight.mul_(scale)


class CodingMode(enum.IntEnum):
    bic_only = 0
    sr_only = 1
    res_bic = 2
    res_sr = 3
    conditional = 4

    @classmethod
    def parse(cls, value) -> "CodingMode":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value]
            except KeyError:
                raise ValueError(f"unknown coding mode {value!r}") from None
        return cls(int(value))

    @property
    def uses_autoencoder(self) -> bool:
        return self in (CodingMode.res_bic, CodingMode.res_sr, CodingMode.conditional)

    @property
    def uses_sr(self) -> bool:
        return self in (CodingMode.sr_only, CodingMode.res_sr, CodingMode.conditional)


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 192
    gmm_components: int = 3
    sr_blocks: int = 8
    sr_filters: int = 64
    context_kernel: int = 5

    def __post_init__(self):
        if self.latent_channels < 4 or self.latent_channels % 4:
            raise ValueError("latent_channels must be a positive multiple of 4")
        if self.gmm_components < 1 or self.sr_blocks < 1 or self.sr_filters < 1:
            raise ValueError("gmm_components, sr_blocks and sr_filters must be >= 1")
        if self.context_kernel % 2 == 0:
            raise ValueError("context_kernel must be odd")

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Small configuration used by tests and desk-scale runs."""
        kw = dict(latent_channels=32, sr_blocks=2, sr_filters=16)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


# --- building blocks --------------------------------------------------------

class SubpixelConv(nn.Module):
    def __init__(self, in_ch, out_ch, r=2, kernel_size=3):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch * r * r, kernel_size)
        self.r = r

    def forward(self, x):
        return layers.subpixel_upscale(self.conv(x), self.r)


class ResidualBlock(nn.Module):
    """conv3x3 -> GDN/IGDN -> conv3x3, plus identity skip."""

    def __init__(self, ch, inverse=False):
        super().__init__()
        self.conv1 = Conv2d(ch, ch)
        self.act = GDN(ch, inverse=inverse)
        self.conv2 = Conv2d(ch, ch)
        _shrink_(self.conv2)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class ResidualBlockWithStride(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, stride=2)
        self.gdn = GDN(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch)
        self.skip = Conv2d(in_ch, out_ch, kernel_size=1, stride=2)
        _shrink_(self.conv2)

    def forward(self, x):
        return self.skip(x) + self.conv2(self.gdn(self.conv1(x)))


class ResidualBlockUpsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.up = SubpixelConv(in_ch, out_ch)
        self.igdn = GDN(out_ch, inverse=True)
        self.conv = Conv2d(out_ch, out_ch)
        self.skip = SubpixelConv(in_ch, out_ch, kernel_size=1)
        _shrink_(self.conv)

    def forward(self, x):
        return self.skip(x) + self.conv(self.igdn(self.up(x)))


class ResidualUnit(nn.Module):
    """Bottleneck unit used inside attention blocks."""

    def __init__(self, ch):
        super().__init__()
        half = max(ch // 2, 1)
        self.body = nn.Sequential(
            Conv2d(ch, half, 1), nn.ReLU(),
            Conv2d(half, half, 3), nn.ReLU(),
            Conv2d(half, ch, 1),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class AttentionBlock(nn.Module):
    """x + trunk(x) * sigmoid(mask(x))."""

    def __init__(self, ch):
        super().__init__()
        self.trunk = nn.Sequential(*(ResidualUnit(ch) for _ in range(3)))
        self.mask = nn.Sequential(*(ResidualUnit(ch) for _ in range(3)), Conv2d(ch, ch, 1))

    def forward(self, x):
        return x + self.trunk(x) * torch.sigmoid(self.mask(x))


# --- transforms -------------------------------------------------------------

class Analysis(nn.Module):
    """g_a: four stride-2 stages, attention after stages 2 and 4."""

    def __init__(self, in_ch, n):
        super().__init__()
        self.net = nn.Sequential(
            ResidualBlockWithStride(in_ch, n), ResidualBlock(n),
            ResidualBlockWithStride(n, n), ResidualBlock(n),
            AttentionBlock(n),
            ResidualBlockWithStride(n, n), ResidualBlock(n),
            ResidualBlockWithStride(n, n),
            AttentionBlock(n),
        )

    def forward(self, x):
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ValueError(f"analysis input {tuple(x.shape[-2:])} not divisible by 16")
        return self.net(x)


class Synthesis(nn.Module):
    """g_s: mirror of :class:`Analysis` with IGDN and sub-pixel upscaling."""

    def __init__(self, n, out_ch=3):
        super().__init__()
        self.net = nn.Sequential(
            AttentionBlock(n),
            ResidualBlock(n, inverse=True), ResidualBlockUpsample(n, n),
            ResidualBlock(n, inverse=True), ResidualBlockUpsample(n, n),
            AttentionBlock(n),
            ResidualBlock(n, inverse=True), ResidualBlockUpsample(n, n),
            ResidualBlock(n, inverse=True), SubpixelConv(n, out_ch),
        )
        _shrink_(self.net[-1].conv)

    def forward(self, y):
        return self.net(y)


class HyperAnalysis(nn.Module):
    def __init__(self, n):
        super().__init__()
        self.conv1 = Conv2d(n, n)
        self.conv2 = Conv2d(n, n, stride=2)
        self.conv3 = Conv2d(n, n, stride=2)

    def forward(self, y):
        if y.shape[-1] % 4 or y.shape[-2] % 4:
            raise ValueError(f"hyper-analysis input {tuple(y.shape[-2:])} not divisible by 4")
        return self.conv3(leaky_relu(self.conv2(leaky_relu(self.conv1(y)))))


class HyperSynthesis(nn.Module):
    def __init__(self, n):
        super().__init__()
        mid = 3 * n // 2
        self.conv1 = Conv2d(n, n)
        self.up1 = SubpixelConv(n, n)
        self.conv2 = Conv2d(n, mid)
        self.up2 = SubpixelConv(mid, mid)
        self.conv3 = Conv2d(mid, 2 * n)

    def forward(self, z):
        x = leaky_relu(self.conv1(z))
        x = leaky_relu(self.up1(x))
        x = leaky_relu(self.conv2(x))
        x = leaky_relu(self.up2(x))
        return self.conv3(x)


@dataclass
class GmmParams:
    """Mixture parameters, each shaped [..., K, n, h, w]."""

    weights: torch.Tensor
    means: torch.Tensor
    scales: torch.Tensor


class EntropyParameters(nn.Module):
    """Context model C_m (masked conv) fused with the hyper-decoder output."""

    def __init__(self, n, k, kernel_size=5):
        super().__init__()
        self.n, self.k = n, k
        self.context = MaskedConv2d(n, 2 * n, kernel_size, "A")
        widths = [4 * n, 6 * n, 8 * n, 3 * k * n]
        self.head = nn.ModuleList(Conv2d(a, b, 1) for a, b in zip(widths[:-1], widths[1:]))

    def _split(self, raw: torch.Tensor) -> GmmParams:
        k, n = self.k, self.n
        parts = raw.reshape(raw.shape[:-3] + (3, k, n) + raw.shape[-2:])
        w_raw, mu, s_raw = parts.unbind(dim=raw.dim() - 3)
        return GmmParams(torch.softmax(w_raw, dim=-4), mu, F.softplus(s_raw) + SCALE_MIN)

    def from_features(self, ctx: torch.Tensor, psi: torch.Tensor) -> GmmParams:
        x = torch.cat([ctx, psi], dim=-3)
        for i, conv in enumerate(self.head):
            x = conv(x)
            if i < len(self.head) - 1:
                x = leaky_relu(x)
        return self._split(x)

    def forward(self, psi: torch.Tensor, y_bar: torch.Tensor) -> GmmParams:
        """Parallel evaluation (training / rate estimation)."""
        return self.from_features(self.context(y_bar), psi)

    @torch.no_grad()
    def at_position(self, y_pad: torch.Tensor, psi: torch.Tensor, i: int, j: int):
        """Parameters for one raster position from a zero-padded decoded buffer.

        ``y_pad`` is [n, h + 2p, w + 2p] holding only already-decoded symbols;
        ``psi`` is [2n, h, w].  Returns numpy float64 arrays shaped [K, n].
        Encoder and decoder both call this with the same buffer contents.
        """
        ks = self.context.weight.shape[-1]
        patch = y_pad[:, i:i + ks, j:j + ks].reshape(-1)
        wm = self.context.masked_weight().reshape(self.context.weight.shape[0], -1)
        ctx = F.linear(patch, wm, self.context.bias)
        x = torch.cat([ctx, psi[:, i, j]])
        for idx, conv in enumerate(self.head):
            x = F.linear(x, conv.weight.reshape(conv.weight.shape[0], -1), conv.bias)
            if idx < len(self.head) - 1:
                x = leaky_relu(x)
        raw = x.reshape(3, self.k, self.n)
        w = torch.softmax(raw[0], dim=0)
        sigma = F.softplus(raw[2]) + SCALE_MIN
        return (w.double().numpy(), raw[1].double().numpy(), sigma.double().numpy())


class SuperResolution(nn.Module):
    """s_phi: EDSR-style residual network without an upscaling tail.

    The output convolution starts at zero so an untrained module returns the
    upscaled base layer unchanged.
    """

    def __init__(self, blocks=8, filters=64, in_ch=6, out_ch=3):
        super().__init__()
        self.head = Conv2d(in_ch, filters)
        self.blocks = nn.ModuleList(
            nn.ModuleList([Conv2d(filters, filters), Conv2d(filters, filters)]) for _ in range(blocks))
        self.body_tail = Conv2d(filters, filters)
        self.tail = Conv2d(filters, out_ch)
        nn.init.zeros_(self.tail.weight)

    def forward(self, x_up, r):
        if x_up.shape != r.shape:
            raise ValueError(f"SR inputs differ in shape: {tuple(x_up.shape)} vs {tuple(r.shape)}")
        h = self.head(torch.cat([x_up, r], dim=-3))
        x = h
        for conv1, conv2 in self.blocks:
            x = x + conv2(F.relu(conv1(x)))
        x = self.body_tail(x) + h
        return self.tail(x) + x_up


# --- full model -------------------------------------------------------------

def gaussian_interval_likelihood(v, mean, scale):
    """Mass of [v - 1/2, v + 1/2] under N(mean, scale^2), computed on the lower tail."""
    d = torch.abs(v - mean)
    upper = torch.special.ndtr((0.5 - d) / scale)
    lower = torch.special.ndtr((-0.5 - d) / scale)
    return upper - lower


def gmm_interval_likelihood(v: torch.Tensor, p: GmmParams) -> torch.Tensor:
    """Mixture likelihood; ``v`` is [B, n, h, w], parameters [B, K, n, h, w]."""
    comp = gaussian_interval_likelihood(v.unsqueeze(-4), p.means, p.scales)
    return (p.weights * comp).sum(dim=-4)


class CaesrModel(nn.Module):
    """All learned parts for one coding mode.

    ``forward`` implements the training/evaluation graph; the bitstream path
    lives in :mod:`caesr.codec` and reuses the same submodules.
    """

    def __init__(self, config: ModelConfig | None = None, mode=CodingMode.conditional):
        super().__init__()
        self.config = config or ModelConfig()
        self.mode = CodingMode.parse(mode)
        n, k = self.config.latent_channels, self.config.gmm_components
        if self.mode.uses_autoencoder:
            in_ch = 6 if self.mode == CodingMode.conditional else 3
            self.g_a = Analysis(in_ch, n)
            self.g_s = Synthesis(n)
            self.h_a = HyperAnalysis(n)
            self.h_s = HyperSynthesis(n)
            self.entropy = EntropyParameters(n, k, self.config.context_kernel)
            self.z_mean = nn.Parameter(torch.zeros(n))
            self.z_scale = nn.Parameter(torch.ones(n))
        if self.mode.uses_sr:
            self.sr = SuperResolution(self.config.sr_blocks, self.config.sr_filters)

    @torch.no_grad()
    def project_(self) -> None:
        if self.mode.uses_autoencoder:
            self.z_scale.clamp_(min=SCALE_MIN)

    def ae_input(self, x: torch.Tensor, x_up: torch.Tensor) -> torch.Tensor:
        if self.mode == CodingMode.conditional:
            return torch.cat([x_up, x], dim=-3)
        return x - x_up

    def reconstruct(self, x_up: torch.Tensor, r: torch.Tensor | None) -> torch.Tensor:
        if self.mode == CodingMode.bic_only:
            return x_up
        if self.mode == CodingMode.sr_only:
            return self.sr(x_up, torch.zeros_like(x_up))
        if self.mode == CodingMode.res_bic:
            return x_up + r
        return self.sr(x_up, r)

    def z_likelihood(self, z_bar: torch.Tensor) -> torch.Tensor:
        shape = (-1, 1, 1)
        return gaussian_interval_likelihood(z_bar, self.z_mean.view(shape), self.z_scale.view(shape))

    def forward(self, x: torch.Tensor, x_up: torch.Tensor, quantizer: str = "noise",
                generator: torch.Generator | None = None,
                noise: tuple[torch.Tensor, torch.Tensor] | None = None) -> dict:
        """Return ``x_hat`` plus ``y_bits``/``z_bits`` (per batch item) and latents.

        ``noise`` optionally fixes the (y, z) uniform noise samples.
        """
        out = {"y_bits": torch.zeros(x.shape[0], dtype=x.dtype),
               "z_bits": torch.zeros(x.shape[0], dtype=x.dtype)}
        if not self.mode.uses_autoencoder:
            out["x_hat"] = self.reconstruct(x_up, None)
            return out
        y = self.g_a(self.ae_input(x, x_up))
        z = self.h_a(y)
        ny, nz = noise if noise is not None else (None, None)
        z_bar = quantize(z, quantizer, generator, nz)
        y_bar = quantize(y, quantizer, generator, ny)
        psi = self.h_s(z_bar)
        params = self.entropy(psi, y_bar)
        py = torch.clamp(gmm_interval_likelihood(y_bar, params), min=LIKELIHOOD_BOUND)
        pz = torch.clamp(self.z_likelihood(z_bar), min=LIKELIHOOD_BOUND)
        out["y_bits"] = -torch.log2(py).flatten(1).sum(dim=1)
        out["z_bits"] = -torch.log2(pz).flatten(1).sum(dim=1)
        r = self.g_s(y_bar)
        out.update(x_hat=self.reconstruct(x_up, r), y=y, z=z, y_bar=y_bar, z_bar=z_bar,
                   r=r, params=params)
        return out

    # weights I/O
    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}

    def save(self, path) -> None:
        layers.save_weights(path, self.named_tensors())

    def load(self, path) -> "CaesrModel":
        arrays = layers.load_weights(path)
        own = self.state_dict()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(f"weights do not match {self.mode.name} model: "
                             f"missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, arr in arrays.items():
            if tuple(arr.shape) != tuple(own[k].shape):
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {tuple(own[k].shape)}")
        self.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        return self


def build_model(config: ModelConfig | None, mode, seed: int = 0) -> CaesrModel:
    """Deterministically initialised model."""
    torch.manual_seed(seed)
    return CaesrModel(config, mode)
