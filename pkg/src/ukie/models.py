"""Encoder/extractor/decoder networks, the channel codec and the baselines.

A :class:`ModelSet` bundles eight independently addressable parameter groups:

========  ==================================================
group     role
========  ==================================================
theta_E   representation encoder, image -> (mean, logvar) of z
theta_K   invariant-knowledge extractor, z -> z_K
theta_V   variant extractor, z -> z_V
theta_2   knowledge-conditioned decoder, (z_V_hat, z_K) -> x_hat
alpha_1   channel encoder, z_V -> 2M reals
alpha_2   channel decoder, 2M reals -> z_V_hat
xi        label classifier on z_K
psi       adversarial discriminator on z_K
========  ==================================================

Inputs whose side is not a power-of-two multiple of 8 are zero-padded up to
one (28x28 MNIST becomes 32x32); the decoder crops its output back.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from ukie.errors import ConfigError, LayoutMismatchError, MissingArtifactError

LATENT_SIDE = 8
LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0
GROUPS = ("theta_E", "theta_K", "theta_V", "theta_2", "alpha_1", "alpha_2", "xi", "psi")


@dataclass(frozen=True)
class LatentLayout:
    total_channels: int
    invariant_channels: int
    spatial: tuple[int, int] = (LATENT_SIDE, LATENT_SIDE)

    def __post_init__(self):
        if tuple(self.spatial) != (LATENT_SIDE, LATENT_SIDE):
            raise ConfigError(f"latent spatial size must be 8x8, got {self.spatial}", "model.spatial")
        if self.invariant_channels < 1 or self.variant_channels < 1:
            raise ConfigError(
                f"need 1 <= C_iv < C_IB, got C_IB={self.total_channels}, C_iv={self.invariant_channels}",
                "model.invariant_channels",
            )

    @classmethod
    def split(cls, total_channels: int, invariant_fraction: float = 0.75) -> "LatentLayout":
        """Layout with ``round(fraction * C_IB)`` invariant channels, clipped to ``[1, C_IB - 1]``."""
        c_iv = min(max(1, round(invariant_fraction * total_channels)), total_channels - 1)
        return cls(total_channels, c_iv)

    @property
    def variant_channels(self) -> int:
        return self.total_channels - self.invariant_channels

    @property
    def cells(self) -> int:
        return self.spatial[0] * self.spatial[1]

    @property
    def d_z(self) -> int:
        return self.total_channels * self.cells

    @property
    def d_zk(self) -> int:
        return self.invariant_channels * self.cells

    @property
    def d_zv(self) -> int:
        return self.variant_channels * self.cells


@dataclass(frozen=True)
class ArchConfig:
    """Widths of the networks.  ``base_width=64`` gives ResNet-9 style widths."""

    base_width: int = 8
    extractor_width: int = 32
    head_width: int = 128
    channel_hidden: int = 0  # 0: use d_zV
    seed: int = 0

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "ArchConfig":
        presets = {
            "tiny": cls(base_width=4, extractor_width=4, head_width=8, channel_hidden=8, seed=seed),
            "desk": cls(base_width=8, extractor_width=32, head_width=128, seed=seed),
            "full": cls(base_width=64, extractor_width=64, head_width=256, seed=seed),
        }
        if name not in presets:
            raise ConfigError(f"unknown architecture preset {name!r}", "model.arch")
        return presets[name]


@dataclass
class RepresentationBundle:
    z: torch.Tensor
    z_K: torch.Tensor
    z_V: torch.Tensor
    mean: torch.Tensor
    logvar: torch.Tensor

    @property
    def moments(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.mean, self.logvar


def padded_side(h: int, w: int) -> int:
    side = max(h, w)
    if side < LATENT_SIDE:
        raise LayoutMismatchError(f"input {h}x{w} is smaller than the 8x8 latent grid")
    p = LATENT_SIDE
    while p < side:
        p *= 2
    return p


def _norm(ch: int) -> nn.GroupNorm:
    groups = math.gcd(ch, 8)
    return nn.GroupNorm(groups, ch)


def conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), _norm(c_out), nn.ReLU(inplace=True))


def down_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False), _norm(c_out), nn.ReLU(inplace=True))


def up_block(c_in: int, c_out: int) -> nn.Sequential:
    # sub-pixel upsampling: the convolution runs at the lower resolution
    return nn.Sequential(
        nn.Conv2d(c_in, 4 * c_out, 3, padding=1, bias=False),
        nn.PixelShuffle(2),
        _norm(c_out),
        nn.ReLU(inplace=True),
    )


class Residual(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(conv_block(ch, ch), conv_block(ch, ch))

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """ResNet-9 style trunk ending at 8x8 with mean and log-variance heads.

    Downsampling uses stride-2 convolutions; residual blocks sit below full
    resolution.
    """

    def __init__(self, in_channels: int, side: int, latent_channels: int, width: int):
        super().__init__()
        n_down = int(math.log2(side // LATENT_SIDE))
        layers: list[nn.Module] = [conv_block(in_channels, width)]
        ch = width
        for _ in range(n_down):
            layers += [down_block(ch, ch * 2), Residual(ch * 2)]
            ch *= 2
        if n_down == 0:
            layers.append(Residual(ch))
        self.trunk = nn.Sequential(*layers)
        self.mean = nn.Conv2d(ch, latent_channels, 1)
        self.logvar = nn.Conv2d(ch, latent_channels, 1)

    def forward(self, x):
        h = self.trunk(x)
        return self.mean(h), self.logvar(h).clamp(LOGVAR_MIN, LOGVAR_MAX)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`: 8x8 latent up to ``side`` x ``side`` in [0, 1]."""

    def __init__(self, latent_channels: int, side: int, out_channels: int, width: int):
        super().__init__()
        n_up = int(math.log2(side // LATENT_SIDE))
        ch = width * 2**n_up
        layers: list[nn.Module] = [conv_block(latent_channels, ch), Residual(ch)]
        for i in range(n_up):
            layers.append(up_block(ch, ch // 2))
            ch //= 2
            if i < n_up - 1:
                layers.append(Residual(ch))
        layers.append(nn.Conv2d(ch, out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


def shallow_cnn(c_in: int, c_out: int, width: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, width, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(width, width, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(width, c_out, 3, padding=1),
    )


def mlp3(d_in: int, d_out: int, width: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Flatten(),
        nn.Linear(d_in, width),
        nn.ReLU(inplace=True),
        nn.Linear(width, width),
        nn.ReLU(inplace=True),
        nn.Linear(width, d_out),
    )


class ChannelDecoderNet(nn.Module):
    def __init__(self, n_reals: int, d_zv: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_reals, hidden), nn.PReLU(), nn.Linear(hidden, d_zv))

    def forward(self, r):
        return self.net(r)


class ModelSet(nn.Module):
    def __init__(
        self,
        input_shape: tuple[int, int, int],
        num_classes: int,
        layout: LatentLayout,
        channel_symbols: int,
        arch: ArchConfig = ArchConfig(),
    ):
        super().__init__()
        c, h, w = input_shape
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.layout = layout
        self.channel_symbols = channel_symbols
        self.arch = arch
        self.side = padded_side(h, w)

        bw = arch.base_width
        self.theta_E = Encoder(c, self.side, layout.total_channels, bw)
        self.theta_K = shallow_cnn(layout.total_channels, layout.invariant_channels, arch.extractor_width)
        self.theta_V = shallow_cnn(layout.total_channels, layout.variant_channels, arch.extractor_width)
        self.theta_2 = Decoder(layout.total_channels, self.side, c, bw)
        self.alpha_1 = nn.Linear(layout.d_zv, 2 * channel_symbols)
        self.alpha_2 = ChannelDecoderNet(2 * channel_symbols, layout.d_zv, arch.channel_hidden or layout.d_zv)
        self.xi = mlp3(layout.d_zk, num_classes, arch.head_width)
        self.psi = mlp3(layout.d_zk, num_classes, arch.head_width)

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def group_parameters(self, *names: str) -> list[nn.Parameter]:
        return [p for n in names for p in self.group(n).parameters()]

    def pad(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise LayoutMismatchError(f"expected images of shape {self.input_shape}, got {tuple(x.shape[1:])}")
        _, h, w = self.input_shape
        top, left = (self.side - h) // 2, (self.side - w) // 2
        if h != self.side or w != self.side:
            x = F.pad(x, (left, self.side - w - left, top, self.side - h - top))
        return x.contiguous(memory_format=torch.channels_last)

    def crop(self, x: torch.Tensor) -> torch.Tensor:
        _, h, w = self.input_shape
        top, left = (self.side - h) // 2, (self.side - w) // 2
        return x[:, :, top : top + h, left : left + w]


def build_model(
    arch: ArchConfig,
    layout: LatentLayout,
    input_shape: tuple[int, int, int],
    num_classes: int,
    channel_symbols: int,
) -> ModelSet:
    """Construct a :class:`ModelSet` whose initial weights depend only on ``arch.seed``."""
    padded_side(*input_shape[1:])
    if channel_symbols < 1:
        raise ConfigError("channel_symbols must be >= 1", "channel.compression_ratio")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(arch.seed)
        m = ModelSet(tuple(input_shape), num_classes, layout, channel_symbols, arch)
    # channels-last convolutions are markedly faster on CPU for these widths
    return m.to(memory_format=torch.channels_last)


# --- forward operations ----------------------------------------------------


def encode_representation(
    m: ModelSet, x: torch.Tensor, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    """Encode images to the stochastic latent ``z``.

    In training mode ``z`` is a reparameterized draw; in eval mode it is the mean.
    """
    mean, logvar = m.theta_E(m.pad(x))
    if m.training:
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
    else:
        z = mean
    return z, (mean, logvar)


def _check_latent(m: ModelSet, z: torch.Tensor):
    want = (m.layout.total_channels, *m.layout.spatial)
    if tuple(z.shape[1:]) != want:
        raise LayoutMismatchError(f"latent must have shape (B, {want}), got {tuple(z.shape)}")


def extract_knowledge(m: ModelSet, z: torch.Tensor) -> torch.Tensor:
    _check_latent(m, z)
    return m.theta_K(z)


def extract_variant(m: ModelSet, z: torch.Tensor) -> torch.Tensor:
    _check_latent(m, z)
    return m.theta_V(z)


def represent(m: ModelSet, x: torch.Tensor, generator: torch.Generator | None = None) -> RepresentationBundle:
    z, (mean, logvar) = encode_representation(m, x, generator)
    return RepresentationBundle(z, extract_knowledge(m, z), extract_variant(m, z), mean, logvar)


def decode(m: ModelSet, z_v_hat: torch.Tensor, z_k: torch.Tensor) -> torch.Tensor:
    """Reconstruct images from the received variant part and the knowledge ``z_K``."""
    lay = m.layout
    if tuple(z_v_hat.shape[1:]) != (lay.variant_channels, *lay.spatial):
        raise LayoutMismatchError(f"z_V_hat has shape {tuple(z_v_hat.shape)}")
    if tuple(z_k.shape[1:]) != (lay.invariant_channels, *lay.spatial):
        raise LayoutMismatchError(f"z_K has shape {tuple(z_k.shape)}")
    if z_k.shape[0] != z_v_hat.shape[0]:
        raise LayoutMismatchError("z_V_hat and z_K batch sizes differ")
    return m.crop(m.theta_2(torch.cat([z_v_hat, z_k], dim=1)))


def classify_invariant(m: ModelSet, z_k: torch.Tensor) -> torch.Tensor:
    return m.xi(z_k)


def discriminate(m: ModelSet, z_k: torch.Tensor) -> torch.Tensor:
    return m.psi(z_k)


# --- checkpoints -----------------------------------------------------------

MANIFEST = "manifest.txt"


def model_manifest(m: ModelSet, step: int = 0) -> dict[str, str]:
    lay = m.layout
    out = {
        "format": "ukie-checkpoint-1",
        "input_shape": ",".join(map(str, m.input_shape)),
        "num_classes": str(m.num_classes),
        "total_channels": str(lay.total_channels),
        "invariant_channels": str(lay.invariant_channels),
        "channel_symbols": str(m.channel_symbols),
        "step": str(step),
    }
    out.update({f"arch.{k}": str(v) for k, v in asdict(m.arch).items()})
    return out


def save_checkpoint(m: ModelSet, path: str | Path, step: int = 0) -> Path:
    """Write one ``<group>.pt`` file per parameter group plus a key = value manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in GROUPS:
        torch.save(m.group(name).state_dict(), path / f"{name}.pt")
    lines = [f"{k} = {v}" for k, v in model_manifest(m, step).items()]
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> dict[str, str]:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise MissingArtifactError(f"no checkpoint manifest at {p}")
    out = {}
    for line in p.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_checkpoint(path: str | Path, expect: ModelSet | None = None) -> ModelSet:
    """Rebuild a ModelSet from ``path``.

    When ``expect`` is given, the manifest must describe the same layout,
    input shape, class count and channel size; otherwise
    :class:`LayoutMismatchError` is raised.
    """
    man = read_manifest(path)
    shape = tuple(int(v) for v in man["input_shape"].split(","))
    layout = LatentLayout(int(man["total_channels"]), int(man["invariant_channels"]))
    arch = ArchConfig(**{f.name: int(man[f"arch.{f.name}"]) for f in ArchConfig.__dataclass_fields__.values()})
    if expect is not None:
        want = model_manifest(expect)
        for key in ("input_shape", "num_classes", "total_channels", "invariant_channels", "channel_symbols"):
            if want[key] != man[key]:
                raise LayoutMismatchError(f"checkpoint {key}={man[key]} but config expects {want[key]}")
    m = build_model(arch, layout, shape, int(man["num_classes"]), int(man["channel_symbols"]))
    for name in GROUPS:
        f = Path(path) / f"{name}.pt"
        if not f.exists():
            raise MissingArtifactError(f"checkpoint group file missing: {f}")
        m.group(name).load_state_dict(torch.load(f, weights_only=True))
    return m


# --- baselines -------------------------------------------------------------


class Autoencoder(nn.Module):
    """Plain AE or VAE with the same trunk as the UKIE encoder/decoder."""

    def __init__(self, kind: str, input_shape, latent_channels: int, width: int, kl_weight: float = 1e-3):
        super().__init__()
        if kind not in ("AE", "VAE"):
            raise ConfigError(f"baseline kind must be AE or VAE, got {kind!r}", "baseline.kind")
        c, h, w = input_shape
        self.kind = kind
        self.input_shape = tuple(input_shape)
        self.side = padded_side(h, w)
        self.kl_weight = kl_weight
        self.encoder = Encoder(c, self.side, latent_channels, width)
        self.decoder = Decoder(latent_channels, self.side, c, width)

    @property
    def latent_dim(self) -> int:
        return self.encoder.mean.out_channels * LATENT_SIDE * LATENT_SIDE

    def forward(self, x, generator: torch.Generator | None = None):
        _, h, w = self.input_shape
        top, left = (self.side - h) // 2, (self.side - w) // 2
        xp = F.pad(x, (left, self.side - w - left, top, self.side - h - top)).contiguous(
            memory_format=torch.channels_last
        )
        mean, logvar = self.encoder(xp)
        if self.kind == "VAE" and self.training:
            z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=generator)
        else:
            z = mean
        x_hat = self.decoder(z)[:, :, top : top + h, left : left + w]
        return x_hat, (mean, logvar)

    def loss(self, x, generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict[str, float]]:
        x_hat, (mean, logvar) = self(x, generator)
        mse = F.mse_loss(x_hat, x)
        if self.kind == "AE":
            return mse, {"mse": mse.item()}
        kl = prior_kl(mean, logvar)
        return mse + self.kl_weight * kl, {"mse": mse.item(), "kl": kl.item()}


def prior_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), averaged over latent dims and batch."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def build_baseline(kind: str, latent_dim: int, input_shape, width: int = 8, seed: int = 0, kl_weight: float = 1e-3):
    """AE/VAE baseline whose latent has ``latent_dim`` entries (a multiple of 64)."""
    if latent_dim % (LATENT_SIDE * LATENT_SIDE):
        raise ConfigError("baseline latent_dim must be a multiple of 64", "baseline.latent_dim")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        ae = Autoencoder(kind, input_shape, latent_dim // 64, width, kl_weight)
    return ae.to(memory_format=torch.channels_last)
