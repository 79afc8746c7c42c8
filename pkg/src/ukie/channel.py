"""Physical channel: complex symbol mapping, AWGN / Rayleigh corruption, equalization.

Frames are batched: one frame per sample, each with its own fading draw.
Everything stays differentiable so the codec can train with the channel in
the loop.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from ukie.errors import ConfigError, LayoutMismatchError
from ukie.models import ModelSet

CHANNEL_KINDS = ("awgn", "rayleigh")
ERASURE_THRESHOLD = 1e-8


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "awgn"
    snr_db: float = 20.0
    seed: int = 0
    compression_ratio: float = 0.4  # complex channel uses per real source dimension

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ConfigError(f"unknown channel kind {self.kind!r}; expected one of {CHANNEL_KINDS}", "channel.kind")
        if not self.compression_ratio > 0:
            raise ConfigError("compression_ratio must be > 0", "channel.compression_ratio")
        if math.isnan(self.snr_db):
            raise ConfigError("snr_db is NaN", "channel.snr_db")

    def symbols(self, source_dim: int) -> int:
        """Number of complex symbols ``M`` for a source of ``source_dim`` reals."""
        return max(1, round(self.compression_ratio * source_dim))

    @property
    def noise_variance(self) -> float:
        return snr_to_noise_variance(self.snr_db)

    def with_snr(self, snr_db: float) -> "ChannelConfig":
        return replace(self, snr_db=snr_db)


@dataclass
class ChannelFrame:
    """A batch of frames.

    Attributes:
        s: complex symbols, shape (B, M).
        label_index: sideband labels, shape (B,); never corrupted.
        h: complex fading coefficient per frame, shape (B,); ones for AWGN.
        noise_var: noise variance the frame went through (0 before transmission).
        erasure: bool flags for frames lost to a deep fade.
    """

    s: torch.Tensor
    label_index: torch.Tensor
    h: torch.Tensor
    noise_var: float = 0.0
    erasure: torch.Tensor | None = None

    @property
    def symbols(self) -> int:
        return self.s.shape[1]

    def __len__(self) -> int:
        return self.s.shape[0]


def snr_to_noise_variance(snr_db: float, signal_power: float = 1.0) -> float:
    if snr_db == math.inf:
        return 0.0
    return signal_power / 10 ** (snr_db / 10)


def normalize_power(s: torch.Tensor) -> torch.Tensor:
    """Scale each frame to unit average symbol power."""
    power = s.abs().pow(2).mean(dim=1, keepdim=True)
    return s / torch.sqrt(power.clamp_min(1e-12))


def channel_encode(
    m: ModelSet, z_v: torch.Tensor, labels: torch.Tensor, cfg: ChannelConfig | None = None
) -> ChannelFrame:
    """Map variant representations to power-normalized complex frames.

    When ``cfg`` is given, the model's symbol count is checked against
    ``cfg.symbols(d_x)``.
    """
    lay = m.layout
    if tuple(z_v.shape[1:]) != (lay.variant_channels, *lay.spatial):
        raise LayoutMismatchError(f"z_V has shape {tuple(z_v.shape)}")
    if cfg is not None:
        d_x = math.prod(m.input_shape)
        if cfg.symbols(d_x) != m.channel_symbols:
            raise ConfigError(
                f"model carries {m.channel_symbols} symbols but the channel config implies {cfg.symbols(d_x)}",
                "channel.compression_ratio",
            )
    reals = m.alpha_1(z_v.reshape(z_v.shape[0], -1))
    # consecutive reals form (re, im) pairs
    s = torch.view_as_complex(reals.reshape(-1, m.channel_symbols, 2).contiguous())
    s = normalize_power(s)
    h = torch.ones(s.shape[0], dtype=s.dtype)
    return ChannelFrame(s, labels, h)


def _complex_normal(shape, generator, dtype) -> torch.Tensor:
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    re = torch.randn(shape, generator=generator, dtype=real_dtype)
    im = torch.randn(shape, generator=generator, dtype=real_dtype)
    return torch.complex(re, im) / math.sqrt(2.0)


def transmit(frame: ChannelFrame, cfg: ChannelConfig, generator: torch.Generator) -> ChannelFrame:
    """Apply ``s_hat = h * s + n`` with ``n ~ CN(0, noise_var)``.

    Rayleigh fading draws one ``h ~ CN(0, 1)`` per frame.
    """
    b, msym = frame.s.shape
    dtype = frame.s.dtype
    if cfg.kind == "rayleigh":
        h = _complex_normal((b,), generator, dtype)
    else:
        h = torch.ones(b, dtype=dtype)
    var = cfg.noise_variance
    out = h[:, None] * frame.s
    if var > 0:
        out = out + math.sqrt(var) * _complex_normal((b, msym), generator, dtype)
    return ChannelFrame(out, frame.label_index, h, var, None)


def equalize(frame: ChannelFrame) -> ChannelFrame:
    """Divide out the (perfectly known) fading; deep fades become zeroed erasures."""
    erasure = frame.h.abs() < ERASURE_THRESHOLD
    safe_h = torch.where(erasure, torch.ones_like(frame.h), frame.h)
    s = torch.where(erasure[:, None], torch.zeros_like(frame.s), frame.s / safe_h[:, None])
    return ChannelFrame(s, frame.label_index, torch.ones_like(frame.h), frame.noise_var, erasure)


def channel_decode(m: ModelSet, frame: ChannelFrame) -> torch.Tensor:
    if frame.symbols != m.channel_symbols:
        raise LayoutMismatchError(f"frame has {frame.symbols} symbols, model expects {m.channel_symbols}")
    lay = m.layout
    reals = torch.view_as_real(frame.s).reshape(len(frame), -1)
    return m.alpha_2(reals).reshape(len(frame), lay.variant_channels, *lay.spatial)


@dataclass
class LinkPass:
    z_v_hat: torch.Tensor
    sent: ChannelFrame
    received: ChannelFrame
    equalized: ChannelFrame


def run_link(
    m: ModelSet,
    z_v: torch.Tensor,
    labels: torch.Tensor,
    cfg: ChannelConfig,
    generator: torch.Generator,
) -> LinkPass:
    """encode -> transmit -> equalize -> decode, keeping the intermediate frames."""
    sent = channel_encode(m, z_v, labels)
    received = transmit(sent, cfg, generator)
    eq = equalize(received)
    return LinkPass(channel_decode(m, eq), sent, received, eq)


def write_trace(path: str | Path, link: LinkPass, start_index: int = 0, append: bool = False):
    """Dump one row per frame: index, |h|, noise power, symbol MSE after equalization."""
    path = Path(path)
    new = not (append and path.exists())
    err = (link.equalized.s - link.sent.s).abs().pow(2).mean(dim=1).detach()
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["frame", "abs_h", "noise_power", "symbol_mse"])
        for i in range(len(link.sent)):
            w.writerow(
                [
                    start_index + i,
                    f"{float(link.received.h[i].abs()):.8g}",
                    f"{link.received.noise_var:.8g}",
                    f"{float(err[i]):.8g}",
                ]
            )
