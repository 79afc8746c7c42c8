"""Metrics, end-to-end link evaluation and the ablation sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from ukie.channel import ChannelConfig, run_link
from ukie.data import LabeledDataset
from ukie.errors import ConfigError
from ukie.losses import LossWeights
from ukie.models import ArchConfig, LatentLayout, ModelSet, classify_invariant, decode, represent
from ukie.semantic_memory import SemanticMemory
from ukie.training import TrainConfig, format_metric, train


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    return float((x.double() - x_hat.double()).pow(2).mean())


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err == 0:
        return math.inf
    return 10 * math.log10(peak**2 / err)


def psnr(x: torch.Tensor, x_hat: torch.Tensor, peak: float = 1.0) -> float:
    """PSNR in dB over all pixels; ``inf`` for a perfect reconstruction."""
    return psnr_from_mse(mse(x, x_hat), peak)


def representation_variance(z: torch.Tensor) -> float:
    """``(1 / (N d)) * sum_i ||z_i - mean||^2`` over a batch of N representations of size d."""
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    flat = z.reshape(z.shape[0], -1).double()
    return float((flat - flat.mean(dim=0)).pow(2).sum() / flat.numel())


def _quantile_bins(v: np.ndarray, bins: int) -> np.ndarray:
    # equal-frequency bins via ranks, so ties and scale do not matter
    ranks = np.argsort(np.argsort(v, kind="stable"), kind="stable")
    return (ranks * bins) // len(v)


def _plugin_mi(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    joint = np.zeros((bins, bins))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def mutual_information_estimate(
    z_k: torch.Tensor, z_v: torch.Tensor, bins: int = 16, projections: int = 16, seed: int = 0
) -> float:
    """Histogram MI (nats) between random 1-D projections of two batches, averaged over pairs.

    Projection ``k`` for each side is drawn from a generator seeded with
    ``(seed, k)`` so two inputs of the same size share projections.  The
    plug-in estimator is biased upward by roughly ``(bins - 1)^2 / (2N)``.
    """
    n = z_k.shape[0]
    if n == 0 or z_v.shape[0] == 0:
        raise ValueError("mutual information needs a non-empty batch")
    if z_v.shape[0] != n:
        raise ValueError("batches must have the same length")
    a = z_k.reshape(n, -1).double()
    b = z_v.reshape(n, -1).double()
    total = 0.0
    for k in range(projections):
        u = torch.randn(a.shape[1], generator=torch.Generator().manual_seed(seed * 100_003 + k), dtype=torch.float64)
        v = torch.randn(b.shape[1], generator=torch.Generator().manual_seed(seed * 100_003 + k), dtype=torch.float64)
        pa = _quantile_bins((a @ u).numpy(), bins)
        pb = _quantile_bins((b @ v).numpy(), bins)
        total += _plugin_mi(pa, pb, bins)
    return total / projections


def mi_calibration(n: int, d_k: int, d_v: int, seeds=(0, 1, 2), bins: int = 16) -> dict[str, float]:
    """Estimator values on independent Gaussians and on a copied input of the given sizes."""
    indep, dep = [], []
    for s in seeds:
        g = torch.Generator().manual_seed(1000 + s)
        zk = torch.randn(n, d_k, generator=g, dtype=torch.float64)
        zv = torch.randn(n, d_v, generator=g, dtype=torch.float64)
        indep.append(mutual_information_estimate(zk, zv, bins, seed=s))
        dep.append(mutual_information_estimate(zk, zk.clone(), bins, seed=s))
    return {"independent": max(indep), "dependent": min(dep)}


@torch.no_grad()
def encode_dataset(m: ModelSet, ds: LabeledDataset, batch_size: int = 256):
    """Eval-mode z, z_K, z_V for a whole dataset."""
    was = m.training
    m.eval()
    zs, zks, zvs = [], [], []
    for start in range(0, len(ds), batch_size):
        rep = represent(m, ds.x[start : start + batch_size])
        zs.append(rep.z)
        zks.append(rep.z_K)
        zvs.append(rep.z_V)
    m.train(was)
    return torch.cat(zs), torch.cat(zks), torch.cat(zvs)


@torch.no_grad()
def accuracy_invariant(
    m: ModelSet, memory: SemanticMemory | None, ds: LabeledDataset, mode: str = "classifier", batch_size: int = 256
) -> float:
    """Fraction of samples whose class is recovered from ``z_K``.

    ``classifier`` uses the trained label head; ``nearest_prototype`` picks
    the memory prototype with the highest cosine similarity.
    """
    if mode not in ("classifier", "nearest_prototype"):
        raise ConfigError(f"unknown accuracy mode {mode!r}", "eval.accuracy_mode")
    _, z_k, _ = encode_dataset(m, ds, batch_size)
    return accuracy_from_knowledge(m, memory, z_k, ds.y, mode)


@torch.no_grad()
def accuracy_from_knowledge(m, memory, z_k, labels, mode="classifier") -> float:
    if mode == "classifier":
        pred = classify_invariant(m, z_k).argmax(1)
    else:
        if memory is None or len(memory) == 0:
            raise ConfigError("nearest_prototype accuracy needs a populated memory", "eval.accuracy_mode")
        classes = torch.tensor(memory.classes)
        p = torch.stack([memory.lookup(c) for c in memory.classes]).reshape(len(classes), -1).to(z_k.dtype)
        flat = z_k.reshape(z_k.shape[0], -1)
        sim = (flat / flat.norm(dim=1, keepdim=True).clamp_min(1e-8)) @ (p / p.norm(dim=1, keepdim=True).clamp_min(1e-8)).T
        pred = classes[sim.argmax(1)]
    return float((pred == labels).double().mean())


# --- reports ---------------------------------------------------------------


@dataclass
class EvalRow:
    compression_ratio: float
    snr_db: float
    channel: str
    psnr_db: float
    mse: float
    accuracy: float
    var_z: float
    var_zV: float
    mi_estimate: float
    comm_cost: float
    label: str = ""


REPORT_COLUMNS = tuple(f.name for f in fields(EvalRow))


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    header: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        return self

    def write_csv(self, path: str | Path):
        """CSV with ``# key: value`` header lines (budget and provenance) before the column row."""
        with open(path, "w", newline="") as f:
            for k, v in self.header.items():
                f.write(f"# {k}: {v}\n")
            w = csv.writer(f)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([format_metric(getattr(r, c)) for c in REPORT_COLUMNS])


def read_report(path: str | Path) -> EvalReport:
    header, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            header[k.strip()] = v.strip()
        elif line.strip():
            lines.append(line)
    rows = []
    reader = csv.DictReader(lines)
    for rec in reader:
        vals = {}
        for f_ in fields(EvalRow):
            raw = rec.get(f_.name, "")
            vals[f_.name] = raw if f_.type in ("str", str) else (float(raw) if raw != "" else math.nan)
        rows.append(EvalRow(**vals))
    return EvalReport(rows, header)


@torch.no_grad()
def evaluate_link(
    m: ModelSet,
    memory: SemanticMemory,
    ds: LabeledDataset,
    channel_cfg: ChannelConfig,
    *,
    accuracy_mode: str = "classifier",
    batch_size: int = 256,
    mi_bins: int = 16,
    label: str = "",
    seed: int | None = None,
) -> EvalRow:
    """Run every test sample through encode, channel and memory-aided decode.

    The label used for the memory lookup is the error-free sideband index.
    Channel noise comes from ``channel_cfg.seed`` unless ``seed`` is given,
    so rows at different SNRs share the same underlying noise draws.
    """
    was = m.training
    m.eval()
    g = torch.Generator().manual_seed(channel_cfg.seed if seed is None else seed)
    se = 0.0
    zs, zks, zvs = [], [], []
    for start in range(0, len(ds), batch_size):
        x, y = ds.x[start : start + batch_size], ds.y[start : start + batch_size]
        rep = represent(m, x)
        link = run_link(m, rep.z_V, y, channel_cfg, g)
        knowledge = memory.lookup_batch(link.equalized.label_index).to(rep.z_K.dtype)
        x_hat = decode(m, link.z_v_hat, knowledge)
        se += float((x_hat.double() - x.double()).pow(2).sum())
        zs.append(rep.z)
        zks.append(rep.z_K)
        zvs.append(rep.z_V)
    m.train(was)
    z, z_k, z_v = torch.cat(zs), torch.cat(zks), torch.cat(zvs)
    err = se / ds.x.numel()
    return EvalRow(
        compression_ratio=m.channel_symbols / ds.dim,
        snr_db=channel_cfg.snr_db,
        channel=channel_cfg.kind,
        psnr_db=psnr_from_mse(err),
        mse=err,
        accuracy=accuracy_from_knowledge(m, memory, z_k, ds.y, accuracy_mode),
        var_z=representation_variance(z),
        var_zV=representation_variance(z_v),
        mi_estimate=mutual_information_estimate(z_k, z_v, mi_bins),
        comm_cost=float(m.channel_symbols),
        label=label,
    )


@torch.no_grad()
def baseline_psnr(ae, ds: LabeledDataset, batch_size: int = 256) -> float:
    """Test PSNR of a plain AE/VAE (the VAE decodes its posterior mean)."""
    was = ae.training
    ae.eval()
    se = 0.0
    for start in range(0, len(ds), batch_size):
        x = ds.x[start : start + batch_size]
        x_hat, _ = ae(x)
        se += float((x_hat.double() - x.double()).pow(2).sum())
    ae.train(was)
    return psnr_from_mse(se / ds.x.numel())


def snr_sweep(m, memory, ds, channel_cfg: ChannelConfig, snrs, **kw) -> EvalReport:
    rows = [evaluate_link(m, memory, ds, channel_cfg.with_snr(s), label=f"snr={s:g}", **kw) for s in snrs]
    return EvalReport(rows)


# --- sweeps ----------------------------------------------------------------


@dataclass(frozen=True)
class Budget:
    name: str
    train_samples: int
    test_samples: int
    rounds: int
    gen_iters: int
    mid_iters: int
    batch_size: int = 128

    @classmethod
    def preset(cls, name: str) -> "Budget":
        presets = {
            "smoke": cls("smoke", 512, 256, 2, 10, 10, 64),
            "desk": cls("desk", 10_000, 2_000, 20, 100, 100, 128),
            "full": cls("full", 60_000, 10_000, 100, 200, 200, 128),
        }
        if name not in presets:
            raise ConfigError(f"unknown budget {name!r}", "eval.budget")
        return presets[name]

    def header(self) -> dict[str, str]:
        return {f"budget.{k}": str(v) for k, v in asdict(self).items()}

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return replace(cfg, rounds=self.rounds, gen_iters=self.gen_iters, mid_iters=self.mid_iters, batch_size=self.batch_size)


@dataclass
class SweepSetup:
    """Everything a sweep cell needs besides the swept value."""

    train_set: LabeledDataset
    test_set: LabeledDataset
    channel: ChannelConfig
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    budget: Budget = field(default_factory=lambda: Budget.preset("smoke"))
    accuracy_mode: str = "classifier"
    eval_snr: float | None = None  # defaults to the training SNR

    def run_cell(self, layout: LatentLayout, label: str, cfg: TrainConfig | None = None) -> tuple[EvalRow, object]:
        cfg = self.budget.apply(cfg or self.train_cfg)
        tr = self.train_set.subset(min(self.budget.train_samples, len(self.train_set)))
        te = self.test_set.subset(min(self.budget.test_samples, len(self.test_set)))
        res = train(cfg, tr, self.channel, layout=layout, arch=self.arch, probe=te.subset(min(256, len(te))))
        snr = cfg.snr_train if self.eval_snr is None else self.eval_snr
        ch = replace(self.channel, kind=cfg.channel_kind, snr_db=snr)
        row = evaluate_link(res.model, res.memory, te, ch, accuracy_mode=self.accuracy_mode, label=label)
        return row, res

    def header(self) -> dict[str, str]:
        return {"dataset": self.train_set.name, **self.budget.header()}


def sweep_bottleneck(setup: SweepSetup, totals, invariant_fraction: float = 0.75) -> EvalReport:
    """One model per total latent channel count, split by ``invariant_fraction``."""
    rep = EvalReport(header={"sweep": "bottleneck", "invariant_fraction": str(invariant_fraction), **setup.header()})
    for c in totals:
        row, _ = setup.run_cell(LatentLayout.split(int(c), invariant_fraction), f"C_IB={int(c)}")
        rep.rows.append(row)
    return rep


def sweep_invariant_split(setup: SweepSetup, invariant_values, total: int = 32) -> EvalReport:
    """One model per invariant channel count at fixed ``total``.

    Rows report ``compression_ratio`` as source size over variant-representation
    size, ``d_x / d_zV``, which is the quantity this sweep varies.
    """
    rep = EvalReport(header={"sweep": "invariant_split", "total_channels": str(total), **setup.header()})
    for c_iv in invariant_values:
        layout = LatentLayout(total, int(c_iv))
        row, _ = setup.run_cell(layout, f"C_iv={int(c_iv)}")
        row.compression_ratio = split_compression_ratio(setup.train_set.shape, layout)
        rep.rows.append(row)
    return rep


def split_compression_ratio(shape, layout: LatentLayout) -> float:
    return math.prod(shape) / layout.d_zv


def sweep_coefficients(setup: SweepSetup, grid: dict[str, list[float]], layout: LatentLayout | None = None) -> EvalReport:
    """Vary one loss weight at a time around the configured weights."""
    layout = layout or LatentLayout.split(32)
    valid = {f.name for f in fields(LossWeights)}
    rep = EvalReport(header={"sweep": "coefficients", **setup.header()})
    for name, values in grid.items():
        if name not in valid:
            raise ConfigError(f"unknown loss weight {name!r}", f"eval.coefficients.{name}")
        for v in values:
            w = replace(setup.train_cfg.weights, **{name: float(v)})
            row, _ = setup.run_cell(layout, f"{name}={v:g}", replace(setup.train_cfg, weights=w))
            rep.rows.append(row)
    return rep
