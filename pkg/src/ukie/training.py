"""Alternating two-phase optimization of the extractor and codec.

Each round runs ``gen_iters`` generator steps (reconstruction through the
channel plus the invariance and variance terms) and then ``mid_iters``
discriminator-phase iterations, each a classifier step followed by an
adversarial step.  Every step only touches its own parameter groups.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from ukie.channel import ChannelConfig, run_link
from ukie.data import Batch, LabeledDataset, iterate_batches
from ukie.errors import ConfigError, NonFiniteLossError
from ukie.losses import (
    LossWeights,
    PrototypeSet,
    adversarial_loss,
    batch_prototypes,
    classification_loss,
    generator_phase_loss,
    invariant_loss,
    mid_phase_loss,
    reconstruction_loss,
    variant_loss,
)
from ukie.models import (
    GROUPS,
    ArchConfig,
    LatentLayout,
    ModelSet,
    build_baseline,
    build_model,
    classify_invariant,
    decode,
    discriminate,
    extract_knowledge,
    encode_representation,
    represent,
    save_checkpoint,
)
from ukie.semantic_memory import SemanticMemory

GENERATOR_GROUPS = ("theta_E", "theta_K", "theta_V", "theta_2", "alpha_1", "alpha_2")
MID_GROUPS = ("theta_E", "xi")
ADV_ENCODER_GROUPS = ("theta_E", "theta_K")
METRIC_COLUMNS = ("round", "phase", "step", "L_rec", "L_iv", "L_v", "L_gtc", "L_adv", "probe_psnr", "probe_acc", "wall_time_s")

_SIGNS = {"literal": -1.0, "conventional": 1.0}
_KL_FACTORS = {**_SIGNS, "off": 0.0}


@dataclass
class TrainConfig:
    rounds: int = 20
    gen_iters: int = 100
    mid_iters: int = 100
    eta_ukie: float = 1e-3
    eta_mid: float = 1e-3
    eta_adv: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    ema_beta: float = 0.1
    seed: int = 0
    snr_train: float = 5.0
    channel_kind: str = "awgn"
    reptile_beta: float = 0.0
    reptile_scope: str = "phase"  # or "round"
    adv_sign: str = "literal"
    kl_sign: str = "literal"
    optimizer: str = "sgd"
    batch_size: int = 128
    decoder_knowledge: str = "prototype"  # or "sample"
    checkpoint_every: int = 0
    probe_size: int = 512
    log_wall_time: bool = False

    def __post_init__(self):
        for name in ("rounds", "gen_iters", "mid_iters"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"train.{name}")
        for name in ("eta_ukie", "eta_mid", "eta_adv"):
            if not getattr(self, name) >= 0:
                raise ConfigError("learning rate must be >= 0", f"train.{name}")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ConfigError("must lie in [0, 1]", "train.ema_beta")
        if not 0.0 <= self.reptile_beta <= 1.0:
            raise ConfigError("must lie in [0, 1]", "train.reptile_beta")
        if self.reptile_scope not in ("phase", "round"):
            raise ConfigError("must be 'phase' or 'round'", "train.reptile_scope")
        if self.adv_sign not in _SIGNS:
            raise ConfigError("must be 'literal' or 'conventional'", "train.adv_sign")
        if self.kl_sign not in _KL_FACTORS:
            raise ConfigError("must be 'literal', 'conventional' or 'off'", "train.kl_sign")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("must be 'sgd' or 'adam'", "train.optimizer")
        if self.decoder_knowledge not in ("prototype", "sample"):
            raise ConfigError("must be 'prototype' or 'sample'", "train.decoder_knowledge")
        if self.batch_size < 2:
            raise ConfigError("must be >= 2", "train.batch_size")

    @property
    def kl_factor(self) -> float:
        return _KL_FACTORS[self.kl_sign]


@dataclass
class StepResult:
    losses: dict[str, float]


@dataclass
class TrainState:
    """Optimizers and noise source shared by consecutive steps."""

    model: ModelSet
    cfg: TrainConfig
    channel: ChannelConfig
    memory: SemanticMemory
    generator: torch.Generator
    optimizers: dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    step: int = 0
    round: int = 0

    @classmethod
    def create(cls, model, cfg, channel, memory=None):
        g = torch.Generator().manual_seed(cfg.seed)
        st = cls(model, cfg, channel, memory if memory is not None else SemanticMemory(), g)
        adv_literal = cfg.adv_sign == "literal"
        st.optimizers = {
            "generator": _optimizer(cfg, model.group_parameters(*GENERATOR_GROUPS), cfg.eta_ukie),
            "mid": _optimizer(cfg, model.group_parameters(*MID_GROUPS), cfg.eta_mid),
            # literal: the discriminator ascends its own cross-entropy, the encoders descend it
            "adv_psi": _optimizer(cfg, model.group_parameters("psi"), cfg.eta_adv, maximize=adv_literal),
            # alpha_adv lives in the learning rate: adaptive optimizers would cancel a gradient scale
            "adv_enc": _optimizer(
                cfg,
                model.group_parameters(*ADV_ENCODER_GROUPS),
                cfg.eta_adv * cfg.weights.alpha_adv,
                maximize=not adv_literal,
            ),
        }
        return st


def _optimizer(cfg: TrainConfig, params, lr, maximize=False):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr, maximize=maximize)
    return torch.optim.SGD(params, lr=lr, maximize=maximize)


def _check_finite(losses: dict[str, torch.Tensor], st: TrainState, phase: str):
    bad = {k: v.item() for k, v in losses.items() if not torch.isfinite(v)}
    if bad:
        snap = {"round": st.round, "step": st.step, "phase": phase, **{k: v.item() for k, v in losses.items()}}
        raise NonFiniteLossError(f"non-finite loss in {phase} step {st.step}: {bad}", snap)


def merged_prototypes(z_k: torch.Tensor, labels: torch.Tensor, memory: SemanticMemory, ema_beta: float) -> PrototypeSet:
    """Batch prototypes blended with the (detached) memory; unseen classes use the batch value."""
    batch = batch_prototypes(z_k, labels)
    out = {}
    for c, p in batch.prototypes.items():
        if c in memory:
            out[c] = (1.0 - ema_beta) * memory.lookup(c).to(p.dtype) + ema_beta * p
        else:
            out[c] = p
    return PrototypeSet(out, "memory")


def generator_step(st: TrainState, batch: Batch) -> StepResult:
    """One descent step on the generator-phase loss over the encoder, extractors, decoder and codec."""
    m, cfg, w = st.model, st.cfg, st.cfg.weights
    m.train()
    m.zero_grad(set_to_none=True)
    x, y = batch.x, batch.y
    rep = represent(m, x, st.generator)
    protos = merged_prototypes(rep.z_K, y, st.memory, cfg.ema_beta)
    l_iv = invariant_loss(rep.z_K, y, protos)
    l_v = variant_loss(rep.z_V, y, w.epsilon_var)
    link = run_link(m, rep.z_V, y, st.channel, st.generator)
    if cfg.decoder_knowledge == "prototype":
        knowledge = torch.stack([protos[c] for c in y.tolist()])
    else:
        knowledge = rep.z_K
    x_hat = decode(m, link.z_v_hat, knowledge)
    with torch.no_grad():
        moments_hat = m.theta_E(m.pad(x_hat))
    l_rec = reconstruction_loss(x, x_hat, rep.moments, moments_hat, y, cfg.kl_factor)
    total = generator_phase_loss(w, l_rec, l_iv, l_v)
    losses = {"L_rec": l_rec, "L_iv": l_iv, "L_v": l_v, "L_UKIE": total}
    _check_finite(losses, st, "generator")
    total.backward()
    st.optimizers["generator"].step()
    for c, p in protos.prototypes.items():
        st.memory.update_local(c, p, st.step)
    st.step += 1
    return StepResult({k: v.item() for k, v in losses.items()})


def mid_step(st: TrainState, batch: Batch) -> StepResult:
    """Classifier-phase step: updates the encoder and the label classifier only."""
    m, cfg, w = st.model, st.cfg, st.cfg.weights
    m.train()
    m.zero_grad(set_to_none=True)
    z, _ = encode_representation(m, batch.x, st.generator)
    z_k = extract_knowledge(m, z)
    protos = merged_prototypes(z_k, batch.y, st.memory, cfg.ema_beta)
    l_iv = invariant_loss(z_k, batch.y, protos)
    l_gtc = classification_loss(classify_invariant(m, z_k), batch.y)
    total = mid_phase_loss(w, l_iv, l_gtc)
    losses = {"L_iv": l_iv, "L_gtc": l_gtc, "L_MID": total}
    _check_finite(losses, st, "mid")
    total.backward()
    st.optimizers["mid"].step()
    return StepResult({k: v.item() for k, v in losses.items()})


def adversarial_step(st: TrainState, batch: Batch) -> StepResult:
    """Discriminator vs encoder update on the discriminator's cross-entropy.

    The discriminator steps with ``eta_adv``; the encoder side with
    ``eta_adv * alpha_adv``.  Directions follow ``cfg.adv_sign``.
    """
    m = st.model
    m.train()
    m.zero_grad(set_to_none=True)
    z, _ = encode_representation(m, batch.x, st.generator)
    l_adv = adversarial_loss(discriminate(m, extract_knowledge(m, z)), batch.y)
    _check_finite({"L_adv": l_adv}, st, "adversarial")
    l_adv.backward()
    st.optimizers["adv_psi"].step()
    st.optimizers["adv_enc"].step()
    st.step += 1
    return StepResult({"L_adv": l_adv.item()})


# --- probes ----------------------------------------------------------------


@torch.no_grad()
def probe_metrics(m: ModelSet, memory: SemanticMemory, probe: LabeledDataset, channel: ChannelConfig, seed: int = 17):
    """Held-out PSNR through the channel and classifier accuracy, in eval mode."""
    was_training = m.training
    m.eval()
    g = torch.Generator().manual_seed(seed)
    se, n_pix, correct = 0.0, 0, 0
    for start in range(0, len(probe), 256):
        x, y = probe.x[start : start + 256], probe.y[start : start + 256]
        rep = represent(m, x)
        correct += int((classify_invariant(m, rep.z_K).argmax(1) == y).sum())
        if all(c in memory for c in y.tolist()):
            knowledge = memory.lookup_batch(y).to(rep.z_K.dtype)
        else:
            knowledge = rep.z_K
        x_hat = decode(m, run_link(m, rep.z_V, y, channel, g).z_v_hat, knowledge)
        se += float((x_hat.double() - x.double()).pow(2).sum())
        n_pix += x.numel()
    m.train(was_training)
    mse = se / n_pix
    psnr = math.inf if mse == 0 else 10 * math.log10(1.0 / mse)
    return psnr, correct / len(probe)


# --- outer loop ------------------------------------------------------------


def _snapshot(m: ModelSet, groups) -> dict[str, torch.Tensor]:
    return {f"{g}.{k}": v.detach().clone() for g in groups for k, v in m.group(g).state_dict().items()}


def _reptile(m: ModelSet, start: dict[str, torch.Tensor], beta: float):
    with torch.no_grad():
        for g in {k.split(".", 1)[0] for k in start}:
            sd = m.group(g).state_dict()
            for k, v in sd.items():
                s = start.get(f"{g}.{k}")
                if s is not None and v.is_floating_point():
                    v.copy_(s + beta * (v - s))


def format_metric(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.8g}"


def write_metrics(path: str | Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(METRIC_COLUMNS)
        for r in rows:
            wr.writerow([format_metric(r.get(c)) for c in METRIC_COLUMNS])


@dataclass
class TrainResult:
    model: ModelSet
    log: list[dict]
    memory: SemanticMemory
    steps: dict[str, int] = field(default_factory=dict)

    def final(self, phase: str, key: str):
        rows = [r for r in self.log if r["phase"] == phase and r.get(key) is not None]
        return rows[-1][key] if rows else None


def _mean(vals):
    return sum(vals) / len(vals) if vals else None


def train(
    cfg: TrainConfig,
    dataset: LabeledDataset,
    channel_cfg: ChannelConfig,
    *,
    layout: LatentLayout | None = None,
    arch: ArchConfig | None = None,
    model: ModelSet | None = None,
    probe: LabeledDataset | None = None,
    out_dir: str | Path | None = None,
    memory: SemanticMemory | None = None,
) -> TrainResult:
    """Run the alternating loop for ``cfg.rounds`` rounds.

    Writes ``metrics.csv`` (and checkpoints every ``cfg.checkpoint_every``
    rounds) into ``out_dir`` when given.  On a non-finite loss the last
    checkpoint on disk is left untouched and :class:`NonFiniteLossError`
    propagates with its path in the snapshot.
    """
    channel_cfg = replace(channel_cfg, kind=cfg.channel_kind, snr_db=cfg.snr_train)
    if model is None:
        layout = layout or LatentLayout.split(32)
        arch = arch or ArchConfig.preset("desk", seed=cfg.seed)
        m_sym = channel_cfg.symbols(dataset.dim)
        model = build_model(arch, layout, dataset.shape, dataset.num_classes, m_sym)
    if probe is None:
        probe = dataset.subset(min(cfg.probe_size, len(dataset)))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    st = TrainState.create(model, cfg, channel_cfg, memory)
    batches = iterate_batches(dataset, cfg.batch_size, cfg.seed)
    log: list[dict] = []
    counts = {"generator": 0, "mid": 0, "adversarial": 0}
    t0 = time.perf_counter()
    last_ckpt = None
    use_reptile = cfg.reptile_beta > 0

    def emit(phase, losses):
        psnr, acc = probe_metrics(model, st.memory, probe, channel_cfg, cfg.seed + 17)
        row = {"round": st.round, "phase": phase, "step": st.step, **losses, "probe_psnr": psnr, "probe_acc": acc}
        if cfg.log_wall_time:
            row["wall_time_s"] = time.perf_counter() - t0
        log.append(row)
        if out is not None:
            write_metrics(out / "metrics.csv", log)

    try:
        for r in range(cfg.rounds):
            st.round = r
            round_start = _snapshot(model, GROUPS) if use_reptile and cfg.reptile_scope == "round" else None

            start = _snapshot(model, GENERATOR_GROUPS) if use_reptile and cfg.reptile_scope == "phase" else None
            acc = {"L_rec": [], "L_iv": [], "L_v": []}
            for _ in range(cfg.gen_iters):
                res = generator_step(st, next(batches))
                counts["generator"] += 1
                for k in acc:
                    acc[k].append(res.losses[k])
            if start is not None:
                _reptile(model, start, cfg.reptile_beta)
            emit("generator", {k: _mean(v) for k, v in acc.items()})

            start = _snapshot(model, MID_GROUPS + ("psi", "theta_K")) if use_reptile and cfg.reptile_scope == "phase" else None
            acc = {"L_iv": [], "L_gtc": [], "L_adv": []}
            for _ in range(cfg.mid_iters):
                b = next(batches)
                res = mid_step(st, b)
                counts["mid"] += 1
                adv = adversarial_step(st, b)
                counts["adversarial"] += 1
                acc["L_iv"].append(res.losses["L_iv"])
                acc["L_gtc"].append(res.losses["L_gtc"])
                acc["L_adv"].append(adv.losses["L_adv"])
            if start is not None:
                _reptile(model, start, cfg.reptile_beta)
            if round_start is not None:
                _reptile(model, round_start, cfg.reptile_beta)
            emit("mid", {k: _mean(v) for k, v in acc.items()})

            if out is not None and cfg.checkpoint_every and (r + 1) % cfg.checkpoint_every == 0:
                last_ckpt = save_checkpoint(model, out / "checkpoints" / f"round_{r + 1:04d}", st.step)
                st.memory.save(last_ckpt / "memory.pt")
    except NonFiniteLossError as e:
        e.snapshot["last_checkpoint"] = str(last_ckpt) if last_ckpt else ""
        raise

    if out is not None:
        final = save_checkpoint(model, out / "checkpoints" / "final", st.step)
        st.memory.save(final / "memory.pt")
    return TrainResult(model, log, st.memory, counts)


# --- baselines -------------------------------------------------------------


@dataclass
class BaselineResult:
    model: torch.nn.Module
    losses: list[float]


def train_baseline(
    kind: str,
    dataset: LabeledDataset,
    latent_dim: int,
    steps: int,
    *,
    batch_size: int = 128,
    lr: float = 1e-3,
    width: int = 8,
    seed: int = 0,
    optimizer: str = "adam",
) -> BaselineResult:
    """Train a plain AE/VAE for ``steps`` batches on the same batch stream as :func:`train`."""
    ae = build_baseline(kind, latent_dim, dataset.shape, width=width, seed=seed)
    params = list(ae.parameters())
    opt = torch.optim.Adam(params, lr=lr) if optimizer == "adam" else torch.optim.SGD(params, lr=lr)
    g = torch.Generator().manual_seed(seed)
    batches = iterate_batches(dataset, batch_size, seed)
    losses = []
    ae.train()
    for _ in range(steps):
        b = next(batches)
        opt.zero_grad(set_to_none=True)
        loss, _ = ae.loss(b.x, g)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"{kind} baseline loss became {float(loss)}", {"step": len(losses)})
        loss.backward()
        opt.step()
        losses.append(loss.item())
    ae.eval()
    return BaselineResult(ae, losses)
