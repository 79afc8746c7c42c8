"""Per-user prototype memory and the thresholded broadcast protocol.

Each user keeps a prototype per class.  At every ``tau``-th step it compares
its memory to a reference (by default the value it last broadcast) and only
sends the difference when the norm of that difference exceeds ``kappa``.
Receivers fold incoming differences into their own memory.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ukie.errors import ColdStartError, ConfigError

BASELINES = ("last_broadcast", "rolling")
GRANULARITIES = ("full", "per_class")
MERGE_MODES = ("add", "replace")


@dataclass
class MemoryEntry:
    prototype: torch.Tensor
    last_broadcast: torch.Tensor
    updated_at: int = 0
    # value at the previous protocol check, used by the rolling baseline
    checked: torch.Tensor | None = None


@dataclass
class BroadcastDecision:
    broadcast: bool
    deltas: dict[int, torch.Tensor]
    values: dict[int, torch.Tensor]
    norm: float
    sender: int = 0
    step: int = 0

    @property
    def classes_sent(self) -> int:
        return len(self.deltas) if self.broadcast else 0


class SemanticMemory:
    """Label -> prototype store for one user.

    Args:
        user_id: index of the owning user.
        kappa: broadcast threshold on the delta norm (``inf`` never broadcasts).
        tau: steps between protocol checks.
        baseline: ``last_broadcast`` diffs against the last sent value,
            ``rolling`` against the value at the previous check.
        granularity: ``full`` thresholds the norm over all classes at once,
            ``per_class`` decides for every class separately.
        merge: ``add`` applies received deltas, ``replace`` overwrites with
            the sender's values.
    """

    def __init__(
        self,
        user_id: int = 0,
        kappa: float = 0.0,
        tau: int = 1,
        baseline: str = "last_broadcast",
        granularity: str = "full",
        merge: str = "add",
    ):
        if not kappa >= 0:
            raise ConfigError("kappa must be >= 0", "protocol.kappa")
        if int(tau) != tau or tau < 1:
            raise ConfigError("tau must be a positive integer", "protocol.tau")
        if baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}", "protocol.baseline")
        if granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}", "protocol.granularity")
        if merge not in MERGE_MODES:
            raise ConfigError(f"merge must be one of {MERGE_MODES}", "protocol.merge")
        self.user_id = user_id
        self.kappa = float(kappa)
        self.tau = int(tau)
        self.baseline = baseline
        self.granularity = granularity
        self.merge = merge
        self.entries: dict[int, MemoryEntry] = {}

    @classmethod
    def from_prototypes(cls, prototypes: dict[int, torch.Tensor], t: int = 0, **kw) -> "SemanticMemory":
        """Memory whose entries (and broadcast references) all start at ``prototypes``."""
        mem = cls(**kw)
        for c, p in prototypes.items():
            p = p.detach().clone()
            mem.entries[int(c)] = MemoryEntry(p, p.clone(), t, p.clone())
        return mem

    def __contains__(self, c) -> bool:
        return int(c) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries)

    def lookup(self, c: int) -> torch.Tensor:
        try:
            return self.entries[int(c)].prototype
        except KeyError:
            raise ColdStartError(f"user {self.user_id} has no prototype for class {int(c)}") from None

    def lookup_batch(self, labels: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.lookup(c) for c in labels.tolist()])

    def prototypes(self) -> dict[int, torch.Tensor]:
        return {c: e.prototype for c, e in sorted(self.entries.items())}

    def flat(self) -> torch.Tensor:
        """All prototypes concatenated in class order."""
        return torch.cat([self.entries[c].prototype.reshape(-1) for c in self.classes])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for c in self.classes:
            e = self.entries[c]
            h.update(str(c).encode())
            for t in (e.prototype, e.last_broadcast):
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
            h.update(str(e.updated_at).encode())
        return h.hexdigest()

    def update_local(self, c: int, new_prototype: torch.Tensor, t: int, ema_beta: float = 1.0):
        """Blend ``new_prototype`` into class ``c``: ``(1 - beta) * old + beta * new``.

        A class seen for the first time is stored as is, with a zero broadcast
        reference so that the next broadcast carries the whole prototype.
        """
        if not 0.0 <= ema_beta <= 1.0:
            raise ConfigError("ema_beta must lie in [0, 1]", "train.ema_beta")
        c = int(c)
        new_prototype = new_prototype.detach()
        e = self.entries.get(c)
        if e is None:
            zero = torch.zeros_like(new_prototype)
            self.entries[c] = MemoryEntry(new_prototype.clone(), zero, t, zero.clone())
            return self
        if ema_beta == 1.0:
            e.prototype = new_prototype.clone()
        elif ema_beta > 0.0:
            e.prototype = (1.0 - ema_beta) * e.prototype + ema_beta * new_prototype
        e.updated_at = t
        return self

    def _reference(self, e: MemoryEntry) -> torch.Tensor:
        return e.checked if self.baseline == "rolling" else e.last_broadcast

    def should_broadcast(self, t: int) -> BroadcastDecision:
        """Decide whether to broadcast at check step ``t`` and commit the outcome.

        On a broadcast the sent classes' ``last_broadcast`` becomes their
        current value.  Must only be called when ``t % tau == 0``.
        """
        if t % self.tau != 0:
            raise ValueError(f"step {t} is not a protocol check (tau={self.tau})")
        deltas = {c: self.entries[c].prototype - self._reference(self.entries[c]) for c in self.classes}
        if self.granularity == "full":
            norm = float(torch.cat([d.reshape(-1) for d in deltas.values()]).double().norm()) if deltas else 0.0
            send = list(deltas) if norm > self.kappa else []
        else:
            norms = {c: float(d.double().norm()) for c, d in deltas.items()}
            send = [c for c in deltas if norms[c] > self.kappa]
            norm = math.sqrt(sum(norms[c] ** 2 for c in send)) if send else max(norms.values(), default=0.0)
        decision = BroadcastDecision(
            bool(send),
            {c: deltas[c].clone() for c in send},
            {c: self.entries[c].prototype.clone() for c in send},
            norm,
            self.user_id,
            t,
        )
        for c in send:
            self.entries[c].last_broadcast = self.entries[c].prototype.clone()
        for c in self.classes:
            self.entries[c].checked = self.entries[c].prototype.clone()
        return decision

    def apply_remote(self, decision: BroadcastDecision, t: int):
        """Fold another user's broadcast into this memory.

        In ``add`` mode the delta is also added to this user's references so
        received changes are not echoed back in its own next broadcast.
        """
        if not decision.broadcast:
            return self
        for c, d in decision.deltas.items():
            e = self.entries.get(c)
            if self.merge == "replace":
                v = decision.values[c].clone()
                if e is None:
                    self.entries[c] = MemoryEntry(v, v.clone(), t, v.clone())
                else:
                    e.prototype, e.last_broadcast, e.checked, e.updated_at = v, v.clone(), v.clone(), t
                continue
            if e is None:
                zero = torch.zeros_like(d)
                e = self.entries[c] = MemoryEntry(zero, zero.clone(), t, zero.clone())
            e.prototype = e.prototype + d
            e.last_broadcast = e.last_broadcast + d
            e.checked = e.checked + d
            e.updated_at = t
        return self

    def state_dict(self) -> dict:
        return {
            "config": {
                "user_id": self.user_id,
                "kappa": self.kappa,
                "tau": self.tau,
                "baseline": self.baseline,
                "granularity": self.granularity,
                "merge": self.merge,
            },
            "entries": {
                c: {"prototype": e.prototype, "last_broadcast": e.last_broadcast, "updated_at": e.updated_at}
                for c, e in self.entries.items()
            },
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "SemanticMemory":
        mem = cls(**state["config"])
        for c, e in state["entries"].items():
            p = e["prototype"]
            mem.entries[int(c)] = MemoryEntry(p, e["last_broadcast"], e["updated_at"], p.clone())
        return mem

    def save(self, path: str | Path):
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path: str | Path) -> "SemanticMemory":
        return cls.from_state_dict(torch.load(path, weights_only=True))


@dataclass
class CommLedger:
    broadcasts_sent: list[int]
    broadcasts_suppressed: list[int]
    scalars_transmitted: list[int]

    @classmethod
    def for_users(cls, n: int) -> "CommLedger":
        return cls([0] * n, [0] * n, [0] * n)

    def record(self, decision: BroadcastDecision, d_zk: int):
        j = decision.sender
        if decision.broadcast:
            self.broadcasts_sent[j] += 1
            self.scalars_transmitted[j] += decision.classes_sent * d_zk
        else:
            self.broadcasts_suppressed[j] += 1

    @property
    def total_scalars(self) -> int:
        return sum(self.scalars_transmitted)

    @property
    def total_broadcasts(self) -> int:
        return sum(self.broadcasts_sent)


# --- network simulation ------------------------------------------------------

DRIFT_MODELS = ("linear", "random_walk", "staggered", "encoder")


@dataclass
class DriftConfig:
    """Synthetic prototype drift.

    ``linear`` moves each user along a fixed unit direction (over the whole
    memory) by ``rate`` per step.  ``random_walk`` takes Gaussian steps of
    expected norm ``rate``.  ``staggered`` is linear drift where user ``j``
    drifts at ``rate * (j + 1) / J`` and only from step ``j + 1`` on.
    """

    model: str = "linear"
    rate: float = 0.01
    num_classes: int = 4
    proto_shape: tuple[int, ...] = (2, 8, 8)
    init_scale: float = 1.0

    def __post_init__(self):
        if self.model not in DRIFT_MODELS:
            raise ConfigError(f"drift model must be one of {DRIFT_MODELS}", "protocol.drift")
        if self.rate < 0:
            raise ConfigError("rate must be >= 0", "protocol.rate")

    @property
    def numel(self) -> int:
        return math.prod(self.proto_shape)


@dataclass
class SimEvent:
    step: int
    user: int
    event: str
    delta_norm: float
    cumulative_scalars: int


@dataclass
class SimResult:
    memories: list[SemanticMemory]
    ledger: CommLedger
    events: list[SimEvent] = field(default_factory=list)
    divergence: list[tuple[int, float]] = field(default_factory=list)

    def write_events(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "user", "event", "delta_norm", "cumulative_scalars"])
            for e in self.events:
                w.writerow([e.step, e.user, e.event, f"{e.delta_norm:.8g}", e.cumulative_scalars])

    def write_divergence(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "max_pairwise_distance"])
            for t, d in self.divergence:
                w.writerow([t, f"{d:.8g}"])

    def write_ledger(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["user", "broadcasts_sent", "broadcasts_suppressed", "scalars_transmitted"])
            for j in range(len(self.memories)):
                w.writerow(
                    [j, self.ledger.broadcasts_sent[j], self.ledger.broadcasts_suppressed[j], self.ledger.scalars_transmitted[j]]
                )


def initial_prototypes(drift: DriftConfig, seed: int) -> dict[int, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    return {
        c: drift.init_scale * torch.randn(drift.proto_shape, generator=g, dtype=torch.float64)
        for c in range(drift.num_classes)
    }


def drift_increments(drift: DriftConfig, users: int, horizon: int, seed: int) -> torch.Tensor:
    """Per-step memory increments, shape ``(horizon, users, num_classes, *proto_shape)``.

    Row ``t - 1`` holds the increment applied at step ``t``.
    """
    g = torch.Generator().manual_seed(seed + 1)
    shape = (drift.num_classes, *drift.proto_shape)
    out = torch.zeros((horizon, users, *shape), dtype=torch.float64)
    if drift.model == "random_walk":
        dim = drift.num_classes * drift.numel
        steps = torch.randn((horizon, users, *shape), generator=g, dtype=torch.float64)
        return steps * (drift.rate / math.sqrt(dim))
    for j in range(users):
        u = torch.randn(shape, generator=g, dtype=torch.float64)
        u = u / u.norm()
        if drift.model == "staggered":
            out[j:, j] = u * (drift.rate * (j + 1) / users)
        else:
            out[:, j] = u * drift.rate
    return out


def max_pairwise_distance(memories: list[SemanticMemory]) -> float:
    flats = [m.flat() for m in memories]
    best = 0.0
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            best = max(best, float((flats[i] - flats[j]).norm()))
    return best


def run_network_sim(
    users: int,
    drift: DriftConfig,
    kappa: float,
    tau: int,
    horizon: int,
    seed: int = 0,
    *,
    baseline: str = "last_broadcast",
    granularity: str = "full",
    merge: str = "add",
    increments: torch.Tensor | None = None,
    log_local: bool = True,
) -> SimResult:
    """Deterministic event loop over ``horizon`` steps.

    Every step: each user applies its local drift; on check steps every user
    decides (all decisions are taken on the post-drift state before any
    delivery); then broadcasts are delivered in sender order to every other
    user.  ``increments`` overrides the synthetic drift, e.g. with increments
    recorded from trained encoders (see :func:`encoder_increments`).
    """
    if users < 1:
        raise ConfigError("need at least one user", "protocol.users")
    if horizon < 0:
        raise ConfigError("horizon must be >= 0", "protocol.horizon")
    init = initial_prototypes(drift, seed)
    mems = [
        SemanticMemory.from_prototypes(
            init, user_id=j, kappa=kappa, tau=tau, baseline=baseline, granularity=granularity, merge=merge
        )
        for j in range(users)
    ]
    if increments is None:
        if drift.model == "encoder":
            raise ConfigError("encoder drift needs recorded increments", "protocol.drift")
        increments = drift_increments(drift, users, horizon, seed)
    if increments.shape[:2] != (horizon, users):
        raise ConfigError(f"increments must start with ({horizon}, {users})", "protocol.drift")
    d_zk = drift.numel
    ledger = CommLedger.for_users(users)
    res = SimResult(mems, ledger)

    def log(t, j, kind, norm):
        res.events.append(SimEvent(t, j, kind, norm, ledger.total_scalars))

    for t in range(1, horizon + 1):
        for j, mem in enumerate(mems):
            inc = increments[t - 1, j]
            for c in range(drift.num_classes):
                mem.update_local(c, mem.lookup(c) + inc[c], t, 1.0)
            if log_local:
                log(t, j, "local_update", float(inc.norm()))
        if t % tau == 0:
            decisions = []
            for mem in mems:
                dec = mem.should_broadcast(t)
                ledger.record(dec, d_zk)
                log(t, dec.sender, "broadcast" if dec.broadcast else "suppress", dec.norm)
                decisions.append(dec)
            for dec in decisions:
                if not dec.broadcast:
                    continue
                for j, mem in enumerate(mems):
                    if j == dec.sender:
                        continue
                    mem.apply_remote(dec, t)
                    log(t, j, "merge", dec.norm)
        res.divergence.append((t, max_pairwise_distance(mems)))
    return res


def encoder_increments(models: list, shards: list, drift: DriftConfig, horizon: int, batch_size: int, seed: int = 0):
    """Increments driven by trained encoders, one model and data shard per user.

    Each user tracks an EMA (beta 0.1) of its encoder's batch prototypes over
    its shard; the increment at step ``t`` is the change of that EMA.
    ``drift.proto_shape`` and ``drift.num_classes`` must match the encoders.
    """
    from ukie.data import iterate_batches
    from ukie.losses import batch_prototypes
    from ukie.models import represent

    out = torch.zeros((horizon, len(models), drift.num_classes, *drift.proto_shape), dtype=torch.float64)
    for j, (m, shard) in enumerate(zip(models, shards)):
        m.eval()
        it = iterate_batches(shard, batch_size, seed + j)
        ema = None
        with torch.no_grad():
            for t in range(horizon + 1):
                b = next(it)
                protos = batch_prototypes(represent(m, b.x).z_K.double(), b.y)
                cur = torch.stack(
                    [protos[c] if c in protos else (ema[c] if ema is not None else torch.zeros(drift.proto_shape, dtype=torch.float64)) for c in range(drift.num_classes)]
                )
                new = cur if ema is None else 0.9 * ema + 0.1 * cur
                if t > 0:
                    out[t - 1, j] = new - ema
                ema = new
    return out
