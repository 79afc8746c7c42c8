"""Training losses for the invariant/variant knowledge extractor.

All functions take batched tensors and return scalar tensors that keep the
autograd graph.  Per-class quantities skip classes that are absent from the
batch (or, for the variance hinge, have fewer than two samples).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha_rec: float = 1.0
    alpha_iv: float = 0.25
    alpha_v: float = 0.1
    alpha_gtc: float = 1.0
    alpha_adv: float = 0.1
    epsilon_var: float = 1e-4

    def __post_init__(self):
        for name in ("alpha_rec", "alpha_iv", "alpha_v", "alpha_gtc", "alpha_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon_var <= 0:
            raise ValueError("epsilon_var must be > 0")


@dataclass
class PrototypeSet:
    """Per-class prototypes of the invariant representation."""

    prototypes: dict[int, torch.Tensor] = field(default_factory=dict)
    source: str = "batch"

    def __contains__(self, c: int) -> bool:
        return int(c) in self.prototypes

    def __getitem__(self, c: int) -> torch.Tensor:
        return self.prototypes[int(c)]

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def stack(self, classes=None) -> torch.Tensor:
        classes = self.classes if classes is None else classes
        return torch.stack([self.prototypes[int(c)] for c in classes])


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two representations, flattened.

    Raises ``ValueError`` when either vector is zero.
    """
    a, b = a.reshape(-1), b.reshape(-1)
    na, nb = a.norm(), b.norm()
    if float(na) == 0.0 or float(nb) == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return (a @ b) / (na * nb)


def _pairwise_cosine(x: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    # (B, d) x (K, d) -> (B, K); eps guards zero prototypes
    xn = x / x.norm(dim=1, keepdim=True).clamp_min(_EPS)
    pn = p / p.norm(dim=1, keepdim=True).clamp_min(_EPS)
    return xn @ pn.T


def batch_prototypes(z_k: torch.Tensor, labels: torch.Tensor) -> PrototypeSet:
    """Per-class mean of ``z_k`` over the samples carrying each label."""
    if z_k.shape[0] == 0:
        raise ValueError("cannot build prototypes from an empty batch")
    classes, inverse = torch.unique(labels, sorted=True, return_inverse=True)
    flat = z_k.reshape(z_k.shape[0], -1)
    sums = torch.zeros(len(classes), flat.shape[1], dtype=flat.dtype).index_add(0, inverse, flat)
    counts = torch.bincount(inverse, minlength=len(classes)).to(flat.dtype)
    means = (sums / counts[:, None]).reshape(len(classes), *z_k.shape[1:])
    return PrototypeSet({int(c): means[i] for i, c in enumerate(classes.tolist())}, "batch")


def invariant_loss(z_k: torch.Tensor, labels: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """Prototype-softmax invariance loss, in ``[-C', 0)`` for ``C'`` classes present.

    For each present class ``c`` the term is the ratio of the batch mean of
    ``exp(sim(z, p_c))`` to the batch mean of ``sum_c' exp(sim(z, p_c'))``
    over the samples of ``c``, where ``c'`` ranges over the classes present.
    The loss is the negated sum of those ratios.
    """
    if z_k.shape[0] == 0:
        raise ValueError("invariant_loss needs a non-empty batch")
    classes, inverse = torch.unique(labels, sorted=True, return_inverse=True)
    missing = [c for c in classes.tolist() if c not in protos]
    if missing:
        raise KeyError(f"no prototype for classes {missing}")
    p = protos.stack(classes.tolist()).reshape(len(classes), -1)
    e = torch.exp(_pairwise_cosine(z_k.reshape(z_k.shape[0], -1), p))  # (B, K)
    own = e.gather(1, inverse[:, None]).squeeze(1)
    total = e.sum(dim=1)
    k = len(classes)
    counts = torch.bincount(inverse, minlength=k).to(e.dtype)
    num = torch.zeros(k, dtype=e.dtype).index_add(0, inverse, own) / counts
    den = torch.zeros(k, dtype=e.dtype).index_add(0, inverse, total) / counts
    return -(num / den).sum()


def class_variances(z_v: torch.Tensor, labels: torch.Tensor) -> dict[int, torch.Tensor]:
    """Within-class spread ``E_i ||z_i - mean||^2 / d`` for classes with >= 2 samples."""
    flat = z_v.reshape(z_v.shape[0], -1)
    d = flat.shape[1]
    out = {}
    for c in torch.unique(labels, sorted=True).tolist():
        zc = flat[labels == c]
        if zc.shape[0] < 2:
            continue
        out[c] = (zc - zc.mean(dim=0, keepdim=True)).pow(2).sum(dim=1).mean() / d
    return out


def variant_loss(z_v: torch.Tensor, labels: torch.Tensor, epsilon_var: float = 1e-4) -> torch.Tensor:
    """Variance hinge ``mean_c max(0, 1 - sqrt(Var_c + eps))`` over classes with >= 2 samples.

    Returns a graph-connected zero when no class qualifies.
    """
    variances = class_variances(z_v, labels)
    if not variances:
        return z_v.sum() * 0.0
    hinge = [F.relu(1.0 - torch.sqrt(v + epsilon_var)) for v in variances.values()]
    return torch.stack(hinge).mean()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def adversarial_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the discriminator; the sign of its use is set by the training step."""
    return F.cross_entropy(logits, labels)


def gaussian_kl(
    mean_p: torch.Tensor, logvar_p: torch.Tensor, mean_q: torch.Tensor, logvar_q: torch.Tensor
) -> torch.Tensor:
    """Per-sample KL(p || q) of diagonal Gaussians, averaged over latent dims."""
    kl = 0.5 * (logvar_q - logvar_p + (logvar_p.exp() + (mean_p - mean_q).pow(2)) / logvar_q.exp() - 1.0)
    return kl.reshape(kl.shape[0], -1).mean(dim=1)


def reconstruction_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    moments_x: tuple[torch.Tensor, torch.Tensor],
    moments_xhat: tuple[torch.Tensor, torch.Tensor],
    labels: torch.Tensor,
    kl_sign: float = -1.0,
) -> torch.Tensor:
    """Class-summed ``MSE_c + kl_sign * KL_c``.

    ``MSE_c`` is the pixel MSE over the samples of class ``c`` and ``KL_c`` the
    mean KL between the encoder posterior on ``x`` and on ``x_hat``.  The
    default ``kl_sign=-1`` subtracts the KL term, so minimizing the loss
    pushes the two posteriors apart; ``+1`` is the usual VAE-style pull and
    ``0`` drops the term.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"x {tuple(x.shape)} and x_hat {tuple(x_hat.shape)} differ in shape")
    if kl_sign not in (-1, 0, 1):
        raise ValueError("kl_sign must be -1, 0 or +1")
    mse = (x - x_hat).pow(2).reshape(x.shape[0], -1).mean(dim=1)
    kl = gaussian_kl(*moments_x, *moments_xhat)
    per_sample = mse + kl_sign * kl
    classes, inverse = torch.unique(labels, sorted=True, return_inverse=True)
    counts = torch.bincount(inverse, minlength=len(classes)).to(per_sample.dtype)
    return (torch.zeros(len(classes), dtype=per_sample.dtype).index_add(0, inverse, per_sample) / counts).sum()


def generator_phase_loss(w: LossWeights, l_rec, l_iv, l_v):
    return w.alpha_rec * l_rec + w.alpha_iv * l_iv + w.alpha_v * l_v


def mid_phase_loss(w: LossWeights, l_iv, l_gtc):
    return w.alpha_iv * l_iv + w.alpha_gtc * l_gtc
