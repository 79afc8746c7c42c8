"""Central finite differences against autograd on a float64 tiny model."""

import pytest
import torch

from ukie.channel import ChannelConfig, run_link
from ukie.losses import (
    adversarial_loss,
    batch_prototypes,
    classification_loss,
    invariant_loss,
    reconstruction_loss,
    variant_loss,
)
from ukie.models import ArchConfig, LatentLayout, build_model, classify_invariant, decode, discriminate, represent

STEP = 1e-6
TOL = 1e-3


def make_setup():
    torch.manual_seed(0)
    m = build_model(ArchConfig(base_width=4, extractor_width=4, head_width=8, seed=1), LatentLayout(4, 2), (1, 8, 8), 4, 26)
    m = m.double().train()
    # zero-initialized norm biases put ReLU inputs exactly on the kink
    with torch.no_grad():
        for mod in m.modules():
            if isinstance(mod, torch.nn.GroupNorm):
                mod.weight.add_(0.1 * torch.randn_like(mod.weight))
                mod.bias.add_(0.1 * torch.randn_like(mod.bias))
    x = torch.rand(16, 1, 8, 8, dtype=torch.float64)
    y = torch.arange(16) % 4
    with torch.no_grad():
        moments_hat = tuple(t.clone() for t in m.theta_E(m.pad(torch.rand(16, 1, 8, 8, dtype=torch.float64))))
    return m, x, y, moments_hat


@pytest.fixture(scope="module")
def setup():
    return make_setup()


def _loss(name, m, x, y, moments_hat):
    g = torch.Generator().manual_seed(123)
    rep = represent(m, x, g)
    if name == "L_iv":
        return invariant_loss(rep.z_K, y, batch_prototypes(rep.z_K, y))
    if name == "L_v":
        return variant_loss(rep.z_V, y, 1e-4)
    if name == "L_gtc":
        return classification_loss(classify_invariant(m, rep.z_K), y)
    if name == "L_adv":
        return adversarial_loss(discriminate(m, rep.z_K), y)
    link = run_link(m, rep.z_V, y, ChannelConfig("awgn", 5.0), g)
    protos = batch_prototypes(rep.z_K, y)
    x_hat = decode(m, link.z_v_hat, torch.stack([protos[c] for c in y.tolist()]))
    return reconstruction_loss(x, x_hat, rep.moments, moments_hat, y, 1.0 if name.endswith("+") else -1.0)


CASES = [
    ("L_iv", ["theta_E", "theta_K"]),
    ("L_v", ["theta_E", "theta_V"]),
    ("L_gtc", ["theta_E", "theta_K", "xi"]),
    ("L_adv", ["theta_E", "theta_K", "psi"]),
    ("L_rec", ["theta_E", "theta_K", "theta_V", "theta_2", "alpha_1", "alpha_2"]),
    ("L_rec+", ["theta_E", "theta_K", "theta_V", "theta_2", "alpha_1", "alpha_2"]),
]


class KinkWatch:
    """Records the sign pattern of every ReLU-family input during a forward pass."""

    def __init__(self, m):
        self.signs = []
        self.handles = [
            mod.register_forward_pre_hook(lambda mod, inp: self.signs.append(inp[0].detach() > 0))
            for mod in m.modules()
            if isinstance(mod, (torch.nn.ReLU, torch.nn.PReLU))
        ]

    def take(self):
        out, self.signs = self.signs, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _shifted(m, params, dirs, scale, fn, watch):
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(scale * d)
        val = float(fn())
        for p, d in zip(params, dirs):
            p.sub_(scale * d)
    return val, watch.take()


def check_directional(setup, name, groups) -> float:
    """Asserts the FD check for every group; returns the worst relative error."""
    m, x, y, mh = setup
    worst = 0.0
    fn = lambda: _loss(name, m, x, y, mh)  # noqa: E731
    watch = KinkWatch(m)
    try:
        for group in groups:
            params = m.group_parameters(group)
            m.zero_grad()
            fn().backward()
            watch.take()
            gen = torch.Generator().manual_seed(groups.index(group))
            clean = 0
            for _ in range(20):
                dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
                up, s_up = _shifted(m, params, dirs, STEP, fn, watch)
                down, s_down = _shifted(m, params, dirs, -STEP, fn, watch)
                # a ReLU input changing sign inside the stencil makes the difference quotient meaningless
                if any(not torch.equal(a, b) for a, b in zip(s_up, s_down)):
                    continue
                analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
                numeric = (up - down) / (2 * STEP)
                rel = abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-8)
                assert rel <= TOL, (name, group, analytic, numeric)
                worst = max(worst, rel)
                clean += 1
                if clean == 3:
                    break
            assert clean == 3, f"{name}/{group}: too many kink crossings"
    finally:
        watch.close()
    return worst


@pytest.mark.parametrize("name,groups", CASES, ids=[c[0] for c in CASES])
def test_directional_derivatives(setup, name, groups):
    check_directional(setup, name, groups)


def test_untouched_groups_get_no_gradient(setup):
    m, x, y, mh = setup
    m.zero_grad(set_to_none=True)
    _loss("L_v", m, x, y, mh).backward()
    for g in ("theta_K", "xi", "psi", "theta_2", "alpha_1", "alpha_2"):
        assert all(p.grad is None for p in m.group_parameters(g)), g
