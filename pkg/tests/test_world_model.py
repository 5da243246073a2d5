import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.distributions import Normal, kl_divergence

from maxent_dreamer.verify import grad_check
from maxent_dreamer.world_model import (DiagGaussian, WorldModel, WorldModelConfig, gaussian_kl, jeffreys,
                                        smooth_l1, world_model_loss)



def _gauss(mean, std):
    return DiagGaussian(torch.tensor(mean, dtype=torch.float64), torch.tensor(std, dtype=torch.float64))


def test_kl_closed_form_unit_shift():
    assert abs(float(gaussian_kl(_gauss([1.0], [1.0]), _gauss([0.0], [1.0]))) - 0.5) < 1e-9


def test_jeffreys_closed_form_unit_shift():
    assert abs(float(jeffreys(_gauss([1.0], [1.0]), _gauss([0.0], [1.0]))) - 1.0) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kl_matches_torch_distributions(seed, dim):
    g = torch.Generator().manual_seed(seed)
    p = DiagGaussian(torch.randn(dim, generator=g, dtype=torch.float64),
                     torch.rand(dim, generator=g, dtype=torch.float64) + 0.1)
    q = DiagGaussian(torch.randn(dim, generator=g, dtype=torch.float64),
                     torch.rand(dim, generator=g, dtype=torch.float64) + 0.1)
    ref = kl_divergence(Normal(p.mean, p.std), Normal(q.mean, q.std)).sum()
    assert float(gaussian_kl(p, q)) == pytest.approx(float(ref), rel=1e-10, abs=1e-12)
    sym = ref + kl_divergence(Normal(q.mean, q.std), Normal(p.mean, p.std)).sum()
    assert float(jeffreys(p, q)) == pytest.approx(float(sym), rel=1e-10, abs=1e-12)
    assert float(gaussian_kl(p, q)) >= 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_jeffreys_exactly_symmetric(seed):
    g = torch.Generator().manual_seed(seed)
    p = DiagGaussian(torch.randn(5, generator=g), torch.rand(5, generator=g) + 0.05)
    q = DiagGaussian(torch.randn(5, generator=g), torch.rand(5, generator=g) + 0.05)
    assert torch.equal(jeffreys(p, q), jeffreys(q, p))


def test_divergences_reject_bad_inputs():
    with pytest.raises(ValueError):
        gaussian_kl(_gauss([0.0, 0.0], [1.0, 1.0]), _gauss([0.0], [1.0]))
    with pytest.raises(ValueError):
        jeffreys(_gauss([0.0], [0.0]), _gauss([0.0], [1.0]))


def test_smooth_l1_branches():
    pred = torch.tensor([0.0, 0.0, 0.0])
    target = torch.tensor([0.5, 2.0, -3.0])
    assert torch.allclose(smooth_l1(pred, target), torch.tensor([0.125, 1.5, 2.5]))


def _model(mods=True, seed=0):
    torch.manual_seed(seed)
    return WorldModel(WorldModelConfig(3, 2, deter=8, stoch=4, hidden=16, modifications=mods))


def test_heads_follow_the_flag():
    revised, base = _model(True), _model(False)
    assert revised.continue_net is not None and base.continue_net is None
    assert revised.decoder[0].in_features == 4
    assert base.decoder[0].in_features == 12
    assert not any("continue" in k for k in base.state_dict())


def test_first_observation_keeps_deterministic_state():
    m = _model()
    s0 = m.init_state(2)
    s1, post = m.observe_step(s0, None, torch.randn(2, 3))
    assert torch.equal(s1.h, s0.h)
    assert post.std.min() > 0
    s2, _ = m.observe_step(s1, torch.zeros(2, 2), torch.randn(2, 3))
    assert not torch.equal(s2.h, s1.h)


def test_imagination_outputs():
    m = _model()
    s = m.init_state(5)
    for _ in range(4):
        s, prior, r, c = m.imagine_step(s, torch.rand(5, 2) * 2 - 1)
        assert r.shape == (5,) and c.shape == (5,)
        assert torch.all((c > 0) & (c < 1))
        assert torch.isfinite(s.feat()).all()
    assert torch.equal(_model(False).continue_prob(torch.zeros(3, 12)), torch.ones(3))


def test_decoder_input_checks():
    with pytest.raises(ValueError):
        _model(True).decode(torch.zeros(1, 12))
    with pytest.raises(ValueError):
        _model(False).decode(torch.zeros(1, 4))


def _batch(B=4, L=6):
    g = torch.Generator().manual_seed(1)
    obs = torch.randn(B, L, 3, generator=g)
    act = torch.rand(B, L - 1, 2, generator=g) * 2 - 1
    rew = (torch.rand(B, L - 1, generator=g) > 0.7).float()
    done = torch.zeros(B, L - 1)
    done[0, -1] = 1
    return obs, act, rew, done


def test_loss_components():
    obs, act, rew, done = _batch()
    total, parts, states = world_model_loss(_model(True), obs, act, rew, done)
    assert set(parts) == {"recon", "reward", "termination", "kl_fixed", "jeffreys"}
    assert math.isclose(float(total.detach()), sum(parts.values()), rel_tol=1e-5)
    assert len(states) == obs.shape[1]
    base = _model(False)
    total, parts, states = world_model_loss(base, obs, act, rew, done)
    assert set(parts) == {"recon", "reward", "kl_prior"}
    # the baseline never observes o_0, so the first state is the zero state
    assert torch.equal(states[0].h, torch.zeros_like(states[0].h))
    # free nats clamp every step's KL from below
    assert parts["kl_prior"] >= base.cfg.kl_scale * base.cfg.free_nats - 1e-6


def test_loss_rejects_short_sequences():
    obs, act, rew, done = _batch(L=2)
    with pytest.raises(ValueError):
        world_model_loss(_model(), obs[:, :1], act[:, :0], rew[:, :0], done[:, :0])


def test_loss_decreases_when_overfitting():
    obs, act, rew, done = _batch()
    m = _model()
    opt = torch.optim.Adam(m.parameters(), lr=3e-3)
    g = torch.Generator().manual_seed(0)
    first = None
    for _ in range(150):
        loss = world_model_loss(m, obs, act, rew, done, g)[0]
        first = float(loss.detach()) if first is None else first
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert float(loss.detach()) < 0.5 * first


def test_world_model_gradient_matches_finite_differences():
    assert grad_check("world_model").max_rel_error < 1e-3
