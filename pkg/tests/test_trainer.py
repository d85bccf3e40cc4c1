import hashlib
import math

import numpy as np
import pytest

from dipa import backbone as B
from dipa import container
from dipa.adapter import AdapterInit, attach
from dipa.episodes import GaussianTaskSpec, make_synthetic_task
from dipa.errors import NonFiniteError, UsageError
from dipa.tensor import Rng
from dipa.trainer import (NAdam, FinetuneConfig, build_prefix_cache, finetune, full_features, nadam_step,
                          suffix_features)

from conftest import tiny_images


def scalar_nadam(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8, psi=0.004):
    """Scalar NAdam written from the textbook recursion over the running mu product."""
    m = v = 0.0
    mus = []
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        mu_t = b1 * (1 - 0.5 * 0.96 ** (t * psi))
        mu_n = b1 * (1 - 0.5 * 0.96 ** ((t + 1) * psi))
        mus.append(mu_t)
        prod_t = math.prod(mus)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = mu_n * m / (1 - prod_t * mu_n) + (1 - mu_t) * g / (1 - prod_t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def test_nadam_matches_scalar_reference():
    grad_fn = lambda th: 2.0 * 3.0 * (th - 1.5)  # d/dth of 3 (th - 1.5)^2
    ref = scalar_nadam(-2.0, grad_fn, 5, lr=0.1)
    p, state = np.array([-2.0]), None
    for t in range(5):
        p, state = nadam_step(p, grad_fn(p), state, 0.1)
        assert abs(p[0] - ref[t]) < 1e-12
    assert state.step == 5


def test_nadam_matches_torch():
    torch = pytest.importorskip("torch")
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)  # torch keeps its mu product in the default dtype
    try:
        x0 = Rng(0).normal(6)
        tp = torch.tensor(x0.copy(), requires_grad=True)
        opt = torch.optim.NAdam([tp], lr=0.05)
        p, state = x0.copy(), None
        for _ in range(10):
            opt.zero_grad()
            loss = ((tp - 1.0) ** 4).sum()
            loss.backward()
            opt.step()
            p, state = nadam_step(p, 4 * (p - 1.0) ** 3, state, 0.05)
    finally:
        torch.set_default_dtype(previous)
    assert np.max(np.abs(p - tp.detach().numpy())) < 1e-12


def test_nadam_zero_gradient_constant():
    p, state = np.array([0.3, -1.0]), None
    for _ in range(20):
        p, state = nadam_step(p, np.zeros(2), state, 5.0)
    assert p.tolist() == [0.3, -1.0]


def test_nadam_descends():
    p, _ = nadam_step(np.array([1.0, 1.0]), np.array([2.0, -3.0]), None, 0.01)
    assert p[0] < 1.0 < p[1]


def test_nadam_does_not_mutate_inputs():
    p, g = np.array([1.0]), np.array([0.5])
    _, s1 = nadam_step(p, g, None, 0.1)
    m = s1.m.copy()
    nadam_step(p, g, s1, 0.1)
    assert p[0] == 1.0 and np.array_equal(s1.m, m) and s1.step == 1


def test_nadam_errors():
    with pytest.raises(NonFiniteError):
        nadam_step(np.ones(2), np.array([1.0, np.nan]), None, 0.1)
    with pytest.raises(UsageError):
        nadam_step(np.ones(2), np.ones(3), None, 0.1)


def test_nadam_group_keeps_state_per_name():
    opt = NAdam(0.1)
    out = opt.step({"a": np.ones(2), "b": np.zeros(3)}, {"a": np.ones(2), "b": np.ones(3)})
    assert set(opt.state) == {"a", "b"} and out["b"].shape == (3,)


# -- fine-tuning ------------------------------------------------------------------

def _task(seed=0, **kw):
    return make_synthetic_task(GaussianTaskSpec(**kw), Rng(seed))


def test_iterations_zero_disallowed():
    with pytest.raises(UsageError):
        FinetuneConfig(iterations=0)


def test_zero_lr_single_step_noop(tiny, tiny_weights):
    ep = _task()
    fc = FinetuneConfig(iterations=1, lr_adapters=0.0, lr_anchors=0.0, d_t=2, d_f=2, seed=5)
    res = finetune(tiny, tiny_weights, fc, ep.support_x, ep.support_y)
    for k, v in attach(tiny, 2).named_tensors().items():
        assert np.array_equal(res.adapters.named_tensors()[k], v)
    assert np.array_equal(res.anchors.anchors, Rng(5).spawn(2).normal((5, 16)))
    feats = full_features(tiny, tiny_weights, ep.support_x, None, 2)
    from dipa.objective import proxy_anchor_loss
    assert res.loss_trace[0] == pytest.approx(float(proxy_anchor_loss(feats, ep.support_y, res.anchors.anchors)), abs=1e-12)


@pytest.mark.parametrize("loss", ["proxy_anchor", "ncc_mean"])
@pytest.mark.parametrize("d_t", [0, 1, 2])
def test_cached_matches_uncached(tiny, tiny_weights, loss, d_t):
    ep = _task(1)
    fc = FinetuneConfig(iterations=10, d_t=d_t, d_f=2, loss=loss, adapter_init="normal", seed=3)
    a = finetune(tiny, tiny_weights, fc, ep.support_x, ep.support_y)
    b = finetune(tiny, tiny_weights, fc.with_(use_cache=False), ep.support_x, ep.support_y)
    assert np.max(np.abs(a.loss_trace - b.loss_trace)) < 1e-9


def test_suffix_replay_bit_exact(tiny, tiny_weights):
    imgs = tiny_images(Rng(4), 6)
    for d_t in range(tiny.depth + 1):
        for d_f in (1, 2):
            cache = build_prefix_cache(tiny, tiny_weights, imgs, d_t, d_f)
            ad = attach(tiny, d_t)
            assert np.array_equal(suffix_features(tiny, tiny_weights, cache, ad, d_f),
                                  full_features(tiny, tiny_weights, imgs, None, d_f))


def test_cache_boundaries(tiny, tiny_weights):
    imgs = tiny_images(Rng(0), 3)
    full = build_prefix_cache(tiny, tiny_weights, imgs, tiny.depth, 2)
    assert full.boundary == 0 and full.frozen_cls == {}
    assert np.array_equal(full.tokens, B.embed(tiny, tiny_weights, imgs))
    frozen = build_prefix_cache(tiny, tiny_weights, imgs, 0, 2)
    assert frozen.boundary == tiny.depth and set(frozen.frozen_cls) == {1, 2}
    assert frozen.nbytes == frozen.tokens.nbytes + 2 * 3 * tiny.embed_dim * 8
    with pytest.raises(UsageError):
        build_prefix_cache(tiny, tiny_weights, imgs, 3, 1)


def test_frozen_backbone_trains_only_anchors(tiny, tiny_weights):
    ep = _task(2)
    res = finetune(tiny, tiny_weights, FinetuneConfig(iterations=5, d_t=0, d_f=2), ep.support_x, ep.support_y)
    assert res.adapters.named_tensors() == {}
    assert res.loss_trace[-1] < res.loss_trace[0]


def test_deterministic(tiny, tiny_weights):
    ep = _task(3)
    fc = FinetuneConfig(iterations=8, d_t=1, d_f=2, seed=11)
    a = finetune(tiny, tiny_weights, fc, ep.support_x, ep.support_y)
    b = finetune(tiny, tiny_weights, fc, ep.support_x, ep.support_y)
    assert a.loss_trace.tobytes() == b.loss_trace.tobytes()
    assert all(np.array_equal(v, b.named_tensors()[k]) for k, v in a.named_tensors().items())


def test_weights_unchanged(tiny, tiny_weights):
    digest = hashlib.sha256(container.dumps(tiny_weights)).hexdigest()
    ep = _task(4)
    finetune(tiny, tiny_weights, FinetuneConfig(iterations=5, d_t=2, d_f=2), ep.support_x, ep.support_y)
    assert hashlib.sha256(container.dumps(tiny_weights)).hexdigest() == digest


def test_only_adapters_and_anchors_change(tiny, tiny_weights):
    ep = _task(5)
    res = finetune(tiny, tiny_weights, FinetuneConfig(iterations=3, d_t=1, d_f=2), ep.support_x, ep.support_y)
    names = set(res.named_tensors())
    assert names == set(attach(tiny, 1).named_tensors()) | {"anchors", "loss_trace"}
    assert any(not np.array_equal(v, attach(tiny, 1).named_tensors()[k])
               for k, v in res.adapters.named_tensors().items())


def test_custom_anchor_init(tiny, tiny_weights):
    ep = _task(6)
    fc = FinetuneConfig(iterations=1, d_t=1, d_f=2, anchor_init="custom", lr_anchors=0.0, lr_adapters=0.0)
    res = finetune(tiny, tiny_weights, fc, ep.support_x, ep.support_y)
    feats = full_features(tiny, tiny_weights, ep.support_x, None, 2)
    means = np.stack([feats[ep.support_y == c].mean(axis=0) for c in range(5)])
    assert np.allclose(res.anchors.anchors, means, atol=1e-12)


def test_anchor_lr_five_is_stable(tiny, tiny_weights):
    ep = _task(7)
    res = finetune(tiny, tiny_weights, FinetuneConfig(d_t=2, d_f=2), ep.support_x, ep.support_y)
    assert np.all(np.isfinite(res.loss_trace)) and np.all(np.isfinite(res.anchors.anchors))
    assert len(res.loss_trace) == 80


def test_f32_finetune(tiny):
    w = B.init_random_weights(tiny, Rng(0), "lecun", "f32")
    ep = _task(8)
    res = finetune(tiny, w, FinetuneConfig(iterations=5, d_t=2, d_f=2), ep.support_x, ep.support_y)
    assert res.anchors.anchors.dtype == np.float32
    assert next(iter(res.adapters.named_tensors().values())).dtype == np.float32


def test_non_finite_loss_reports_iteration(tiny, tiny_weights, monkeypatch):
    import dipa.trainer as tr
    calls = {"n": 0}
    real = tr.proxy_anchor_loss

    def flaky(*a, **k):
        calls["n"] += 1
        out = real(*a, **k)
        return tr.G.mul(out, np.nan) if calls["n"] == 3 else out

    monkeypatch.setattr(tr, "proxy_anchor_loss", flaky)
    ep = _task(9)
    with pytest.raises(NonFiniteError, match="iteration 2"):
        finetune(tiny, tiny_weights, FinetuneConfig(iterations=5, d_t=1, d_f=2), ep.support_x, ep.support_y)


def test_support_validation(tiny, tiny_weights):
    ep = _task(0)
    with pytest.raises(UsageError):
        finetune(tiny, tiny_weights, FinetuneConfig(d_t=1, d_f=2), ep.support_x[:0], ep.support_y[:0])
    with pytest.raises(UsageError):
        finetune(tiny, tiny_weights, FinetuneConfig(d_t=1, d_f=2), ep.support_x, ep.support_y, n_way=6)
    with pytest.raises(UsageError):
        finetune(tiny, tiny_weights, FinetuneConfig(d_t=3, d_f=2), ep.support_x, ep.support_y)


def test_loss_decreases_in_95_percent_of_runs(tiny, tiny_weights):
    decreased = 0
    for seed in range(100):
        ep = _task(seed)
        res = finetune(tiny, tiny_weights, FinetuneConfig(d_t=2, d_f=2, seed=seed), ep.support_x, ep.support_y)
        decreased += res.loss_trace[-1] < res.loss_trace[0]
    assert decreased >= 95
