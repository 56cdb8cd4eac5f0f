import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instastyle.core import InvalidArgument, Rng, split
from instastyle.ddim import sample
from instastyle.denoiser import BASE_PARAM_NAMES, GuidanceConfig, Model, TokenTable, Vocab, make_adapters
from instastyle.toyworld import content_classify, draw_batch, style_classify
from instastyle.train import (
    Adam,
    RefineSet,
    TrainConfig,
    held_out_captions,
    loss,
    pretrain,
    refine,
    world_sampler,
)

from .oracles import gradient_check_setup, gradient_errors


@pytest.mark.parametrize("kw", [dict(iters=-1), dict(lr=0.0), dict(batch=0), dict(p_uncond=1.0)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        TrainConfig(**kw).validate()


def test_adam_step_matches_formula():
    cfg = TrainConfig(lr=0.1)
    p = {"x": np.array([1.0, -2.0])}
    g = np.array([0.5, -4.0])
    opt = Adam(cfg)
    opt.step(p, {"x": g})
    m, v = 0.1 * g / 0.1, 0.001 * g * g / 0.001
    assert np.allclose(p["x"], np.array([1.0, -2.0]) - 0.1 * m / (np.sqrt(v) + 1e-8), rtol=1e-14)


def test_loss_zero_for_perfect_predictor(sd1000):
    model, _, z0, ids, t, _ = gradient_check_setup()
    model.params.head[:] = 0.0
    model.params.head_bias[:] = 0.0
    value, _ = loss(model, sd1000, z0, ids, t, np.zeros_like(z0))
    assert value == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 1000))
def test_loss_non_negative(seed, t):
    model, s, z0, ids, _, _ = gradient_check_setup()
    eps = np.random.default_rng(seed).normal(size=z0.shape) * 3
    assert loss(model, s, z0, ids, t, eps)[0] >= 0.0


def test_loss_input_errors(sd1000):
    model, s, z0, ids, t, eps = gradient_check_setup()
    with pytest.raises(InvalidArgument):
        loss(model, s, z0, ids, t, eps[:, :3])
    with pytest.raises(InvalidArgument):
        loss(model, s, z0, ids, 0, eps)


def test_gradients_match_finite_differences():
    errs = gradient_errors(n_coords=20)
    for name, e in errs.items():
        assert e.max() < 1e-4, name


def _small_refine_setup(seed=0):
    model, s, z0, ids, _, _ = gradient_check_setup(seed)
    model.adapters = make_adapters(Rng(seed), rank=4)
    L = model.table.vocab.learned(0)
    data = RefineSet(z0, np.stack([ids[:, 0], np.full(len(ids), L)], axis=1))
    return model, s, data


def test_refine_zero_iterations_is_identity():
    model, s, data = _small_refine_setup()
    out = refine(model, data, s, TrainConfig(iters=0, batch=2, p_uncond=0.0), Rng(1))
    assert np.array_equal(out.table.embeddings, model.table.embeddings)
    for k in ("k", "v"):
        assert np.array_equal(out.adapters[k].A, model.adapters[k].A)
        assert np.array_equal(out.adapters[k].B, model.adapters[k].B)


def test_refine_updates_only_token_and_adapters():
    model, s, data = _small_refine_setup()
    before = {k: v.copy() for k, v in model.params.as_dict().items()}
    table_before = model.table.embeddings.copy()
    adapters_before = {k: (a.A.copy(), a.B.copy()) for k, a in model.adapters.items()}
    out = refine(model, data, s, TrainConfig(iters=20, batch=4, p_uncond=0.0), Rng(1))
    for name in BASE_PARAM_NAMES:
        assert np.array_equal(getattr(out.params, name), before[name])
        assert np.array_equal(getattr(model.params, name), before[name])
    L = model.table.vocab.learned(0)
    changed = np.any(out.table.embeddings != table_before, axis=1)
    assert changed[L] and changed.sum() == 1
    assert np.array_equal(model.table.embeddings, table_before)
    for k in ("k", "v"):
        assert not np.array_equal(out.adapters[k].B, adapters_before[k][1])
        assert np.array_equal(model.adapters[k].B, adapters_before[k][1])


def test_refine_is_deterministic():
    model, s, data = _small_refine_setup()
    cfg = TrainConfig(iters=10, batch=3, p_uncond=0.0)
    a, b = refine(model, data, s, cfg, Rng(4)), refine(model, data, s, cfg, Rng(4))
    assert np.array_equal(a.table.embeddings, b.table.embeddings)
    assert np.array_equal(a.adapters["v"].A, b.adapters["v"].A)


def test_refine_errors():
    model, s, data = _small_refine_setup()
    with pytest.raises(InvalidArgument):
        RefineSet(np.zeros((0, 16)), np.zeros((0, 2)))
    with pytest.raises(InvalidArgument):
        refine(Model(model.params, model.table), data, s)
    wrong = RefineSet(data.X, np.stack([data.ids[:, 0], np.full(len(data), model.table.vocab.style(0))], axis=1))
    with pytest.raises(InvalidArgument):
        refine(model, wrong, s)


def test_world_sampler_captions(ctx):
    vocab = Vocab(4, 3)
    cap = held_out_captions(ctx.world, (2,))
    sampler = world_sampler(ctx.world, vocab, range(3), cap)
    X, ids = sampler(Rng(3), 300)
    styles = style_classify(ctx.world, X)
    assert set(ids[:, 1] - 4) <= {0, 1}
    held = styles == 2
    assert held.any() and np.all(ids[held, 1] == 4 + cap[2])
    assert np.all(ids[~held, 1] - 4 == styles[~held])
    assert np.array_equal(ids[:, 0], content_classify(ctx.world, X))


def test_pretrain_short_run_scoping_and_determinism(ctx, sd1000):
    cfg = TrainConfig(iters=30, batch=8)
    a = pretrain(ctx.world, sd1000, cfg, Rng(2), n_learned=2)
    b = pretrain(ctx.world, sd1000, cfg, Rng(2), n_learned=2)
    assert np.array_equal(a.params.Wq, b.params.Wq)
    init = TokenTable.init(a.table.vocab, split(Rng(2), 101))
    v = a.table.vocab
    for row in v.learned_ids + [v.null]:
        assert np.array_equal(a.table.embeddings[row], init.embeddings[row])
    assert not np.array_equal(a.table.embeddings[v.style(0)], init.embeddings[v.style(0)])


def test_pretrain_loss_halves(pretrained):
    h = np.asarray(pretrained.history)
    assert len(h) == 20_000
    assert h[-200:].mean() <= 0.5 * h[:200].mean()


def _conditional_accuracy(ctx, model, accept):
    n = 400
    c, s = np.arange(n) % 4, (np.arange(n) // 4) % 2
    P = model.table.embeddings[np.stack([c, 4 + s], axis=1)]
    X = sample(model, ctx.sched, ctx.grid, Rng(9).generator.standard_normal((n, 16)), P, GuidanceConfig(2.5))
    got_c, got_s = content_classify(ctx.world, X), style_classify(ctx.world, X)
    return np.mean((got_c == c) & np.array([g in accept[int(p)] for g, p in zip(got_s, s)]))


def test_seen_only_pretraining_follows_prompts(ctx):
    model = pretrain(ctx.world, ctx.sched, ctx.cfg.pretrain, split(ctx.root, 1), held_out=(2,), show_held_out=False)
    assert _conditional_accuracy(ctx, model, {0: {0}, 1: {1}}) >= 0.8


def test_captioned_pretraining_follows_prompts(ctx, pretrained):
    # a seen-style token also covers the held-out style it captions
    cap = held_out_captions(ctx.world, (2,))
    accept = {s: {s} | {h for h, d in cap.items() if d == s} for s in (0, 1)}
    assert _conditional_accuracy(ctx, pretrained.model, accept) >= 0.8
