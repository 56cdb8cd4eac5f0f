import numpy as np
import pytest
from scipy.stats import multivariate_normal

from instastyle.core import InvalidArgument, Rng
from instastyle.toyworld import (
    ToyConfig,
    class_log_likelihood,
    content_classify,
    content_score,
    descriptor_style,
    draw,
    draw_batch,
    make_world,
    nearest_style,
    style_classify,
    style_score,
)


@pytest.fixture(scope="module")
def world():
    return make_world(ToyConfig())


def test_world_is_deterministic(world):
    again = make_world(ToyConfig())
    for name in ("content_protos", "style_scales", "style_offsets"):
        assert np.array_equal(getattr(world, name), getattr(again, name))
    assert not np.array_equal(make_world(ToyConfig(seed=1)).content_protos, world.content_protos)


def test_world_shapes_and_separation(world):
    assert world.content_protos.shape == (4, 16)
    assert world.style_scales.shape == world.style_offsets.shape == (3, 16)
    assert np.all(world.style_scales > 0)
    means = world.class_means().reshape(-1, 16)
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert d[np.triu_indices(12, 1)].min() > 0.5
    assert np.allclose(world.class_means()[2, 1], world.class_mean(2, 1))


@pytest.mark.parametrize("kw", [dict(dim=1), dict(n_content=1), dict(n_style=1), dict(noise_sigma=0.0)])
def test_config_validation(kw):
    with pytest.raises(InvalidArgument):
        make_world(ToyConfig(**kw))


def test_draw_moments(world):
    n = 20000
    X = draw_batch(world, np.full(n, 1), np.full(n, 2), Rng(5))
    assert np.allclose(X.mean(0), world.class_mean(1, 2), atol=0.01)
    assert np.allclose(X.std(0), 0.1 * world.style_scales[2], rtol=0.05)


def test_draw_single_and_label_errors(world):
    s = draw(world, 3, 0, Rng(1))
    assert s.x.shape == (16,) and (s.content_id, s.style_id) == (3, 0)
    with pytest.raises(InvalidArgument):
        draw(world, 4, 0, Rng(1))
    with pytest.raises(InvalidArgument):
        draw_batch(world, [0], [3], Rng(1))


def test_log_likelihood_matches_scipy(world):
    x = draw_batch(world, [0, 2], [1, 2], Rng(3))
    ll = class_log_likelihood(world, x)
    D = world.dim
    for c in range(4):
        for s in range(3):
            cov = np.diag((0.1 * world.style_scales[s]) ** 2)
            ref = multivariate_normal(world.class_mean(c, s), cov).logpdf(x)
            assert np.allclose(ll[:, c, s] - D / 2 * np.log(2 * np.pi), ref, rtol=1e-12, atol=1e-9)


def test_scores_are_distributions_and_classify_own_draws(world):
    n = 600
    c, s = np.arange(n) % 4, np.arange(n) % 3
    X = draw_batch(world, c, s, Rng(8))
    ss, cs = style_score(world, X), content_score(world, X)
    assert ss.shape == (n, 3) and cs.shape == (n, 4)
    assert np.allclose(ss.sum(1), 1) and np.allclose(cs.sum(1), 1)
    assert np.mean(style_classify(world, X) == s) > 0.99
    assert np.mean(content_classify(world, X) == c) > 0.99


def test_single_latent_scores(world):
    x = world.class_mean(1, 0)
    assert style_score(world, x).shape == (3,)
    assert int(style_classify(world, x)) == 0 and int(content_classify(world, x)) == 1
    with pytest.raises(InvalidArgument):
        style_score(world, np.zeros(5))


def test_nearest_and_descriptor_style(world):
    assert nearest_style(world, world.class_means()[:, 0], [0, 1]) == 0
    assert nearest_style(world, world.class_means()[:, 1], [0, 1]) == 1
    d = descriptor_style(world, 2, [0, 1])
    assert d in (0, 1)
    ll = class_log_likelihood(world, world.class_means()[:, 2]).max(axis=-2).sum(0)
    assert ll[d] >= ll[1 - d]


def test_world_dict_round_trip(world):
    doc = world.to_dict()
    assert doc["config"]["dim"] == 16
    assert np.array_equal(np.array(doc["style_offsets"]), world.style_offsets)
