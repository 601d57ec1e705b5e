import math

import numpy as np
import pytest

from cardioguard import criteria, datagen, vae
from cardioguard.errors import EmptyDataset, ShapeMismatch
from cardioguard.grid import LabelMap, View

ARCH = vae.Architecture(view="sa", canvas=32, widths=(4, 8, 8, 8))


@pytest.fixture(scope="module")
def data():
    return datagen.generate("sa", 12, seed=40, size=32)


@pytest.fixture(scope="module")
def small(data):
    return vae.train(data, vae.TrainConfig(epochs=2, batch_size=4, seed=3), arch=ARCH)


def test_shapes_and_probabilities(small, data):
    post = vae.encode(small, data[0][0])
    assert post.mu.shape == (32,) and post.logvar.shape == (32,)
    batch = vae.encode(small, [m for m, _ in data[:5]])
    assert batch.mu.shape == (5, 32)
    probs, lmap = vae.decode(small, post.mu)
    assert probs.shape == (4, 32, 32)
    assert np.allclose(probs.sum(0), 1, atol=1e-5)
    assert lmap.view is View.SA and np.array_equal(lmap.pixels, probs.argmax(0))
    with pytest.raises(ShapeMismatch):
        vae.decode(small, np.zeros(7))
    with pytest.raises(ShapeMismatch):
        vae.encode(small, datagen.generate("sa", 1, seed=1)[0][0])  # 64 px into a 32 px model


def test_training_is_deterministic(data, small):
    again = vae.train(data, vae.TrainConfig(epochs=2, batch_size=4, seed=3), arch=ARCH)
    assert again.digest() == small.digest()
    other = vae.train(data, vae.TrainConfig(epochs=2, batch_size=4, seed=4), arch=ARCH)
    assert other.digest() != small.digest()
    assert len(small.log) == 2 and small.latent_std.shape == (32,)


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        vae.train([], vae.TrainConfig())


def test_regressor_is_affine(small):
    rng = np.random.default_rng(0)
    z1, z2 = rng.standard_normal((2, 32)).astype(np.float32)
    a = 0.3
    lhs = vae.regress(small, a * z1 + (1 - a) * z2)
    rhs = a * vae.regress(small, z1) + (1 - a) * vae.regress(small, z2)
    assert lhs == pytest.approx(rhs, abs=1e-5)
    w, b = small.params["reg.w"][:, 0], small.params["reg.b"][0]
    assert vae.regress(small, z1) == pytest.approx(float(z1 @ w + b), abs=1e-5)
    d = vae.regression_direction(small)
    assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-6)


def test_reparameterization_moments(small, data):
    post = vae.encode(small, data[0][0])
    rng = np.random.default_rng(1)
    zs = np.stack([vae.sample_z(post, rng) for _ in range(4000)])
    sd = np.exp(0.5 * post.logvar)
    assert np.all(np.abs(zs.mean(0) - post.mu) < 5 * sd / math.sqrt(4000))
    assert np.allclose(zs.std(0), sd, rtol=0.08)


def test_loss_terms_match_closed_forms(small, data):
    maps = [m for m, _ in data[:3]]
    ts = [t for _, t in data[:3]]
    post = vae.encode(small, maps)
    kl = 0.5 * np.sum(post.mu ** 2 + np.exp(post.logvar) - 1 - post.logvar, axis=1).mean()
    total, terms = vae.cvae_loss(small, maps, ts, np.random.default_rng(2), reg_weight=0.0)
    assert terms["kl"] == pytest.approx(kl, rel=1e-4)
    assert total == pytest.approx(terms["nll"] + terms["kl"], rel=1e-5)
    assert terms["reg"] == 0.0
    # same draws, weighted regression term
    total2, terms2 = vae.cvae_loss(small, maps, ts, np.random.default_rng(2), reg_weight=5.0)
    assert total2 == pytest.approx(total + 5.0 * terms2["reg"], rel=1e-5)
    with pytest.raises(ValueError):
        vae.cvae_loss(small, maps, [0.1, 0.2, 1.5], np.random.default_rng(2))


def test_unconstrained_training_leaves_regressor_untouched(data):
    init = vae.init_params(ARCH, seed=5)
    m = vae.train(data, vae.TrainConfig(epochs=1, batch_size=4, seed=5, reg_weight=0.0), init=init)
    for k in ("reg.w", "reg.b"):
        assert np.array_equal(m.params[k], init.params[k])
    assert not np.array_equal(m.params["enc.b0.c1.w"], init.params["enc.b0.c1.w"])


def test_save_load_round_trip(small, tmp_path):
    small.save(tmp_path / "m.json")
    back = vae.VaeParams.load(tmp_path / "m.json")
    assert back.digest() == small.digest()
    assert np.array_equal(back.latent_std, small.latent_std)
    assert back.arch == small.arch and back.train_config == small.train_config


def test_invalid_pairs_and_robust_finetune(small, data):
    th = criteria.Thresholds.lenient()
    pairs = vae.harvest_pairs(small, data, 4, seed=0, thresholds=th)
    assert len(pairs) == 4
    assert all(not criteria.check(p.x_star, th).valid for p in pairs)
    robust = vae.finetune_robust(small, pairs, vae.TrainConfig(epochs=1, batch_size=2, seed=0))
    assert robust.robust
    changed = {k for k in small.params if not np.array_equal(small.params[k], robust.params[k])}
    assert changed and all(k.startswith("enc.") for k in changed)
    with pytest.raises(EmptyDataset):
        vae.finetune_robust(small, [], vae.TrainConfig())
    with_clean = vae.finetune_robust(small, pairs, vae.TrainConfig(epochs=1, batch_size=2, seed=0), clean=data[:3])
    assert with_clean.digest() != robust.digest()


def test_bias_starts_at_target_mean(data):
    m = vae.train(data, vae.TrainConfig(epochs=0, seed=0), arch=ARCH)
    assert m.params["reg.b"][0] == pytest.approx(np.mean([t for _, t in data]), abs=1e-6)
