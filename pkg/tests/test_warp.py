import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardioguard import bank as bk
from cardioguard import criteria, datagen, vae, warp
from cardioguard.errors import EmptyBank, TooFewMaps, ViewMismatch
from cardioguard.grid import LabelMap, View
from cardioguard.warp import WarpMode, WarpPath


def grid_oracle(table, lo=0, hi=32):
    """Bisection answer on the 33-point grid, from a full validity table, by interval recursion."""
    if hi - lo == 1:
        return hi
    mid = (lo + hi) // 2
    return grid_oracle(table, lo, mid) if table[mid] else grid_oracle(table, mid, hi)


def test_threshold_point_three():
    calls = []

    def valid(a):
        calls.append(a)
        return a >= 0.3

    alpha, n = warp.dichotomic_alpha(valid)
    assert alpha == 0.3125 and n == 5 and len(calls) == 5
    assert all((a * 32).is_integer() for a in calls)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1.0))
def test_monotone_threshold_gives_next_grid_point(c):
    alpha, _ = warp.dichotomic_alpha(lambda a: a >= c)
    assert alpha == math.ceil(c * 32) / 32


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), min_size=33, max_size=33))
def test_arbitrary_validity_tables(bits):
    table = list(bits)
    table[0], table[32] = False, True
    alpha, n = warp.dichotomic_alpha(lambda a: table[int(round(a * 32))])
    assert alpha == grid_oracle(table) / 32 and n <= 5
    if table == sorted(table):  # monotone: the bisection finds the global grid minimum
        assert alpha == table.index(True) / 32


def test_mode_parsing():
    assert WarpMode.parse("dicho") is WarpMode.DICHO
    assert WarpMode.parse("nn-swap-rs") is WarpMode.NN_SWAP_RS
    assert WarpMode.parse("VAE_only") is WarpMode.VAE_ONLY
    assert not WarpMode.ROBUST.guaranteed and WarpMode.NN_SWAP.guaranteed
    with pytest.raises(ValueError):
        WarpMode.parse("magic")


@pytest.fixture(scope="module")
def setup(small_sa):
    model, data, th = small_sa
    seeds = vae.encode(model, [m for m, _ in data]).mu
    bank = bk.build_bank(model, seeds, 400, seed=2, thresholds=th)
    corpus = datagen.defect_corpus("sa", 24, seed=43, size=32, thresholds=th)
    return model, bank, th, corpus


def test_valid_input_is_returned_untouched(setup, small_sa):
    model, bank, th, _ = setup
    m = small_sa[1][0][0]
    out = warp.postprocess(m, model, bank, WarpMode.DICHO, th)
    assert out.path is WarpPath.IDENTITY and out.output is m and out.alpha == 0.0
    assert out.evaluations == 0


@pytest.mark.parametrize("mode", [WarpMode.DICHO, WarpMode.NN_SWAP_RS, WarpMode.NN_SWAP])
def test_guarantee_over_defect_corpus(setup, mode):
    model, bank, th, corpus = setup
    for gt, bad, spec in corpus:
        out = warp.postprocess(bad, model, bank, mode, th)
        assert not out.input_report.valid
        if out.registration_failed:
            continue
        assert out.report.valid and criteria.check(out.output, th).valid, spec
        assert out.output.pixels.shape == bad.pixels.shape
        if out.path is WarpPath.LATENT_WARP:
            if mode is WarpMode.DICHO:
                assert 0 < out.alpha <= 1 and (out.alpha * 32).is_integer()
            else:
                assert out.alpha == 1.0
            if mode is WarpMode.NN_SWAP:
                assert out.nn_index < bank.meta["stats"]["seed_vectors"]


def test_idempotent(setup):
    model, bank, th, corpus = setup
    for _, bad, _ in corpus[:8]:
        once = warp.postprocess(bad, model, bank, WarpMode.DICHO, th)
        twice = warp.postprocess(once.output, model, bank, WarpMode.DICHO, th)
        assert twice.output == once.output and twice.path is WarpPath.IDENTITY


def test_latent_alpha_matches_grid_oracle(setup, small_sa):
    model, bank, th, _ = setup
    rng = np.random.default_rng(11)
    data = small_sa[1]
    mu = vae.encode(model, [m for m, _ in data]).mu
    checked = 0
    for k in range(400):
        if checked == 20:
            break
        scale = rng.uniform(2, 6) * model.latent_std
        z = (mu[k % len(mu)] + rng.standard_normal(32) * scale).astype(np.float32)
        if criteria.check(vae.decode_map(model, z), th).valid:
            continue
        _, z_nn, _ = bk.nearest(bank, z)
        delta = z_nn - z
        table = [criteria.check(vae.decode_map(model, z + np.float32(m / 32) * delta), th).valid
                 for m in range(33)]
        assert table[32] and not table[0]
        alpha, n = warp.latent_alpha(model, th, z, z_nn)
        assert alpha == grid_oracle(table) / 32 and n <= 5
        checked += 1
    assert checked == 20


def test_vae_only_has_no_guarantee_but_reconstructs(setup):
    model, bank, th, corpus = setup
    out = warp.postprocess(corpus[0][1], model, None, WarpMode.VAE_ONLY, th)
    assert out.path is WarpPath.VAE_RECONSTRUCTION and out.alpha == 0.0


def test_errors_and_degenerate_inputs(setup):
    model, bank, th, corpus = setup
    la = datagen.generate("la", 1, seed=1, size=32)[0][0]
    with pytest.raises(ViewMismatch):
        warp.postprocess(la, model, bank, WarpMode.DICHO, th)
    with pytest.raises(EmptyBank):
        warp.postprocess(corpus[0][1], model, None, WarpMode.DICHO, th)
    with pytest.raises(ValueError):
        warp.postprocess(corpus[0][1], model, bank, WarpMode.ROBUST, th)
    no_lv = corpus[0][1].pixels.copy()
    no_lv[no_lv == 3] = 0
    out = warp.postprocess(LabelMap(no_lv, View.SA), model, bank, WarpMode.DICHO, th)
    assert out.registration_failed and np.array_equal(out.output.pixels, no_lv)


def test_report_json_fields(setup):
    model, bank, th, corpus = setup
    gt, bad, spec = corpus[1]
    js = warp.postprocess(bad, model, bank, WarpMode.DICHO, th).to_json()
    assert {"path", "alpha", "valid_before", "valid_after", "violations_before",
            "violations_after", "registration_failed", "seconds"} <= set(js)
    assert js["violations_before"] == criteria.check(bad, th).violations
    assert datagen.target_criterion(bad.view, spec) in js["violations_before"] and js["violations_after"] == []


def test_interpolation_audit(small_sa):
    model, data, th = small_sa
    maps = [m for m, _ in data[:20]]
    rate = warp.interpolation_audit(model, maps, pairs=20, points=5, seed=1, thresholds=th)
    assert 0.0 <= rate <= 1.0
    assert rate == warp.interpolation_audit(model, maps, pairs=20, points=5, seed=1, thresholds=th)
    same = [maps[0], maps[0]]
    recon_valid = criteria.check(vae.reconstruct(model, [maps[0]])[0], th).valid
    assert warp.interpolation_audit(model, same, pairs=3, points=5, thresholds=th) == (0.0 if recon_valid else 1.0)
    with pytest.raises(TooFewMaps):
        warp.interpolation_audit(model, maps[:1])
