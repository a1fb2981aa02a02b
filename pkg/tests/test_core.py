import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdp_authkit.core import (
    DegenerateInputError,
    DigitalTemplate,
    ParameterError,
    PrintedCode,
    binarize,
    generate_template,
    load_gray_png,
    load_template_png,
    mse,
    pearson,
    quantize8,
    rng_for,
    save_gray_png,
    save_template_png,
)


def test_generate_template_deterministic_and_binary():
    a = generate_template(7, 33, 21, 0.3)
    b = generate_template(7, 33, 21, 0.3)
    assert a.pixels.shape == (33, 21)
    assert a.pixels.dtype == np.uint8
    assert np.array_equal(a.pixels, b.pixels)
    assert set(np.unique(a.pixels)) <= {0, 1}


def test_generate_template_density():
    t = generate_template(1, 64, 64, 0.5)
    frac = t.pixels.mean()
    assert 0.45 <= frac <= 0.55


def test_generate_template_full_size():
    assert generate_template(7, 684, 684, 0.5).shape == (684, 684)


@pytest.mark.parametrize("args", [(0, 0, 4, 0.5), (0, 4, -1, 0.5), (0, 4, 4, 0.0), (0, 4, 4, 1.0)])
def test_generate_template_rejects_bad_params(args):
    with pytest.raises(ParameterError):
        generate_template(*args)


def test_rng_for_keys_are_independent():
    a = rng_for("x", 1).random(4)
    assert np.array_equal(a, rng_for("x", 1).random(4))
    assert not np.array_equal(a, rng_for("x", 2).random(4))
    assert not np.array_equal(a, rng_for("y", 1).random(4))


def test_mse_examples():
    z = np.zeros((3, 3))
    assert mse(z, z) == 0.0
    assert mse(z, np.ones((3, 3))) == 1.0
    assert mse([[0, 1], [1, 0]], [[0.5, 1], [0, 0]]) == pytest.approx(0.3125, abs=1e-15)
    with pytest.raises(ParameterError):
        mse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pearson_examples():
    a = np.array([[0, 1], [1, 0]], dtype=float)
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, 1 - a) == pytest.approx(-1.0)
    # hand value: a mean .5, b mean .25; cov = (.5*.75 ... ) / std product
    b = np.array([[0, 1], [0, 0]], dtype=float)
    da, db = a.ravel() - 0.5, b.ravel() - 0.25
    expected = (da @ db) / np.sqrt((da @ da) * (db @ db))
    assert pearson(a, b) == pytest.approx(expected, abs=1e-15)
    assert pearson(a, b) == pytest.approx(1 / np.sqrt(3), abs=1e-15)
    with pytest.raises(DegenerateInputError):
        pearson(np.ones((2, 2)), a)


def test_binarize_examples():
    t = generate_template(3, 8, 8)
    assert np.array_equal(binarize(t.pixels.astype(float), 0.5).pixels, t.pixels)
    assert not binarize(np.full((4, 4), 0.4), 0.5).pixels.any()
    out = binarize(np.array([[0.2, 0.8], [0.5, 0.49]]), 0.5).pixels
    assert out.tolist() == [[0, 1], [1, 0]]
    with pytest.raises(ParameterError):
        binarize(np.zeros((2, 2)), 1.5)


def test_template_validation():
    with pytest.raises(ParameterError):
        DigitalTemplate(np.array([[0, 2]], dtype=np.uint8), id=0)
    with pytest.raises(ParameterError):
        PrintedCode(np.array([[0.0, 1.2]]), id=0)


def test_reflectance_flips_ink():
    t = DigitalTemplate(np.array([[0, 1], [1, 1]], dtype=np.uint8), id=0)
    assert t.reflectance().tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_png_round_trips(tmp_path, rng):
    img = quantize8(rng.random((9, 13))) / 255.0
    save_gray_png(tmp_path / "x.png", img)
    assert np.array_equal(load_gray_png(tmp_path / "x.png"), img)
    t = generate_template(5, 9, 13)
    save_template_png(tmp_path / "t.png", t)
    back = load_template_png(tmp_path / "t.png", id=4)
    assert np.array_equal(back.pixels, t.pixels) and back.id == 4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 0.95))
def test_binarize_is_monotone_in_tau(seed, tau):
    x = np.random.default_rng(seed).random((6, 6))
    lo = binarize(x, tau).pixels
    hi = binarize(x, min(tau + 0.04, 0.99)).pixels
    assert np.all(hi <= lo)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_mse_symmetric_and_nonnegative(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((5, 4)), r.random((5, 4))
    assert mse(a, b) == pytest.approx(mse(b, a)) and mse(a, b) >= 0
