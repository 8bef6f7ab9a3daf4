import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cshnet.edges import (
    Histogram256,
    aepl_loss,
    apply_threshold,
    edge_histogram,
    edge_map,
    gaussian_blur,
    gaussian_kernel1d,
    max_entropy_threshold,
    scale_to_levels,
    sobel_gradients,
    sobel_magnitude,
    to_grayscale,
)
from cshnet.errors import ConfigError, InputError
from oracles import finite_difference_check, naive_entropy_threshold


def _hist(bins):
    counts = np.zeros(256, dtype=np.int64)
    for k, v in bins.items():
        counts[k] = v
    return Histogram256(counts)


# -- grayscale / blur / sobel -------------------------------------------------

@pytest.mark.parametrize("rgb,expected", [((1, 1, 1), 1.0), ((-1, -1, -1), 0.0), ((-1, 1, -1), 0.587)])
def test_grayscale_values(rgb, expected):
    img = torch.tensor(rgb, dtype=torch.float64).view(3, 1, 1).expand(3, 4, 4)
    gray = to_grayscale(img)
    assert gray.shape == (1, 4, 4)
    torch.testing.assert_close(gray, torch.full_like(gray, expected))


def test_blur_fixes_constants():
    g = torch.full((9, 9), 0.42, dtype=torch.float64)
    torch.testing.assert_close(gaussian_blur(g), g)


def test_blur_impulse_reproduces_kernel():
    g = torch.zeros(15, 15, dtype=torch.float64)
    g[7, 7] = 1.0
    out = gaussian_blur(g, 5, 1.0)
    w = [math.exp(-x * x / 2) for x in range(-2, 3)]
    w = [v / sum(w) for v in w]
    expected = torch.tensor([[a * b for b in w] for a in w], dtype=torch.float64)
    torch.testing.assert_close(out[5:10, 5:10], expected, atol=1e-12, rtol=0)
    assert out.sum().item() == pytest.approx(1.0, abs=1e-12)


def test_blur_preserves_mass():
    g = torch.zeros(20, 20, dtype=torch.float64)
    g[6:14, 5:15] = torch.rand(8, 10, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert gaussian_blur(g).sum().item() == pytest.approx(g.sum().item(), abs=1e-5)


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        gaussian_kernel1d(4)
    with pytest.raises(ConfigError):
        gaussian_blur(torch.zeros(8, 8), kernel_size=6)


def test_sobel_constant_is_flat():
    mag = sobel_magnitude(torch.full((8, 8), 0.3, dtype=torch.float64))
    assert mag.max().item() <= math.sqrt(1e-12) + 1e-15


def test_sobel_vertical_step():
    img = torch.zeros(8, 8, dtype=torch.float64)
    img[:, 4:] = 1.0
    gx, gy = sobel_gradients(img)
    assert torch.all(gx[1:-1, 3:5].abs() == 4)
    assert torch.all(gy[1:-1] == 0)


def test_sobel_transpose_symmetry():
    img = torch.rand(9, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    gx, gy = sobel_gradients(img)
    gxt, gyt = sobel_gradients(img.t())
    torch.testing.assert_close(gxt, gy.t())
    torch.testing.assert_close(gyt, gx.t())
    torch.testing.assert_close(sobel_magnitude(img.t()), sobel_magnitude(img).t())


# -- histogram ---------------------------------------------------------------

def test_zero_map_histogram():
    h = edge_histogram(torch.zeros(6, 5))
    assert h.counts[0] == 30 and h.total == 30


def test_two_value_map_uses_end_bins():
    e = torch.zeros(4, 4)
    e[::2] = 3.7
    h = edge_histogram(e)
    assert h.counts[0] == 8 and h.counts[255] == 8 and h.total == 16


@given(arrays(np.float64, (7, 9), elements=st.floats(0, 50)))
def test_histogram_conserves_pixels(e):
    assert edge_histogram(e).total == 63


# -- maximum-entropy threshold ---------------------------------------------------

HAND = {
    "single": {0: 36},
    "two-level": {50: 20, 200: 16},
    "three-level": {10: 4, 100: 4, 240: 4},
}


@pytest.mark.parametrize("name", HAND)
def test_hand_histograms_match_oracle(name):
    h = _hist(HAND[name])
    t_ref, table = naive_entropy_threshold(h.counts)
    t = max_entropy_threshold(h)
    assert t == t_ref
    assert all(table[t] >= v for v in table)


def test_hand_histogram_values():
    assert max_entropy_threshold(_hist({0: 36})) == 0
    # H(q) = 0 for every split between the two levels; the smallest maximiser is q = 0
    _, table = naive_entropy_threshold(_hist({50: 20, 200: 16}).counts)
    assert all(v == 0 for v in table[50:200])
    assert max_entropy_threshold(_hist({50: 20, 200: 16})) == 0


def test_random_edge_maps_match_oracle():
    rng = np.random.default_rng(1234)
    for _ in range(200):
        levels = rng.integers(0, 256, size=(16, 16))
        h = edge_histogram(levels.astype(np.float64))
        t_ref, table = naive_entropy_threshold(h.counts)
        t = max_entropy_threshold(h)
        assert t == t_ref
        assert table[t] >= max(table) - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.integers(0, 255), st.integers(1, 40), min_size=1, max_size=8))
def test_threshold_matches_oracle_on_sparse_histograms(bins):
    h = _hist(bins)
    assert max_entropy_threshold(h) == naive_entropy_threshold(h.counts)[0]


def test_empty_histogram_rejected():
    with pytest.raises(InputError):
        max_entropy_threshold(_hist({}))


# -- thresholding -------------------------------------------------------------

def _edges(seed=0, shape=(12, 12)):
    return torch.rand(shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)) * 3


def test_threshold_zero_is_identity():
    e = _edges()
    assert torch.equal(apply_threshold(e, 0), e)


def test_threshold_255_keeps_only_top_level():
    e = _edges()
    out = apply_threshold(e, 255)
    keep = torch.from_numpy(scale_to_levels(e) == 255)
    assert torch.equal(out != 0, keep)
    assert torch.equal(out[keep], e[keep])


def test_threshold_masks_are_nested():
    e = _edges(3)
    supports = [apply_threshold(e, t) != 0 for t in range(0, 256, 5)]
    for lo, hi in zip(supports, supports[1:]):
        assert not (hi & ~lo).any()


def test_threshold_out_of_range():
    with pytest.raises(InputError):
        apply_threshold(_edges(), 256)


def test_pipeline_is_deterministic():
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(5)) * 2 - 1
    a, b = edge_map(img), edge_map(img.clone())
    assert a.threshold == b.threshold
    assert torch.equal(a.magnitudes, b.magnitudes)
    assert 0 <= a.threshold <= 255 and (a.magnitudes >= 0).all()


# -- edge loss ----------------------------------------------------------------

def _img(seed, size=16, batch=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, dtype=torch.float64, generator=g) * 2 - 1


def test_aepl_identity_and_symmetry():
    x, y = _img(0, batch=2), _img(1, batch=2)
    assert aepl_loss(x, x).item() == 0.0
    assert aepl_loss(x, y).item() == aepl_loss(y, x).item()
    assert aepl_loss(x, y, shared_threshold=True).item() >= 0


def test_aepl_shape_mismatch():
    with pytest.raises(InputError):
        aepl_loss(_img(0), _img(1, size=8))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 2 ** 31 - 1))
def test_aepl_non_negative(s1, s2):
    assert aepl_loss(_img(s1, 8), _img(s2, 8)).item() >= 0


def _mask_state(img):
    em = edge_map(img.detach())
    return em.threshold, em.magnitudes != 0


def test_aepl_gradient_mask_stable():
    real = _img(10, size=8)
    fake = _img(11, size=8).requires_grad_(True)
    h = 1e-4
    base_t, base_mask = _mask_state(fake)

    def stable(tensor, k):
        flat = tensor.data.view(-1)
        orig = flat[k].item()
        ok = True
        for d in (h, -h):
            flat[k] = orig + d
            t, mask = _mask_state(tensor)
            ok &= t == base_t and torch.equal(mask, base_mask)
        flat[k] = orig
        return ok

    worst, n = finite_difference_check(lambda: aepl_loss(real, fake), [fake], h=h, probe=stable)
    assert n >= 0.5 * fake.numel()
    assert worst < 1e-3
    assert _mask_state(fake)[0] == base_t
