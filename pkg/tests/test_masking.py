import numpy as np
import pytest

from nenni.masking import (
    InjectionConfig,
    build_mask_batch,
    keep_count,
    mix,
    nm_mask,
    nm_mask_batch,
    ratio_mask_batch,
    topk_mask,
    topk_mask_batch,
)


def sort_oracle_topk(values, K):
    """Reference selection: sort (value desc, index asc), take first K."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    mask = np.zeros(len(values), dtype=np.uint8)
    mask[order[:K]] = 1
    return mask


def test_topk_trivial_cases():
    assert topk_mask([3.0, 1.0, 2.0], 3).tolist() == [1, 1, 1]
    assert topk_mask([3.0, 1.0, 2.0], 1).tolist() == [1, 0, 0]
    assert topk_mask([3.0, 1.0, 2.0], 0).tolist() == [0, 0, 0]


def test_topk_tie_breaks_to_lowest_index():
    assert topk_mask([2.0, 2.0, 1.0], 1).tolist() == [1, 0, 0]
    assert topk_mask([1.0, 2.0, 2.0], 1).tolist() == [0, 1, 0]


def test_topk_matches_sort_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        v = rng.integers(-3, 4, size=n).astype(float)  # small alphabet forces ties
        K = int(rng.integers(0, n + 1))
        assert np.array_equal(topk_mask(v, K), sort_oracle_topk(v, K))


def test_topk_rejects_out_of_range_K():
    with pytest.raises(ValueError):
        topk_mask([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        topk_mask([1.0, 2.0], -1)


def test_nm_examples():
    assert nm_mask([5, 1, 4, 2, 0, 9, 3, 8], 1, 4).tolist() == [1, 0, 0, 0, 0, 1, 0, 0]
    assert nm_mask([1.0, 2.0, 3.0], 2, 2).tolist() == [1, 1, 1]  # N = M keeps all
    rng = np.random.default_rng(4)
    z = rng.normal(size=64)
    m = nm_mask(z, 7, 8)
    assert int(m.sum()) == 56
    assert all(int(m[g : g + 8].sum()) == 7 for g in range(0, 64, 8))


def test_nm_trailing_group_keeps_ceil():
    z = np.arange(10, dtype=float)
    m = nm_mask(z, 1, 4)  # groups 4,4,2; trailing keeps ceil(1*2/4) = 1
    assert m[:4].sum() == 1 and m[4:8].sum() == 1 and m[8:].sum() == 1
    m2 = nm_mask(z, 3, 4)  # trailing keeps ceil(3*2/4) = 2
    assert m2[8:].sum() == 2


def test_nm_rejects_bad_pattern():
    with pytest.raises(ValueError):
        nm_mask(np.ones(8), 5, 4)
    with pytest.raises(ValueError):
        nm_mask(np.ones(8), 0, 4)


def test_mix_identities_and_selection():
    z = np.array([1.0, 2.0])
    zt = np.array([10.0, 20.0])
    assert np.array_equal(mix(z, zt, np.ones(2)), z)
    assert np.array_equal(mix(z, zt, np.zeros(2)), zt)
    assert mix(z, zt, np.array([1, 0])).tolist() == [1.0, 20.0]
    with pytest.raises(ValueError):
        mix(z, zt, np.ones(3))


def test_mix_never_invents_values():
    rng = np.random.default_rng(1)
    z, zt = rng.normal(size=50), rng.normal(size=50)
    m = (rng.random(50) < 0.5).astype(np.uint8)
    out = mix(z, zt, m)
    assert all(out[i] == (z[i] if m[i] else zt[i]) for i in range(50))


def test_monotone_transform_leaves_masks_unchanged():
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = rng.normal(size=24)
        K = int(rng.integers(0, 25))
        transformed = 3.0 * v + 7.0  # strictly increasing
        assert np.array_equal(topk_mask(v, K), topk_mask(transformed, K))
        assert np.array_equal(nm_mask(v, 2, 6), nm_mask(transformed, 2, 6))


def test_batch_variants_match_single_row():
    rng = np.random.default_rng(5)
    vals = rng.integers(-2, 3, size=(8, 17)).astype(float)
    for K in (0, 4, 17):
        batch = topk_mask_batch(vals, K)
        for i in range(8):
            assert np.array_equal(batch[i], topk_mask(vals[i], K))
    batch = nm_mask_batch(vals, 2, 5)
    for i in range(8):
        assert np.array_equal(batch[i], nm_mask(vals[i], 2, 5))


def test_ratio_mask_popcount_and_realized_fraction():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        r = float(rng.random())
        v = rng.normal(size=(1, n))
        m = ratio_mask_batch(v, r)
        assert int(m.sum()) == keep_count(n, r)
        realized = 1.0 - m.sum() / n
        assert abs(realized - r) <= 1.0 / n + 1e-12


def test_inverted_mask_targets_essential_and_complements():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(1, 40))
    r = 0.2
    m_inv = ratio_mask_batch(v, r, invert=True)
    # realized injected fraction stays at the configured ratio
    injected = 1.0 - m_inv.sum() / 40
    assert abs(injected - r) <= 1 / 40 + 1e-12
    # injected positions are exactly the top-K of the ranking
    k_inj = 40 - int(m_inv.sum())
    assert np.array_equal(1 - m_inv[0], topk_mask(v[0], k_inj))
    # i.e. the inverted mask is the complement of a top-K mask
    assert np.array_equal(m_inv[0], 1 - topk_mask(v[0], k_inj))


def test_inverted_structured_mask():
    rng = np.random.default_rng(8)
    v = rng.normal(size=(1, 16))
    cfg_fwd = InjectionConfig.structured(3, 8)
    cfg_inv = InjectionConfig.structured(3, 8, invert=True)
    m_fwd = build_mask_batch(v, cfg_fwd)
    m_inv = build_mask_batch(v, cfg_inv)
    # same injected count per group, but targeting the largest values
    assert m_fwd.sum() == 6 and m_inv.sum() == 6
    assert np.array_equal(m_inv[0], 1 - nm_mask(v[0], 5, 8))


def test_rank_abs_switch():
    v = np.array([[-10.0, 1.0, 2.0]])
    signed = build_mask_batch(v, InjectionConfig.ratio(2 / 3))
    absolute = build_mask_batch(v, InjectionConfig.ratio(2 / 3, rank_abs=True))
    assert signed[0].tolist() == [0, 0, 1]
    assert absolute[0].tolist() == [1, 0, 0]


def test_config_validation():
    with pytest.raises(ValueError):
        InjectionConfig.ratio(1.2)
    with pytest.raises(ValueError):
        InjectionConfig.structured(0, 4)
    with pytest.raises(ValueError):
        InjectionConfig.structured(5, 4)
    with pytest.raises(ValueError):
        InjectionConfig(mode=("ratio", 0.5), resample="sometimes")
    assert InjectionConfig.structured(1, 8).injected_fraction == 7 / 8
