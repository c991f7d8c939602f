import numpy as np
import pytest

from partialpde import masking as mk


def test_rate_zero_pointwise_all_ones():
    m = mk.gen_pointwise_mask(16, 16, 0.0, seed=0)
    assert np.all(m.grid == 1)


def test_pointwise_monte_carlo_rate():
    # 10000 seeds at rate 0.25 -> observed fraction 0.75 +/- 0.01
    fracs = np.empty(10000)
    for s in range(10000):
        fracs[s] = mk.gen_pointwise_mask(64, 64, 0.25, seed=s).observed_fraction()
    assert abs(fracs.mean() - 0.75) < 0.01


def test_pointwise_rate_one_rejected():
    with pytest.raises(mk.MaskError):
        mk.gen_pointwise_mask(8, 8, 1.0, seed=0)
    with pytest.raises(mk.MaskError):
        mk.gen_pointwise_mask(8, 8, 0.9999999 + 1e-7, seed=0)


def test_patchwise_counts_64x64_patch4():
    m = mk.gen_patchwise_mask(64, 64, 0.25, 4, seed=3)
    # 256 blocks, 64 masked, 1024 zero cells
    assert int((m.grid == 0).sum()) == 64 * 16
    zeros_by_block = (m.grid.reshape(16, 4, 16, 4).min(axis=(1, 3)) == 0)
    assert int(zeros_by_block.sum()) == 64


def test_patchwise_counts_64x64_patch8():
    m = mk.gen_patchwise_mask(64, 64, 0.25, 8, seed=3)
    blocks = m.grid.reshape(8, 8, 8, 8).min(axis=(1, 3))
    assert int((blocks == 0).sum()) == 16


def test_patchwise_rate_zero_all_ones():
    m = mk.gen_patchwise_mask(32, 32, 0.0, 4, seed=1)
    assert np.all(m.grid == 1)


def test_patchwise_blocks_are_axis_aligned():
    m = mk.gen_patchwise_mask(32, 32, 0.5, 4, seed=9)
    blocks = m.grid.reshape(8, 4, 8, 4)
    # every block is uniformly 0 or uniformly 1 on the fixed tiling
    assert np.all(blocks.min(axis=(1, 3)) == blocks.max(axis=(1, 3)))


def test_patchwise_clipped_tiling():
    # 10x10 grid, patch 4 -> 3x3 blocks with clipped final row/column
    m = mk.gen_patchwise_mask(10, 10, 0.5, 4, seed=2)
    assert m.grid.shape == (10, 10)
    assert 0 < m.grid.mean() < 1


def test_patch_larger_than_grid_rejected():
    with pytest.raises(mk.MaskError):
        mk.gen_patchwise_mask(8, 8, 0.25, 9, seed=0)


def test_mask_reproducible_bit_for_bit():
    a = mk.gen_patchwise_mask(64, 64, 0.3, 4, seed=77)
    b = mk.gen_patchwise_mask(64, 64, 0.3, 4, seed=77)
    assert np.array_equal(a.grid, b.grid)
    c = mk.gen_pointwise_mask(64, 64, 0.3, seed=77)
    d = mk.gen_pointwise_mask(64, 64, 0.3, seed=77)
    assert np.array_equal(c.grid, d.grid)


def test_mpt_rate_zero_is_identity():
    m = mk.gen_patchwise_mask(16, 16, 0.25, 4, seed=0)
    m_aug, h_hat = mk.mpt_augment(m, 0.0, seed=5)
    assert np.array_equal(m_aug.grid, m.grid)
    assert np.all(h_hat.grid == 1)


def test_mpt_on_full_mask_is_fresh_patch_mask():
    m = mk.ObservationMask(np.ones((16, 16), np.uint8), mk.PATCHWISE, 0.0, 4, 0)
    m_aug, h_hat = mk.mpt_augment(m, 0.25, seed=5)
    assert np.array_equal(m_aug.grid, h_hat.grid)
    blocks = m_aug.grid.reshape(4, 4, 4, 4).min(axis=(1, 3))
    assert int((blocks == 0).sum()) == round(0.25 * 16)


def test_mpt_never_unmasks():
    for s in range(20):
        m = mk.gen_pointwise_mask(16, 16, 0.4, seed=s)
        m_aug, _ = mk.mpt_augment(m, 0.3, seed=s + 100)
        assert int(m_aug.grid.sum()) <= int(m.grid.sum())
        assert np.all(m_aug.grid <= m.grid)


def test_mpt_same_pattern_family():
    m = mk.gen_patchwise_mask(16, 16, 0.25, 4, seed=1)
    _, h_hat = mk.mpt_augment(m, 0.5, seed=2)
    assert h_hat.pattern == mk.PATCHWISE
    assert h_hat.patch_size == 4
    _, h_hat2 = mk.mpt_augment(m, 0.5, seed=2, cross_pattern=mk.POINTWISE)
    assert h_hat2.pattern == mk.POINTWISE


def test_apply_mask_identity_zero_block_idempotent():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(3, 8, 8, 2))
    ones = mk.ObservationMask(np.ones((8, 8), np.uint8), mk.POINTWISE, 0.0, 0, 0)
    assert np.array_equal(mk.apply_mask(frames, ones), frames)

    grid = np.ones((8, 8), np.uint8)
    grid[2:6, 2:6] = 0
    m = mk.ObservationMask(grid, mk.PATCHWISE, 0.25, 4, 0)
    masked = mk.apply_mask(frames, m)
    assert np.all(masked[:, 2:6, 2:6, :] == 0.0)
    assert np.array_equal(mk.apply_mask(masked, m), masked)


def test_apply_mask_shape_mismatch():
    with pytest.raises(mk.MaskError):
        mk.apply_mask(np.zeros((2, 8, 8, 1)),
                      mk.gen_pointwise_mask(4, 4, 0.1, 0))


def test_mask_file_round_trip(tmp_path):
    m = mk.gen_patchwise_mask(33, 17, 0.4, 4, seed=123)
    p = tmp_path / "m.pobm"
    mk.write_mask(m, p)
    r = mk.read_mask(p)
    assert np.array_equal(r.grid, m.grid)
    assert (r.pattern, r.patch_size, r.seed) == (m.pattern, m.patch_size, m.seed)
    assert r.missing_rate == pytest.approx(m.missing_rate)


def test_mask_file_truncation_and_magic(tmp_path):
    m = mk.gen_pointwise_mask(8, 8, 0.2, seed=0)
    p = tmp_path / "m.pobm"
    mk.write_mask(m, p)
    raw = p.read_bytes()

    (tmp_path / "t.pobm").write_bytes(raw[:10])
    with pytest.raises(mk.MaskFormatError):
        mk.read_mask(tmp_path / "t.pobm")

    (tmp_path / "b.pobm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(mk.MaskFormatError):
        mk.read_mask(tmp_path / "b.pobm")

    (tmp_path / "p.pobm").write_bytes(raw[:-3])
    with pytest.raises(mk.MaskFormatError):
        mk.read_mask(tmp_path / "p.pobm")
