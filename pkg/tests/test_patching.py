import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_volume
from petfuse.errors import MissingPatch, OutOfGrid
from petfuse.patching import aggregate, extract_patch, gaussian_kernel, plan_patches
from petfuse.volume import Kind


def _covered(grid):
    cover = np.zeros(grid.padded_dims, dtype=np.int32)
    for o in grid.placements:
        cover[tuple(slice(a, a + p) for a, p in zip(o, grid.patch_size))] += 1
    return cover


def _prob(data, **kw):
    return make_volume(data, kind=Kind.PROBABILITY, **kw)


def test_plan_400_cube():
    g = plan_patches((400, 400, 400), (224, 192, 224), 0.5)
    assert g.step == (112, 96, 112)
    xs = sorted({o[0] for o in g.placements})
    ys = sorted({o[1] for o in g.placements})
    zs = sorted({o[2] for o in g.placements})
    assert (len(xs), len(ys), len(zs)) == (3, 4, 3)
    assert len(g.placements) == 36
    assert xs == [0, 88, 176] and zs == [0, 88, 176]
    assert ys == [0, 69, 139, 208]  # 208/3 = 69.33, 416/3 = 138.67 rounded half up


def test_plan_dims_equal_patch():
    g = plan_patches((224, 192, 224))
    assert g.placements == ((0, 0, 0),)


def test_plan_small_volume_is_padded():
    g = plan_patches((100, 100, 100))
    assert g.placements == ((0, 0, 0),)
    assert g.padded_dims == (224, 192, 224)
    assert g.pad_offset == (62, 46, 62)


def test_plan_is_lexicographic_and_unique():
    g = plan_patches((50, 37, 61), (16, 16, 16), 0.3)
    assert list(g.placements) == sorted(set(g.placements))


def test_plan_rejects_bad_params():
    with pytest.raises(ValueError):
        plan_patches((10, 10, 10), (0, 4, 4))
    with pytest.raises(ValueError):
        plan_patches((10, 10, 10), (4, 4, 4), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.integers(1, 70)] * 3), st.tuples(*[st.integers(1, 24)] * 3),
       st.floats(0, 0.95))
def test_plan_covers_every_voxel(dims, patch, overlap):
    g = plan_patches(dims, patch, overlap)
    for o in g.placements:
        assert all(0 <= a and a + p <= P for a, p, P in zip(o, patch, g.padded_dims))
    cover = _covered(g)
    off = g.pad_offset
    inner = cover[tuple(slice(f, f + d) for f, d in zip(off, dims))]
    assert inner.min() >= 1
    # per-axis gaps never exceed the step
    for a in range(3):
        vals = sorted({o[a] for o in g.placements})
        assert vals[0] == 0 and vals[-1] == g.padded_dims[a] - patch[a]
        assert all(0 < b - c <= g.step[a] for c, b in zip(vals, vals[1:]))


def test_zero_overlap_exact_tiling():
    g = plan_patches((32, 48, 16), (16, 16, 16), 0.0)
    cover = _covered(g)
    assert cover.min() == 1 and cover.max() == 1
    assert len(g.placements) == 2 * 3 * 1


def test_gaussian_kernel_shape_and_peak():
    k = gaussian_kernel((9, 8, 7))
    assert k.weights.shape == (9, 8, 7)
    assert k.weights.max() == pytest.approx(1.0)
    assert k.weights.min() >= 1e-8
    np.testing.assert_allclose(k.weights, k.weights[::-1, ::-1, ::-1])

    def axis(i, n):
        sigma = n / 8
        g = [math.exp(-((j - (n - 1) / 2) ** 2) / (2 * sigma ** 2)) for j in range(n)]
        return g[i] / max(g)

    for idx in [(0, 4, 3), (2, 7, 6), (4, 3, 0)]:
        expected = axis(idx[0], 9) * axis(idx[1], 8) * axis(idx[2], 7)
        assert k.weights[idx] == pytest.approx(max(expected, 1e-8), rel=1e-9)


def test_extract_patch_inside_is_slice(rng):
    v = make_volume(rng.normal(size=(10, 12, 14)), spacing=(1.0, 2.0, 3.0), origin=(5, 6, 7))
    p = extract_patch(v, (2, 3, 4), (4, 5, 6))
    np.testing.assert_array_equal(p.data, v.data[2:6, 3:8, 4:10])
    np.testing.assert_allclose(p.voxel_to_world((0, 0, 0)), v.voxel_to_world((2, 3, 4)))


def test_extract_patch_pads_small_volume(rng):
    v = make_volume(rng.normal(size=(3, 4, 5)))
    p = extract_patch(v, (0, 0, 0), (6, 6, 6), pad_value=-9)
    off = ((6 - 3) // 2, (6 - 4) // 2, (6 - 5) // 2)
    for idx in np.ndindex(p.dims):
        src = tuple(i - f for i, f in zip(idx, off))
        if all(0 <= s < n for s, n in zip(src, v.dims)):
            assert p.data[idx] == v.data[src]
        else:
            assert p.data[idx] == -9


def test_extract_patch_out_of_grid():
    v = make_volume(np.zeros((10, 10, 10)))
    with pytest.raises(OutOfGrid):
        extract_patch(v, (7, 0, 0), (4, 4, 4))
    with pytest.raises(OutOfGrid):
        extract_patch(v, (-1, 0, 0), (4, 4, 4))


def _run(grid, fn):
    return [(o, fn(i, o)) for i, o in enumerate(grid.placements)]


@pytest.mark.parametrize("c", [0.0, 0.3, 1.0])
def test_aggregate_constant(c):
    g = plan_patches((20, 17, 9), (8, 8, 8), 0.5)
    outs = _run(g, lambda i, o: _prob(np.full(g.patch_size, c)))
    res = aggregate(outs, g, gaussian_kernel(g.patch_size))
    assert res.dims == (20, 17, 9)
    assert np.max(np.abs(res.data - c)) <= 1e-6


def test_aggregate_single_placement_exact(rng):
    g = plan_patches((8, 8, 8), (8, 8, 8))
    data = rng.random((8, 8, 8)).astype(np.float32)
    res = aggregate([((0, 0, 0), _prob(data))], g, gaussian_kernel((8, 8, 8)))
    np.testing.assert_array_equal(res.data, data)


def test_aggregate_small_volume_crops_padding(rng):
    g = plan_patches((3, 4, 5), (6, 6, 6))
    data = rng.random((6, 6, 6))
    res = aggregate([((0, 0, 0), _prob(data))], g, gaussian_kernel((6, 6, 6)))
    np.testing.assert_allclose(res.data, data[1:4, 1:5, 0:5], atol=1e-7)


def test_aggregate_two_overlapping_matches_brute_force(rng):
    g = plan_patches((12, 4, 4), (8, 4, 4), 0.5)
    assert g.placements == ((0, 0, 0), (4, 0, 0))
    k = gaussian_kernel(g.patch_size)
    a, b = rng.random((8, 4, 4)), rng.random((8, 4, 4))
    res = aggregate([((0, 0, 0), _prob(a)), ((4, 0, 0), _prob(b))], g, k)
    for x, y, z in np.ndindex(res.dims):
        num = den = 0.0
        for o, d in (((0, 0, 0), a), ((4, 0, 0), b)):
            lx = x - o[0]
            if 0 <= lx < 8:
                w = float(k.weights[lx, y, z])
                num += w * float(np.float32(d[lx, y, z]))
                den += w
        assert abs(res.data[x, y, z] - num / den) < 1e-6
        # float64 accumulation agrees with the oracle far below float32 rounding
        assert abs(float(res.data[x, y, z]) - num / den) <= np.spacing(np.float32(num / den))


def test_aggregate_convex_bounds_and_order_invariance(rng):
    g = plan_patches((21, 13, 17), (8, 8, 8), 0.4)
    vals = [float(rng.random()) for _ in g.placements]
    outs = _run(g, lambda i, o: _prob(np.full(g.patch_size, vals[i])))
    k = gaussian_kernel(g.patch_size)
    res = aggregate(outs, g, k)
    assert res.data.min() >= np.float32(min(vals)) and res.data.max() <= np.float32(max(vals))
    shuffled = [outs[i] for i in rng.permutation(len(outs))]
    assert aggregate(shuffled, g, k).data.tobytes() == res.data.tobytes()


def test_aggregate_missing_or_duplicate():
    g = plan_patches((12, 8, 8), (8, 8, 8), 0.5)
    k = gaussian_kernel(g.patch_size)
    outs = _run(g, lambda i, o: _prob(np.zeros(g.patch_size)))
    with pytest.raises(MissingPatch):
        aggregate(outs[:-1], g, k)
    with pytest.raises(MissingPatch):
        aggregate(outs + outs[:1], g, k)
    with pytest.raises(MissingPatch):
        aggregate([((1, 1, 1), outs[0][1])] + outs[1:], g, k)


def test_extract_then_aggregate_round_trip(rng):
    v = _prob(rng.random((19, 11, 23)), spacing=(1.5, 1.0, 2.0), origin=(3, 4, 5))
    g = plan_patches(v.dims, (8, 8, 8), 0.5)
    outs = [(o, extract_patch(v, o, g.patch_size)) for o in g.placements]
    res = aggregate(outs, g, gaussian_kernel(g.patch_size))
    np.testing.assert_allclose(res.data, v.data, atol=1e-6)
    np.testing.assert_allclose(res.origin, v.origin, atol=1e-9)
