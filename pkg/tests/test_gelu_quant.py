import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mptq.errors import EncodingError, FitError, QuantInputError
from mptq.gelu_quant import (
    GeluStats,
    Region,
    RegionCode,
    RegionQuantizer,
    collect_gelu_stats,
    compute_m0,
    compute_m1,
    decode_array,
    encode_array,
    fake_region_quantize,
    fit_s0,
    mse,
    pack_bits,
    pack_codes,
    region_decode,
    region_encode,
    s0_grid,
    unpack_bits,
    unpack_codes,
)
from synthetic import golden_post_gelu, heavy_tailed_post_gelu

GOLDEN = RegionQuantizer(6, 0.0515, 3, 5)


def all_codes(bits):
    for region in Region:
        width = bits - 1 if region == Region.LARGE_POS else bits - 2
        for mag in range(1 << width):
            yield RegionCode(region, mag)


def test_quantizer_validation():
    for args in [(3, 0.1, 0, 1), (9, 0.1, 0, 1), (6, 0.0, 0, 1), (6, 0.1, 2, 2), (6, 0.1, -1, 2)]:
        with pytest.raises(ValueError):
            RegionQuantizer(*args)


def test_golden_scales_and_fields():
    assert GOLDEN.s1 == pytest.approx(0.412, abs=1e-12)
    assert GOLDEN.s2 == pytest.approx(1.648, abs=1e-12)
    assert (GOLDEN.small_max, GOLDEN.large_max, GOLDEN.boundary) == (15, 31, 64)
    assert RegionQuantizer.from_dict(GOLDEN.to_dict()) == GOLDEN


def test_collect_stats_examples():
    s = collect_gelu_stats([np.array([-0.1, 0.5, 2.0])])
    assert s.x_low == pytest.approx(-0.1)
    assert s.x_up == pytest.approx(2.0, abs=2e-3)
    s = collect_gelu_stats([np.array([-0.1, 1.0]), np.array([-0.2, 1.0])])
    assert s.x_low == pytest.approx(-0.15)
    pooled = np.linspace(0, 1, 10001)
    assert collect_gelu_stats([pooled]).x_up == pytest.approx(np.percentile(pooled, 99.95))
    assert collect_gelu_stats([np.array([0.2, 1.0])]).x_low >= 0
    with pytest.raises(QuantInputError):
        collect_gelu_stats([])
    with pytest.raises(FitError):
        GeluStats(-0.1, 0.0)


def test_compute_m1_examples():
    assert compute_m1(GeluStats(-0.1700, 12.4909), 6) == 5
    assert compute_m1(GeluStats(-0.15, 3.1), 6) == 3
    assert compute_m1(GeluStats(-1.0, 16 * 31 / 15), 6) == 4
    # all-positive data cannot fit
    with pytest.raises(FitError):
        compute_m1(GeluStats(0.1, 2.0), 6)


def test_compute_m1_clamps():
    assert compute_m1(GeluStats(-1.0, 1e-6), 6) == 1
    assert compute_m1(GeluStats(-1e-9, 1e6), 6) == 8


def test_compute_m1_adapts_to_tail():
    for seed in range(5):
        base = heavy_tailed_post_gelu(seed)
        stretched = np.where(base > 0, base * 10, base)
        lo = compute_m1(collect_gelu_stats([base]), 8)
        hi = compute_m1(collect_gelu_stats([stretched]), 8)
        assert hi - lo >= 3


def test_encode_examples():
    assert region_encode(-0.3, GOLDEN) == RegionCode(Region.NEG, 6)
    assert region_decode(RegionCode(Region.NEG, 6), GOLDEN) == pytest.approx(-0.309)
    assert region_encode(0.5, GOLDEN) == RegionCode(Region.SMALL_POS, 1)
    assert region_decode(RegionCode(Region.SMALL_POS, 1), GOLDEN) == pytest.approx(0.412)
    assert region_encode(11.0, GOLDEN) == RegionCode(Region.LARGE_POS, 7)
    assert region_decode(RegionCode(Region.LARGE_POS, 7), GOLDEN) == pytest.approx(7 * GOLDEN.s2)


def test_decode_examples():
    wide_s0 = RegionQuantizer(6, 1.6494 / 32, 3, 5)
    assert region_decode(RegionCode(Region.NEG, 0), wide_s0) == 0
    assert region_decode(RegionCode(Region.SMALL_POS, 15), wide_s0) == pytest.approx(6.186, abs=1e-3)
    assert region_decode(RegionCode(Region.LARGE_POS, 31), wide_s0) == pytest.approx(51.13, abs=1e-2)
    assert region_decode(RegionCode(Region.LARGE_POS, 7), wide_s0) == pytest.approx(11.5458, abs=1e-4)


def test_encode_clamps_fields():
    assert region_encode(-100.0, GOLDEN) == RegionCode(Region.NEG, 15)
    assert region_encode(1e6, GOLDEN) == RegionCode(Region.LARGE_POS, 31)
    # just under the boundary: rounding carry overflows the small field and clamps
    assert region_encode(63 * 0.0515, GOLDEN) == RegionCode(Region.SMALL_POS, 8)
    with pytest.raises(QuantInputError):
        region_encode(math.nan, GOLDEN)


def test_pack_examples():
    assert pack_bits(RegionCode(Region.NEG, 6), 6) == 0b010110
    assert pack_bits(RegionCode(Region.SMALL_POS, 1), 6) == 0b000001
    assert pack_bits(RegionCode(Region.LARGE_POS, 7), 6) == 0b100111
    with pytest.raises(EncodingError):
        pack_bits(RegionCode(Region.NEG, 16), 6)
    with pytest.raises(EncodingError):
        unpack_bits(64, 6)


@pytest.mark.parametrize("bits", [4, 5, 6, 7, 8])
def test_pack_unpack_exhaustive(bits):
    codes = list(all_codes(bits))
    words = [pack_bits(c, bits) for c in codes]
    assert sorted(words) == list(range(1 << bits))  # a bijection onto every pattern
    assert [unpack_bits(w, bits) for w in words] == codes
    assert unpack_codes(pack_codes(codes, bits), bits, len(codes)) == codes


def test_pack_codes_byte_layout():
    blob = pack_codes([RegionCode(Region.NEG, 6), RegionCode(Region.LARGE_POS, 7)], 6)
    assert blob == bytes([0b01011010, 0b01110000])
    with pytest.raises(EncodingError):
        unpack_codes(blob, 6, 3)


def sweep_quantizers():
    for bits in (4, 5, 6, 7, 8):
        for m1 in range(1, bits + 3):
            for m0 in range(m1):
                yield RegionQuantizer(bits, 0.0515, m0, m1)


@pytest.mark.parametrize("rq", list(sweep_quantizers()), ids=str)
def test_sweep_coverage_and_order(rq):
    lo = -(rq.small_max + 2) * rq.s0
    hi = 1.5 * rq.boundary_value + rq.s2
    x = np.unique(np.concatenate([np.linspace(lo, hi, 10_000), [0.0, rq.boundary_value]]))
    region, mag = encode_array(x, rq)
    assert set(np.unique(region)) == {Region.NEG, Region.SMALL_POS, Region.LARGE_POS}
    assert np.all(np.diff(region.astype(int)) >= 0)  # regions are contiguous intervals
    y = decode_array(region, mag, rq).astype(np.float64)
    # the first large-positive code rounds to zero once the large step exceeds twice the boundary
    monotone = rq.m1 <= rq.m0 + rq.bits - 2
    assert bool(np.all(np.diff(y) >= 0)) == monotone


def test_representation_error_bound():
    rq = GOLDEN
    x = np.linspace(-rq.small_max * rq.s0, rq.large_max * rq.s2, 200_001)
    region, mag = encode_array(x, rq)
    err = np.abs(decode_array(region, mag, rq).astype(np.float64) - x)
    step = np.where(region == Region.NEG, rq.s0, np.where(region == Region.SMALL_POS, rq.s1, rq.s2))
    # the small region's top codes clamp at 15 * s1 before the boundary
    in_small_range = (region != Region.SMALL_POS) | (x <= (rq.small_max + 0.5) * rq.s1)
    bound = step / 2 + rq.s0 / 2 + 1e-6
    assert np.all(err[in_small_range] <= bound[in_small_range])


def test_m0_single_candidate_and_brute_force(rng):
    calib = heavy_tailed_post_gelu(3)
    assert compute_m0(calib, 6, 0.05, 1) == 0
    for s0 in (0.01, 0.05, 0.2):
        errs = [mse(calib, fake_region_quantize(calib, RegionQuantizer(6, s0, m, 5))) for m in range(5)]
        assert compute_m0(calib, 6, s0, 5) == int(np.argmin(errs))
        # the generic metric path agrees with the fast MSE path
        assert compute_m0(calib, 6, s0, 5, metric=lambda a, b: mse(a, b)) == int(np.argmin(errs))


def test_s0_grid():
    g = s0_grid(np.array([-0.1, 6.4]), 6)
    assert len(g) == 100 and g[0] > 0
    np.testing.assert_allclose(g[-1], 1.2 * 6.4 / 32)
    np.testing.assert_allclose(np.diff(g), g[0])
    with pytest.raises(FitError):
        s0_grid(np.zeros(4), 6)


def test_fit_s0_exhaustive_optimality():
    calib = heavy_tailed_post_gelu(7, n=4000)
    rq = fit_s0(calib, 5)
    best = mse(calib, fake_region_quantize(calib, rq))
    m1 = rq.m1
    for s0 in s0_grid(calib, 5):
        for m0 in range(m1):
            other = RegionQuantizer(5, float(s0), m0, m1)
            assert best <= mse(calib, fake_region_quantize(calib, other)) + 1e-15


def test_fit_s0_perfect_fit():
    # with 6 grid points, candidate 5 is exactly max / 2^(b-1) = 0.1
    codes = np.array([-3, -1, 0, 2, 4, 6, 14, 16, 24, 32])
    x = (codes * 0.1).astype(np.float32)
    rq = fit_s0(x, 6, GeluStats(-0.2, 3.2), grid_size=6)
    assert (rq.m0, rq.m1) == (1, 3)
    assert rq.s0 == pytest.approx(0.1)
    assert mse(x, fake_region_quantize(x, rq)) < 1e-12


def test_fit_rejects_empty():
    with pytest.raises(QuantInputError):
        fit_s0(np.array([]), 6)


def test_golden_fit():
    a = golden_post_gelu()
    stats = collect_gelu_stats(list(a))
    assert stats.x_low == pytest.approx(-0.1700, abs=5e-4)
    assert stats.x_up == pytest.approx(12.4909, abs=1e-3)
    rq = fit_s0(a, 4, stats)
    assert (rq.m0, rq.m1) == (3, 5)
    assert 0.0515 * 0.9 <= rq.s0 <= 0.0515 * 1.1


def test_opt_m_beats_uniform_at_4_bits():
    from mptq.quant import fake_quantize, minmax_scale

    for seed in range(5):
        x = heavy_tailed_post_gelu(seed)
        rq = fit_s0(x, 4)
        assert mse(x, fake_region_quantize(x, rq)) <= mse(x, fake_quantize(x, minmax_scale(x, 4)))


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 60, allow_nan=False), st.integers(4, 8))
def test_scalar_and_vector_paths_agree(x, bits):
    rq = RegionQuantizer(bits, 0.0515, 2, 4)
    code = region_encode(x, rq)
    assert region_decode(code, rq) == pytest.approx(float(fake_region_quantize(np.array([x]), rq)[0]), rel=1e-6)
    assert unpack_bits(pack_bits(code, bits), bits) == code
