import pytest
from hypothesis import given, strategies as st

from exanet.latmodel import (DEFAULT_PARAMS, CalibrationParams, NonPositiveTime, bcast_expected,
                             bcast_step_counts, path_latency, speedup_and_efficiency)
from exanet.schedules import RankMap
from exanet.topology import PathClass, Topology

PROTO = Topology((4, 4, 2))


@pytest.mark.parametrize("pc,us", [
    (PathClass(), 1.17),
    (PathClass(1, 0, 0), 1.29),  # base + one link, no external router
    (PathClass(0, 1, 0), 1.17 + 2 * 0.145 + 0.12),
    (PathClass(2, 1, 3), 2.615),  # six links, five routers
])
def test_zero_byte_composition(pc, us):
    assert path_latency(pc) * 1e6 == pytest.approx(us, abs=1e-9)


def test_rendezvous_anchor():
    assert path_latency(PathClass(1, 0, 0), 64) * 1e6 == pytest.approx(5.157)
    four_m = path_latency(PathClass(1, 0, 0), 4 << 20) * 1e6
    assert four_m == pytest.approx(5.157 + ((4 << 20) - 64) * 8 / 12.475e3, rel=1e-9)
    with pytest.raises(ValueError):
        path_latency(PathClass(), -1)


hops = st.integers(0, 4)


@given(hops, hops, hops, st.integers(0, 1 << 22), st.integers(0, 2), st.integers(1, 1 << 16))
def test_monotone_in_hops_and_size(a, b, c, size, which, grow):
    base = PathClass(a, b, c)
    more = PathClass(a + (which == 0), b + (which == 1), c + (which == 2))
    assert path_latency(more, size) >= path_latency(base, size)
    assert path_latency(base, size + grow) >= path_latency(base, size)


@pytest.mark.parametrize("n,counts", [(512, (2, 2, 5)), (4, (2, 0, 0)), (16, (2, 2, 0)),
                                      (64, (2, 2, 2)), (1, (0, 0, 0))])
def test_bcast_step_counts(n, counts):
    assert bcast_step_counts(n, RankMap(PROTO, n)) == counts


def test_bcast_expected_sums_classes():
    ow = {"mpsoc": 1.0, "qfdb": 10.0, "mezzanine": 100.0}
    assert bcast_expected(512, 1, RankMap(PROTO, 512), one_way=ow) == 2 + 20 + 500
    assert bcast_expected(1, 1, RankMap(PROTO, 1)) == 0.0
    with pytest.raises(ValueError):
        bcast_expected(0, 1, None)


@given(st.integers(1, 511), st.sampled_from([0, 1, 4096, 1 << 19]))
def test_bcast_expected_monotone_in_n(n, size):
    lo = bcast_expected(n, size, RankMap(PROTO, n))
    hi = bcast_expected(n + 1, size, RankMap(PROTO, n + 1))
    assert hi >= lo


def test_speedup_and_efficiency():
    assert speedup_and_efficiency(10, 10, 4, "weak") == (4.0, 1.0)
    assert speedup_and_efficiency(10, 5, 4, "strong") == (2.0, 0.5)
    sp, e = speedup_and_efficiency(1.0, 1 / 1.84, 2, "strong")
    assert e == pytest.approx(0.92)
    with pytest.raises(NonPositiveTime):
        speedup_and_efficiency(0, 1, 2, "weak")
    with pytest.raises(ValueError):
        speedup_and_efficiency(1, 1, 2, "sideways")


def test_params_text_round_trip_and_validation():
    p = DEFAULT_PARAMS.with_overrides(link_latency_ns=99.5, tlb_entries=8)
    assert CalibrationParams.from_text(p.to_text()) == p
    assert DEFAULT_PARAMS.credits_per_port == 14
    assert DEFAULT_PARAMS.switch_latency_ns == pytest.approx(13.333, abs=1e-3)
    with pytest.raises(ValueError):
        CalibrationParams(link_latency_ns=0)
    with pytest.raises(ValueError):
        CalibrationParams(eager_threshold=64)
    with pytest.raises(KeyError):
        CalibrationParams.from_mapping({"bogus": "1"})
