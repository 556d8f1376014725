import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from servesim.workload import (
    LengthDistribution,
    Request,
    TraceError,
    cap_total_length,
    compute_stats,
    format_stats_table,
    load_dist_config,
    load_trace,
    lognormal_from_quantiles,
    nearest_rank,
    poisson_arrivals,
    save_trace,
    static_arrivals,
    synth_trace,
)


def _req(i, p, d, t=None):
    return Request(f"r{i}", t, p, d)


def test_nearest_rank_examples():
    xs = [15, 20, 35, 40, 50]
    assert nearest_rank(xs, 0.05) == 15
    assert nearest_rank(xs, 0.3) == 20
    assert nearest_rank(xs, 0.4) == 20
    assert nearest_rank(xs, 0.5) == 35
    assert nearest_rank(xs, 1.0) == 50
    with pytest.raises(ValueError):
        nearest_rank([], 0.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.01, 1.0))
def test_nearest_rank_is_a_sample(xs, q):
    v = nearest_rank(xs, q)
    assert v in xs
    assert sum(x <= v for x in xs) >= q * len(xs) - 1e-9


def test_stats_hand_example():
    reqs = [_req(0, 10, 5), _req(1, 30, 10), _req(2, 20, 20), _req(3, 40, 4)]
    s = compute_stats(reqs)
    assert s.num_queries == 4
    assert s.prefill_mean == 25
    assert s.prefill_median == 20
    assert s.prefill_p90 == 40
    assert s.decode_median == 5
    ratios = [2.0, 3.0, 1.0, 10.0]
    assert s.pd_ratio_median == 2.0
    assert s.pd_ratio_std == pytest.approx(statistics.pstdev(ratios))


def test_stats_table_has_every_column():
    table = format_stats_table({"t": compute_stats([_req(0, 10, 5)])})
    header, row = table.strip().split("\n")
    assert "P:D std dev" in header
    assert row.split("\t")[0] == "t"


def test_trace_round_trip(tmp_path):
    reqs = [_req(0, 10, 5, 0.5), _req(1, 7, 3, 0.25)]
    path = tmp_path / "t.csv"
    save_trace(reqs, path)
    back = load_trace(path)
    assert [r.id for r in back] == ["r1", "r0"]
    assert back[0] == reqs[1]


def test_trace_without_arrivals(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("request_id,prefill_tokens,decode_tokens\na,3,4\nb,5,6\n")
    reqs = load_trace(path)
    assert [r.arrival_time for r in reqs] == [None, None]
    assert all(r.arrival_time == 0.0 for r in static_arrivals(reqs))


@pytest.mark.parametrize(
    "row,match",
    [("a,0.0,0,4", "prefill_tokens"), ("a,0.0,3,0", "decode_tokens"), ("a,-1,3,4", "arrival"), ("a,0.0,x,4", ":2:")],
)
def test_trace_validation(tmp_path, row, match):
    path = tmp_path / "t.csv"
    path.write_text("request_id,arrival_time_s,prefill_tokens,decode_tokens\n" + row + "\n")
    with pytest.raises(TraceError, match=match):
        load_trace(path)


def test_poisson_rate_and_seed():
    reqs = [_req(i, 1, 1) for i in range(20000)]
    a = poisson_arrivals(reqs, 10.0, seed=1)
    assert a == poisson_arrivals(reqs, 10.0, seed=1)
    assert a != poisson_arrivals(reqs, 10.0, seed=2)
    gaps = np.diff([0.0] + [r.arrival_time for r in a])
    assert gaps.mean() == pytest.approx(0.1, rel=0.03)
    assert all(g > 0 for g in gaps)


def test_poisson_scales_with_rate():
    reqs = [_req(i, 1, 1) for i in range(10)]
    slow = poisson_arrivals(reqs, 1.0, seed=5)
    fast = poisson_arrivals(reqs, 4.0, seed=5)
    for s, f in zip(slow, fast):
        assert s.arrival_time == pytest.approx(4 * f.arrival_time)


def test_cap_trims_decode_first():
    out = cap_total_length([_req(0, 100, 50), _req(1, 4000, 200), _req(2, 10, 10)], 120)
    assert (out[0].prefill_tokens, out[0].decode_tokens) == (100, 20)
    assert (out[1].prefill_tokens, out[1].decode_tokens) == (119, 1)
    assert (out[2].prefill_tokens, out[2].decode_tokens) == (10, 10)


@given(st.integers(1, 5000), st.integers(1, 5000), st.integers(2, 4096))
def test_cap_bounds(p, d, cap):
    r = cap_total_length([_req(0, p, d)], cap)[0]
    assert r.total_tokens <= max(cap, 2)
    assert r.prefill_tokens >= 1 and r.decode_tokens >= 1
    assert r.prefill_tokens <= p and r.decode_tokens <= d


def test_lognormal_quantiles_recovered():
    mu, sigma = lognormal_from_quantiles(400, 1600)
    draws = np.random.default_rng(0).lognormal(mu, sigma, 200000)
    assert np.median(draws) == pytest.approx(400, rel=0.02)
    assert np.quantile(draws, 0.9) == pytest.approx(1600, rel=0.02)


def test_histogram_distribution():
    d = LengthDistribution({"kind": "histogram", "values": [5, 9], "weights": [1, 3]})
    draws = d.sample(np.random.default_rng(0), 40000)
    assert set(np.unique(draws)) == {5, 9}
    assert (draws == 9).mean() == pytest.approx(0.75, abs=0.01)
    with pytest.raises(ValueError):
        LengthDistribution({"kind": "zipf"})


def test_synth_trace_seeded_and_capped():
    cfg = load_dist_config("chat-1m-like")
    a = synth_trace(cfg, 500, seed=4)
    assert a == synth_trace(cfg, 500, seed=4)
    assert all(r.total_tokens <= cfg["max_total_tokens"] for r in a)
    assert all(r.arrival_time is None for r in a)
    assert len({r.id for r in a}) == 500


@pytest.mark.parametrize(
    "name,prefill_median,decode_median",
    [("chat-1m-like", 417, 139), ("bwb-4k-like", 1037, 1601), ("arxiv-4k-like", 2730, 167)],
)
def test_bundled_workloads_hit_medians(name, prefill_median, decode_median):
    s = compute_stats(synth_trace(load_dist_config(name), 20000, seed=0))
    assert s.prefill_median == pytest.approx(prefill_median, rel=0.05)
    assert s.decode_median == pytest.approx(decode_median, rel=0.05)
