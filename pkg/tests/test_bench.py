import io

import numpy as np
import pytest

from deform3d import bench
from deform3d.errors import ConfigError
from deform3d.network import ToyConfig


@pytest.mark.parametrize("n,levels", [(512, 3), (4096, 3), (1000, 2), (7, 1)])
def test_layout_holds_exactly_n_tokens(n, levels):
    lay = bench.bench_layout(n, levels)
    assert lay.total == n and lay.levels == levels


def test_layout_needs_a_token_per_level():
    with pytest.raises(ConfigError):
        bench.bench_layout(2, 3)


def test_fit_slope_recovers_exponent():
    ns = np.array([512, 1024, 2048, 4096])
    assert bench.fit_slope(ns, 3.0 * ns**1.5) == pytest.approx(1.5)


def test_workspace_ratio_at_4096():
    r = bench.workspace_ratio(4096)
    assert r > 10
    # quadratic term dominates: doubling N almost doubles the ratio
    assert bench.workspace_ratio(8192) / r == pytest.approx(2, rel=0.05)


def test_small_bench_run():
    recs = bench.bench_mechanism("msdmsa", [16, 32], channels=12, heads=2, levels=2, points=2, repeats=3)
    assert [r.n for r in recs] == [16, 32]
    assert all(r.time_ns > 0 and r.repeats >= 3 and r.workspace_bytes > 0 for r in recs)
    with pytest.raises(ConfigError):
        bench.bench_mechanism("linear", [16, 32])
    with pytest.raises(ConfigError):
        bench.bench_mechanism("vanilla", [16, 16])


def test_median_raises_repeats_for_fast_calls():
    _, reps = bench.median_ns(lambda: None, 3)
    assert reps > 3


def test_csv_has_versioned_header():
    fh = io.StringIO()
    bench.write_records(fh, [bench.SweepRecord("K", "2", 0.9, 10, 0)], bench.SWEEP_SCHEMA)
    lines = fh.getvalue().splitlines()
    assert lines[0] == "# deform3d-sweep v1"
    assert lines[1] == "axis,value,dice,iterations,seed"


def test_sweep_configs():
    base = ToyConfig()
    got = dict(bench.sweep_configs("K", ["1", "2"], base))
    assert got["2"].points == 2
    got = dict(bench.sweep_configs("scales", ["single", "multi"], base))
    assert not got["single"].multiscale and got["multi"].multiscale
    with pytest.raises(ConfigError):
        list(bench.sweep_configs("scales", ["both"], base))
    with pytest.raises(ConfigError):
        list(bench.sweep_configs("lr", ["1"], base))
    with pytest.raises(ConfigError):
        list(bench.sweep_configs("H", ["5"], base))


def test_tiny_sweep_and_means():
    base = ToyConfig(dims=(2, 4, 4), base_channels=2, channels=6, levels=1, layers=1, heads=1, points=1, ffn=6,
                     iterations=2)
    recs = bench.run_sweep("L_D", ["0", "1"], base, [0, 1])
    assert len(recs) == 4 and all(r.iterations == 2 for r in recs)
    means = bench.mean_by_value(recs)
    assert set(means) == {"0", "1"}
    assert means["0"] == pytest.approx(np.mean([r.dice for r in recs if r.value == "0"]))
