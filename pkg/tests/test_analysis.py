import csv
import json

import numpy as np
import pytest

from rsalab import analysis as an
from rsalab.tensorgrid import NeighborhoodSpec


def dims(window="3x3x3", **kw):
    base = dict(B=2, T=4, H=8, W=8, C=16, spec=NeighborhoodSpec.parse(window), L=2)
    base.update(kw)
    return an.Dims(**base)


def line(w):
    return NeighborhoodSpec(1, 1, w)


class TestDims:
    def test_defaults_follow_query_width(self):
        d = dims(C=16, L=4)
        assert d.CQ == 4 and d.D == 4 and d.G_corr == 4
        assert d.N == 256 and d.M == 27

    def test_config_id_is_stable_and_distinct(self):
        assert dims().config_id == dims().config_id
        assert dims().config_id != dims(window="3x5x5").config_id

    @pytest.mark.parametrize("kw", [{"C": 10, "L": 4}, {"B": 0}, {"G_corr": 3}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            dims(**kw)


class TestCostReport:
    def test_unknown_impl(self):
        with pytest.raises(ValueError, match="unknown impl"):
            an.cost_report(dims(), "fft")

    @pytest.mark.parametrize("impl", an.IMPLS)
    def test_nonnegative(self, impl):
        r = an.cost_report(dims(), impl)
        assert r.flops > 0 and r.params > 0 and r.workset > 0 and r.leading_flops >= 0

    @pytest.mark.parametrize("impl", an.IMPLS)
    @pytest.mark.parametrize("field", ["B", "T", "H", "W", "C", "M"])
    def test_monotone(self, impl, field):
        d = dims(window="3x3x3", C=16, L=2, D=4, G_corr=2)
        bigger = d.replace(spec=NeighborhoodSpec(3, 3, 5)) if field == "M" else d.replace(**{field: 2 * getattr(d, field)})
        a, b = an.cost_report(d, impl), an.cost_report(bigger, impl)
        assert b.flops >= a.flops and b.params >= a.params and b.workset >= a.workset

    def test_reference_quadratic_in_window(self):
        d = dims(C=16, L=1, B=1, T=1, H=4, W=4)
        r1 = an.cost_report(d.replace(spec=line(129)), "reference").flops
        r2 = an.cost_report(d.replace(spec=line(257)), "reference").flops
        assert abs(r2 / r1 - 4.0) <= 0.4

    def test_efficient_linear_in_window(self):
        d = dims(C=16, L=1, B=1, T=1, H=4, W=4)
        r1 = an.cost_report(d.replace(spec=line(129)), "efficient").flops
        r2 = an.cost_report(d.replace(spec=line(257)), "efficient").flops
        assert abs(r2 / r1 - 2.0) <= 0.2

    def test_multi_query_leading_term(self):
        win = NeighborhoodSpec(5, 7, 7)
        one = an.Dims(2, 4, 8, 8, 64, win, L=1)
        eight = an.Dims(2, 4, 8, 8, 64, win, L=8)
        ratio = an.cost_report(eight, "efficient+multiquery").leading_flops / \
            an.cost_report(one, "efficient+multiquery").leading_flops
        assert abs(ratio - 1 / 64) <= 0.15 / 64

    def test_efficient_workset_has_no_quadratic_window_term(self):
        ms = (3, 7, 15, 31)
        ws = [an.cost_report(dims(C=16, L=2).replace(spec=line(w)), "efficient").workset for w in ms]
        coef = np.polyfit(ms, ws, 2)
        assert abs(coef[0]) <= 1e-6 * max(ws)
        ref = [an.cost_report(dims(C=16, L=2).replace(spec=line(w)), "reference").workset for w in ms]
        assert np.polyfit(ms, ref, 2)[0] > 1.0

    def test_efficient_beats_reference_on_count_at_large_window(self):
        d = an.Dims(1, 4, 8, 8, 64, NeighborhoodSpec(5, 7, 7), L=8)
        assert an.cost_report(d, "efficient").flops < an.cost_report(d, "reference").flops


class TestBench:
    def test_inputs_deterministic_and_impl_free(self):
        d = dims()
        a = an.make_inputs(d, 3)
        assert np.array_equal(a, an.make_inputs(d, 3))
        assert not np.array_equal(a, an.make_inputs(d, 4))

    def test_time_callable_contract(self):
        with pytest.raises(ValueError):
            an.time_callable(lambda: None, repeats=4)
        med, mad = an.time_callable(lambda: None)
        assert med >= 0 and mad >= 0

    @pytest.mark.parametrize("impl", an.IMPLS)
    def test_transforms_run_and_rsa_paths_agree(self, impl):
        d = dims(window="3x1x3", B=1, T=2, H=3, W=3, C=8, L=2)
        x = an.make_inputs(d, 0)
        y = an.make_transform(d, impl, 0)(x)
        assert y.shape == x.shape and np.all(np.isfinite(y))
        if impl in an.RSA_IMPLS:
            ref = an.make_transform(d, "reference", 0)(x)
            assert np.max(np.abs(y - ref)) <= 1e-10

    def test_run_and_outputs(self, tmp_path):
        grid = an.kernel_grid(dims(B=1, T=2, H=4, W=4, C=8), kernels=("1x1x3", "1x3x3", "3x3x3"))
        res = an.bench_run(grid, repeats=5, warmup=2, seed=0, threads=1)
        assert len(res) == 6 and all(r.skipped is None and r.median_ns > 0 for r in res)
        path = tmp_path / "bench.csv"
        an.write_csv(res, path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == an.CSV_HEADER and len(rows) == 7
        an.write_json(an.summarize(res), tmp_path / "bench.json")
        doc = json.load(open(tmp_path / "bench.json"))
        assert len(doc["results"]) == 6 and doc["skipped"] == []
        assert -1.0 <= an.rank_agreement(res, "reference") <= 1.0

    def test_over_budget_is_skipped_not_fatal(self):
        res = an.bench_run([(dims(), "reference")], memory_budget=1)
        assert res[0].skipped and "budget" in res[0].skipped
        assert an.summarize(res)["results"] == []

    def test_rank_agreement_needs_three(self):
        with pytest.raises(ValueError):
            an.rank_agreement([], "reference")

    def test_table_grid(self):
        grid = an.kernel_grid(dims(C=64, L=8))
        assert [str(d.spec) for d, i in grid if i == "efficient"] == list(an.TABLE4C_KERNELS)

    @pytest.mark.slow
    def test_doubling_batch_roughly_doubles_time(self):
        d = dims(window="3x3x3", B=2, T=4, H=12, W=12, C=16, L=2)
        a, b = an.bench_run([(d, "efficient"), (d.replace(B=4), "efficient")], repeats=7, threads=1)
        assert 1.6 <= b.median_ns / a.median_ns <= 2.6
