import json
import subprocess
import sys

import pytest

from rsalab import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def report(tmp_path, name):
    return json.load(open(tmp_path / f"{name}.json"))


class TestConfig:
    def test_defaults_file_then_flags(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"n_cases": 5, "tolerance": 1e-9}))
        cfg = cli.resolve_config("equiv", str(path), {"tolerance": 1e-8, "seed": None})
        assert cfg["n_cases"] == 5 and cfg["tolerance"] == 1e-8 and cfg["seed"] == 0

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"n_casez": 5}))
        with pytest.raises(cli.ConfigError, match="n_casez"):
            cli.resolve_config("equiv", str(path), {})

    def test_bad_type_names_path(self):
        with pytest.raises(cli.ConfigError, match="tolerance"):
            cli.resolve_config("equiv", None, {"tolerance": "small"})

    def test_default_cases_cover_every_axis_value(self):
        cases = cli.default_equiv_cases(20, seed=0)
        assert len(cases) == 20 and len({json.dumps(c, sort_keys=True) for c in cases}) == 20
        assert {c["L"] for c in cases[:3]} == {1, 2, 4}
        assert {c["window"] for c in cases[:3]} == {"3x1x1", "3x3x3", "5x7x7"}
        assert {c["C"] for c in cases[:3]} == {8, 16, 64}
        assert {c["normalize"] for c in cases[:3]} == {True, False}
        assert any(c["G_corr"] == 1 for c in cases) and any(c["G_corr"] == c["C"] // c["L"] for c in cases)


class TestEquiv:
    def test_passes_and_reports(self, capsys, tmp_path):
        code, out, _ = run(capsys, "equiv", "--n-cases", "4", "--out", str(tmp_path))
        assert code == 0
        doc = report(tmp_path, "equiv")
        assert doc["passed"] and doc["max_gap"] <= 1e-10 and len(doc["cases"]) == 4
        assert json.loads(out) == doc
        assert doc["config"]["tolerance"] == 1e-10

    def test_zero_tolerance_fails(self, capsys, tmp_path):
        code, _, _ = run(capsys, "equiv", "--n-cases", "3", "--tolerance", "0", "--out", str(tmp_path))
        assert code == 1 and report(tmp_path, "equiv")["max_gap"] > 0

    def test_malformed_config(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"bogus_key": 1}))
        code, _, err = run(capsys, "equiv", "--config", str(path), "--out", str(tmp_path))
        assert code == 2 and "bogus_key" in err

    def test_unreadable_config(self, capsys, tmp_path):
        code, _, err = run(capsys, "equiv", "--config", str(tmp_path / "none.json"))
        assert code == 2 and "cannot read" in err

    def test_explicit_cases(self, capsys, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"cases": [{"C": 4, "L": 4, "G_corr": 1, "window": "1x3x3", "normalize": False}]}))
        code, _, _ = run(capsys, "equiv", "--config", str(path), "--out", str(tmp_path))
        assert code == 0 and report(tmp_path, "equiv")["cases"][0]["case"]["L"] == 4

    def test_bad_case_divisibility(self, capsys, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"cases": [{"C": 6, "L": 4, "G_corr": 1, "window": "3x1x1", "normalize": True}]}))
        assert run(capsys, "equiv", "--config", str(path), "--out", str(tmp_path))[0] == 2

    def test_deterministic_json(self, capsys, tmp_path):
        run(capsys, "equiv", "--n-cases", "3", "--seed", "7", "--out", str(tmp_path))
        first = (tmp_path / "equiv.json").read_bytes()
        run(capsys, "equiv", "--n-cases", "3", "--seed", "7", "--out", str(tmp_path))
        assert (tmp_path / "equiv.json").read_bytes() == first


class TestGradcheck:
    def test_default_passes(self, capsys, tmp_path):
        code, _, _ = run(capsys, "gradcheck", "--n-coords", "24", "--out", str(tmp_path))
        doc = report(tmp_path, "gradcheck")
        assert code == 0 and doc["passed"] and doc["worst_rel"] <= 1e-4
        assert set(doc["params"]) == {"E_Q", "E_K", "E_V", "P1", "H1", "H2", "G_ctx", "x"}

    @pytest.mark.parametrize("eps", ["1e-8", "1e-2"])
    def test_eps_out_of_range(self, capsys, tmp_path, eps):
        assert run(capsys, "gradcheck", "--eps", eps, "--out", str(tmp_path))[0] == 2

    def test_corrupt_flag_fails(self, capsys, tmp_path):
        code, _, _ = run(capsys, "gradcheck", "--corrupt", "H2", "--n-coords", "8", "--out", str(tmp_path))
        assert code == 1 and report(tmp_path, "gradcheck")["params"]["H2"]["max_rel"] > 1e-2

    def test_corrupt_unknown_name(self, capsys, tmp_path):
        assert run(capsys, "gradcheck", "--corrupt", "nope", "--out", str(tmp_path))[0] == 2

    def test_f32_rejected(self, capsys, tmp_path):
        assert run(capsys, "gradcheck", "--dtype", "f32", "--out", str(tmp_path))[0] == 2


class TestFlopsAndBench:
    def test_reference_ratio_near_four(self, capsys, tmp_path):
        code, _, err = run(capsys, "flops", "--kernel-sizes", "1x1x129,1x1x257", "--C", "16", "--L", "1",
                           "--W", "128", "--impls", "reference,efficient", "--out", str(tmp_path))
        assert code == 0
        ratios = report(tmp_path, "flops")["ratio_last_first"]
        assert abs(ratios["reference"] - 4.0) <= 0.4
        assert abs(ratios["efficient"] - 2.0) <= 0.2
        assert "reference: flops ratio last/first kernel" in err

    def test_table_kernel_list_verbatim(self, capsys, tmp_path):
        code, _, _ = run(capsys, "flops", "--kernel-sizes", "3x3x3,3x5x5,3x7x7,3x9x9,5x7x7,5x9x9",
                         "--out", str(tmp_path))
        assert code == 0 and len(report(tmp_path, "flops")["rows"]) == 12

    def test_empty_grid(self, capsys, tmp_path):
        code, _, err = run(capsys, "flops", "--kernel-sizes", "", "--out", str(tmp_path))
        assert code == 2 and "empty" in err

    def test_window_larger_than_grid(self, capsys, tmp_path):
        assert run(capsys, "flops", "--kernel-sizes", "1x1x129", "--out", str(tmp_path))[0] == 2

    def test_bad_window_text(self, capsys, tmp_path):
        assert run(capsys, "flops", "--kernel-sizes", "3x3", "--out", str(tmp_path))[0] == 2

    def test_bench_writes_csv_and_json(self, capsys, tmp_path):
        code, _, _ = run(capsys, "bench", "--kernel-sizes", "1x1x3,1x3x3,3x3x3", "--C", "8", "--L", "2",
                         "--H", "4", "--W", "4", "--threads", "1", "--out", str(tmp_path))
        assert code == 0
        lines = (tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0] == "config_id,impl,median_ns,mad_ns,repeats,dtype,flops,params,workset"
        assert len(lines) == 7
        doc = report(tmp_path, "bench")
        assert set(doc["spearman"]) == {"reference", "efficient"}

    def test_bench_repeats_floor(self, capsys, tmp_path):
        assert run(capsys, "bench", "--repeats", "3", "--out", str(tmp_path))[0] == 2


class TestProbeCommands:
    ARGS = ("--n-per-class", "5", "--epochs", "1", "--dtype", "f64")

    def test_probe_summary_and_determinism(self, capsys, tmp_path):
        code, _, _ = run(capsys, "probe", "--transform", "sa-content", *self.ARGS, "--out", str(tmp_path))
        doc = report(tmp_path, "probe")
        assert code == 0 and doc["paired_gap"] <= 1e-6
        assert 0.0 <= doc["test_acc"] <= 1.0
        first = (tmp_path / "probe.json").read_bytes()
        run(capsys, "probe", "--transform", "sa-content", *self.ARGS, "--out", str(tmp_path))
        assert (tmp_path / "probe.json").read_bytes() == first

    def test_probe_bad_geometry(self, capsys, tmp_path):
        assert run(capsys, "probe", "--epochs", "1", "--n-per-class", "0", "--out", str(tmp_path))[0] == 2

    def test_probe_epoch_cap(self, capsys, tmp_path):
        assert run(capsys, "probe", "--epochs", "51", "--out", str(tmp_path))[0] == 2

    def test_dump_from_checkpoint(self, capsys, tmp_path):
        run(capsys, "probe", "--transform", "rsa", *self.ARGS, "--out", str(tmp_path))
        dump = tmp_path / "dump"
        dump.mkdir()
        code, _, _ = run(capsys, "dump-kernels", "--checkpoint", str(tmp_path / "probe_rsa.json"),
                         "--out", str(dump))
        doc = report(dump, "dump-kernels")
        assert code == 0 and len(doc["files"]) == 2 * 2 * 2
        diffs = doc["max_abs_diff_original_vs_reversed"]
        assert diffs["basic_q0"] == 0.0 and diffs["basic_q1"] == 0.0
        assert max(diffs["relational_q0"], diffs["relational_q1"]) > 1e-6

    def test_dump_untrained_sa(self, capsys, tmp_path):
        code, _, _ = run(capsys, "dump-kernels", "--transform", "sa-content", "--out", str(tmp_path))
        assert code == 0 and report(tmp_path, "dump-kernels")["files"] == ["softmax_q0_original.csv",
                                                                          "softmax_q0_reversed.csv"]

    def test_dump_errors(self, capsys, tmp_path):
        assert run(capsys, "dump-kernels", "--checkpoint", str(tmp_path / "x.json"), "--out", str(tmp_path))[0] == 2
        assert run(capsys, "dump-kernels", "--out", str(tmp_path / "missing"))[0] == 2
        assert run(capsys, "dump-kernels", "--position", "99,0,0", "--out", str(tmp_path))[0] == 2


def test_module_entry_point_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rsalab.cli", "flops", "--kernel-sizes", "", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 2
