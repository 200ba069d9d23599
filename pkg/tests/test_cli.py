import json

import numpy as np
import pytest

from bnfuse import cli, graph as G, ops, verify
from bnfuse.errors import InvalidSpecError


class TestConfig:
    def test_flat_key_value_file(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "# comment line\n"
            "model = resnet-micro\n"
            "batch = 4\n"
            "fusion = bnff\n"
            "iterations = 3   # trailing comment\n"
            "seed = 7\n"
        )
        cfg = cli.load_config(str(cfg_file), {})
        assert cfg.model == "resnet-micro"
        assert cfg.batch == 4
        assert cfg.fusion == "bnff"
        assert cfg.iterations == 3
        assert cfg.seed == 7

    def test_cli_overrides_file(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("batch = 4\nseed = 7\n")
        cfg = cli.load_config(str(cfg_file), {"batch": 9, "seed": None})
        assert cfg.batch == 9
        assert cfg.seed == 7

    def test_invariants(self):
        with pytest.raises(InvalidSpecError):
            cli.RunConfig(iterations=0)
        with pytest.raises(InvalidSpecError):
            cli.RunConfig(warmup=-1)
        with pytest.raises(InvalidSpecError):
            cli.RunConfig(batch=0)

    def test_malformed_line_rejected(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("this is not key value\n")
        with pytest.raises(InvalidSpecError):
            cli.load_config(str(cfg_file), {})

    def test_unknown_model_rejected(self):
        with pytest.raises(InvalidSpecError):
            cli.RunConfig(model="alexnet").model_spec()

    def test_inline_model_from_config(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "model = densenet\n"
            "batch = 2\n"
            "model_blocks = 2\n"
            "model_growth_rate = 4\n"
            "model_input_dims = 2,8,6,6\n"
        )
        spec = cli.load_config(str(cfg_file), {}).model_spec()
        assert spec.family == "densenet"
        assert spec.blocks == (2,)
        assert spec.growth_rate == 4
        assert spec.input_dims == (2, 8, 6, 6)
        g = G.build_model(spec)
        assert g.meta["conv_count"] == 5  # stem + 2 CPLs x 2

    def test_preset_with_field_override(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("model = densenet-micro\nbatch = 2\nmodel_growth_rate = 8\n")
        spec = cli.load_config(str(cfg_file), {}).model_spec()
        assert spec.growth_rate == 8
        assert spec.blocks == (3, 3)


class TestBench:
    def test_row_contract_and_determinism(self, tmp_path):
        out = tmp_path / "bench.csv"
        rc = cli.main(["bench", "--model", "densenet-micro", "--batch", "2",
                       "--iters", "2", "--warmup", "0", "--seed", "3",
                       "--out", str(out)])
        assert rc == 0
        rows = cli.read_bench_csv(out)
        assert len(rows) == 5 * 3  # 5 levels x {forward, backward, total}
        assert {r["level"] for r in rows} == {"baseline", "rcf", "rcf+mvf", "bnff", "bnff+icf"}
        assert {r["pass"] for r in rows} == {"forward", "backward", "total"}
        # fixed seed and shared weights: one activations checksum everywhere
        assert len({r["checksum"] for r in rows}) == 1
        totals = [r for r in rows if r["pass"] == "total"]
        assert all(r["median_ms"] > 0 for r in totals)
        base = next(r for r in totals if r["level"] == "baseline")
        assert base["speedup_vs_baseline"] == pytest.approx(1.0)

    def test_same_seed_same_checksum_across_runs(self, tmp_path):
        outs = []
        for run in range(2):
            out = tmp_path / f"bench{run}.csv"
            cli.main(["bench", "--model", "resnet-micro", "--batch", "2", "--iters", "1",
                      "--warmup", "0", "--seed", "5", "--fusion", "baseline", "--out", str(out)])
            outs.append(cli.read_bench_csv(out)[0]["checksum"])
        assert outs[0] == outs[1]

    def test_full_shape_model_rejected(self, tmp_path):
        rc = cli.main(["bench", "--model", "densenet-121", "--batch", "1",
                       "--out", str(tmp_path / "x.csv")])
        assert rc == 2

    def test_oversized_batch_suggests_smaller(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(cli, "_available_bytes", lambda: 1024 * 1024)
        rc = cli.main(["bench", "--model", "densenet-micro", "--batch", "64",
                       "--out", str(tmp_path / "x.csv")])
        err = capsys.readouterr().err
        assert rc == 2
        assert "try --batch" in err

    def test_threads_flag_keeps_results_bitwise(self, tmp_path):
        sums = []
        for threads in (1, 3):
            out = tmp_path / f"bench_t{threads}.csv"
            cli.main(["bench", "--model", "densenet-micro", "--batch", "4", "--iters", "1",
                      "--warmup", "0", "--seed", "2", "--fusion", "bnff",
                      "--threads", str(threads), "--out", str(out)])
            sums.append(cli.read_bench_csv(out)[0]["checksum"])
        assert sums[0] == sums[1]


class TestVerifyCmd:
    def test_exit_zero_when_all_pass(self, capsys):
        rc = cli.main(["verify", "--model", "resnet-micro", "--batch", "2", "--seed", "1"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("[PASS]") == 4

    def test_exit_nonzero_and_named_check_on_failure(self, capsys, monkeypatch):
        monkeypatch.setattr(
            verify, "run_all",
            lambda *a, **k: [verify.CheckResult("gradients", False, "worst offender bn.gamma[3]")],
        )
        rc = cli.main(["verify", "--model", "resnet-micro", "--batch", "2"])
        out = capsys.readouterr().out
        assert rc == 1
        assert "[FAIL] gradients" in out and "bn.gamma" in out


class TestFaultInjection:
    def test_skipped_dgamma_accumulation_fails_naming_a_gamma(self, monkeypatch):
        # suite (b) must localize a broken gamma gradient to a .gamma parameter
        real = ops.bn_bwd

        def broken(x, dy, stats, p):
            dx, dgamma, dbeta = real(x, dy, stats, p)
            return dx, np.zeros_like(dgamma), dbeta

        monkeypatch.setattr(ops, "bn_bwd", broken)
        spec = G.ModelSpec(family="densenet", blocks=(1,), growth_rate=2,
                           bottleneck_mult=2, input_dims=(2, 4, 5, 5))
        res = verify.check_gradients(spec, seed=0)
        assert not res.passed
        assert ".gamma[" in res.detail


class TestTrafficCmd:
    def test_writes_per_level_csv_and_json(self, tmp_path, capsys):
        out = tmp_path / "rep"
        rc = cli.main(["traffic", "--model", "single-bn-toy", "--batch", "4", "--out", str(out)])
        assert rc == 0
        files = {p.name for p in out.iterdir()}
        assert "summary.json" in files
        assert "traffic_baseline.csv" in files and "traffic_bnff_icf.csv" in files
        payload = json.loads((out / "summary.json").read_text())
        by_level = {p["level"]: p for p in payload}
        assert by_level["bnff"]["reduction_vs_baseline"] > 0
        assert 0 < by_level["baseline"]["relu_share"] < 1

    def test_resnet50_report_generates_with_positive_reduction(self, tmp_path):
        out = tmp_path / "rep"
        rc = cli.main(["traffic", "--model", "resnet-50", "--batch", "8",
                       "--fusion", "all", "--out", str(out)])
        assert rc == 0
        payload = json.loads((out / "summary.json").read_text())
        by_level = {p["level"]: p for p in payload}
        assert by_level["bnff"]["reduction_vs_baseline"] > 0


class TestExplainCmd:
    def test_baseline_reports_zero_rewrites(self, capsys):
        rc = cli.main(["explain", "--model", "densenet-micro", "--batch", "2",
                       "--fusion", "baseline"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "rewrites: 0" in out

    def test_bnff_lists_boundary_bns(self, capsys):
        spec_args = ["explain", "--model", "densenet-micro", "--batch", "2", "--fusion", "bnff"]
        rc = cli.main(spec_args)
        out = capsys.readouterr().out
        assert rc == 0
        assert "unfused BNs: [" in out

    def test_icf_reports_none_unfused(self, capsys):
        rc = cli.main(["explain", "--model", "densenet-micro", "--batch", "2",
                       "--fusion", "bnff+icf"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "unfused BNs: none" in out
