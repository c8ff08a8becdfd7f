import csv
import json
import math

import numpy as np
import pytest

from cbalab.cli import main, parse_config
from cbalab.runner import RunConfig, emit_results, read_matrix_csv, run_experiment, run_seed, subseed
from cbalab.streams import gen_gaussian_mixture, save_dataset


def tiny(**kw):
    base = dict(seeds=[0, 1], workers=1, n_per_class=40, backbone_widths=[16], cba_hidden=16)
    base.update(kw)
    return RunConfig(**base)


class TestSeeding:
    def test_components_get_distinct_streams(self):
        values = {subseed(3, c) for c in ("data", "split", "init", "shuffle", "buffer")}
        assert len(values) == 5

    def test_same_seed_same_result(self):
        a, b = run_seed(tiny(use_cba=True), 0), run_seed(tiny(use_cba=True), 0)
        np.testing.assert_array_equal(a.matrix, b.matrix)
        assert a.trace_acc == b.trace_acc


class TestRunSeed:
    def test_matrix_upper_triangle_filled(self):
        r = run_seed(tiny(), 0)
        assert r.ok
        T = r.matrix.shape[0]
        for t in range(T):
            assert not np.isnan(r.matrix[: t + 1, t]).any()
            assert np.isnan(r.matrix[t + 1:, t]).all()

    def test_trace_spacing(self):
        r = run_seed(tiny(eval_interval=3), 0)
        assert np.all(np.diff(r.trace_steps) == 3) and r.trace_steps[0] == 3

    def test_poisoned_seed_isolated(self):
        res = run_experiment(tiny(poison_seeds=[1]))
        assert res.seeds[0].ok and not res.seeds[1].ok
        assert "non-finite" in res.seeds[1].error
        assert len(res.succeeded) == 1

    def test_single_task(self):
        r = run_seed(tiny(tasks=1), 0)
        assert r.ok and r.metrics["FM"] == 0.0

    def test_derpp_runs(self):
        r = run_seed(tiny(method="derpp", use_cba=True), 0)
        assert r.ok and 0 <= r.metrics["ACC"] <= 100

    def test_dataset_file(self, tmp_path):
        save_dataset(gen_gaussian_mixture(4, 3, 30, seed=0), tmp_path / "d.csv")
        r = run_seed(tiny(dataset=str(tmp_path / "d.csv"), tasks=2), 0)
        assert r.ok and r.matrix.shape == (2, 2)


class TestEmit:
    def test_files_and_schema(self, tmp_path):
        res = run_experiment(tiny(diag=True, use_cba=True, poison_seeds=[1]))
        out = emit_results(res, tmp_path)
        with open(out / "summary.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "cba", "seed", "ACC", "FM", "ACC_AUC_raw", "ACC_AUC_norm"]
        assert [r[2] for r in rows[1:]] == ["0", "1", "mean", "std"]
        assert rows[2][3:] == ["", "", "", ""]
        assert (out / "FAILED_1").exists() and not (out / "FAILED_0").exists()
        m = read_matrix_csv(out / "matrix_0.csv")
        np.testing.assert_array_equal(m, res.seeds[0].matrix)
        header = (out / "matrix_0.csv").read_text().splitlines()[0]
        assert header == "task,after_task_1,after_task_2,after_task_3,after_task_4,after_task_5"
        assert (out / "diag_0.csv").read_text().startswith("step,inner_loss,outer_loss,align_ip,trn_grad_sq")
        echo = json.loads((out / "config.echo").read_text())
        assert echo["use_cba"] is True and "out" not in echo

    def test_aggregate_uses_sample_std(self):
        res = run_experiment(tiny())
        accs = [s.metrics["ACC"] for s in res.seeds]
        mean, std = res.aggregate()["ACC"]
        assert mean == pytest.approx(np.mean(accs)) and std == pytest.approx(np.std(accs, ddof=1))

    def test_all_failed_aggregate_nan(self):
        res = run_experiment(tiny(poison_seeds=[0, 1]))
        assert math.isnan(res.aggregate()["ACC"][0])


class TestConfigValidation:
    @pytest.mark.parametrize("kw", [dict(seeds=[]), dict(M=-1), dict(eval_interval=0), dict(blurry_K=100),
                                    dict(epochs=0), dict(method="gem"), dict(beta=-1.0)])
    def test_rejected(self, kw):
        with pytest.raises(ValueError):
            tiny(**kw).validate()


class TestCLI:
    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"M": 50, "tasks": 2, "beta": 0.5}))
        cfg = parse_config(["--config", str(tmp_path / "c.json"), "--M", "80", "--seeds", "3,4", "--cba"])
        assert cfg.M == 80 and cfg.tasks == 2 and cfg.beta == 0.5 and cfg.seeds == [3, 4] and cfg.use_cba

    def test_defaults(self):
        cfg = parse_config([])
        assert cfg == RunConfig()

    @pytest.mark.parametrize("argv", [["--M", "-3"], ["--method", "gem"], ["--seeds", "a,b"],
                                      ["--blurry-K", "120"], ["--bogus"]])
    def test_bad_config_exit_2(self, argv, capsys):
        assert main(argv) == 2

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"nope": 1}')
        assert main(["--config", str(tmp_path / "c.json")]) == 2

    def test_end_to_end(self, tmp_path, capsys):
        code = main(["--seeds", "0", "--tasks", "2", "--M", "20", "--cba", "--widths", "8",
                     "--cba-hidden", "8", "--workers", "1", "--out", str(tmp_path / "r")])
        assert code == 0
        assert (tmp_path / "r" / "summary.csv").exists()
        assert "er-cba: ACC" in capsys.readouterr().out

    def test_module_entry(self, tmp_path):
        import subprocess
        import sys
        proc = subprocess.run([sys.executable, "-m", "cbalab", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "--blurry-K" in proc.stdout
