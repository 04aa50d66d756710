"""End-to-end checks of the command-line interface.

Each test drives the installed entry point in a subprocess so exit codes,
stderr, and the files on disk are exactly what a shell user would see.
"""

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from parseq.chain import sequential_rollout
from parseq.predictors import GaussianOptimalPredictor, random_mlp, save_gaussian, save_mlp
from parseq.rng import stream
from parseq.sampling import draw_noise_stack, draw_x_T
from parseq.schedule import make_linear_beta_schedule
from parseq.stackio import read_stack, write_stack


def run_cli(*args, env_extra=None):
    env = os.environ.copy()
    env.pop("PARSEQ_THREADS", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "parseq", *[str(a) for a in args]],
        capture_output=True,
        text=True,
        env=env,
    )


@pytest.fixture(scope="module")
def fixtures(tmp_path_factory):
    """Predictor and data files shared by the CLI runs."""
    root = tmp_path_factory.mktemp("cli-fixtures")
    mu = np.array([0.5, -0.3, 1.0])
    var = np.array([1.2, 0.6, 2.0])
    save_gaussian(root / "gauss.json", mu, var)

    mlp = random_mlp(3, [16], np.random.default_rng(3), t_max=30)
    save_mlp(root / "mlp.json", mlp)

    bad = random_mlp(3, [16], np.random.default_rng(0), t_max=30)
    bad.weights[-1] = bad.weights[-1] * 1e308
    save_mlp(root / "diverge.json", bad)

    write_stack(root / "noise20.stack", draw_noise_stack(99, 20, 3), 20, 1.0)
    write_stack(root / "target.stack", np.array([0.4, -0.9, 0.2]), 20, 0.0)

    # a target whose true x_T is known: the rollout of stream draw 2001
    schedule = make_linear_beta_schedule(20)
    predictor = GaussianOptimalPredictor(mu, var, schedule)
    x0 = sequential_rollout(draw_x_T(2001, 3), schedule, None, predictor)[-1]
    write_stack(root / "selfgen.stack", x0, 20, 0.0)
    return {"root": root, "mu": mu, "var": var}


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


class TestSample:
    def test_sequential_and_picard_write_identical_x0(self, fixtures, tmp_path):
        base = ["sample", "--predictor", "zero", "--T", 3, "--seed", 7]
        assert run_cli(*base, "--mode", "sequential", "--out", tmp_path / "a").returncode == 0
        assert run_cli(*base, "--mode", "deq-picard", "--out", tmp_path / "b").returncode == 0
        a = (tmp_path / "a" / "x0.stack").read_bytes()
        b = (tmp_path / "b" / "x0.stack").read_bytes()
        assert a == b

    def test_shared_noise_anderson_matches_sequential(self, fixtures, tmp_path):
        root = fixtures["root"]
        base = [
            "sample", "--predictor", f"gaussian:{root / 'gauss.json'}",
            "--T", 20, "--eta", 1, "--seed", 3,
            "--noise-file", root / "noise20.stack",
        ]
        assert run_cli(*base, "--mode", "sequential",
                       "--out", tmp_path / "seq").returncode == 0
        assert run_cli(*base, "--mode", "deq-anderson", "--solver-tol", 1e-9,
                       "--out", tmp_path / "and").returncode == 0
        x_seq, _, _ = read_stack(tmp_path / "seq" / "x0.stack")
        x_and, _, _ = read_stack(tmp_path / "and" / "x0.stack")
        assert np.max(np.abs(x_seq - x_and)) <= 1e-6

    def test_thread_count_does_not_change_bits(self, fixtures, tmp_path):
        root = fixtures["root"]
        base = [
            "sample", "--mode", "deq-anderson",
            "--predictor", f"mlp:{root / 'mlp.json'}",
            "--T", 30, "--S", 10, "--seed", 5,
        ]
        assert run_cli(*base, "--threads", 1, "--out", tmp_path / "t1").returncode == 0
        assert run_cli(*base, "--threads", 8, "--out", tmp_path / "t8").returncode == 0
        for name in ("x0.stack", "residuals.csv"):
            assert (tmp_path / "t1" / name).read_bytes() == (
                tmp_path / "t8" / name
            ).read_bytes()

    def test_save_stack_writes_full_stack(self, fixtures, tmp_path):
        root = fixtures["root"]
        res = run_cli(
            "sample", "--mode", "deq-anderson",
            "--predictor", f"gaussian:{root / 'gauss.json'}",
            "--T", 20, "--S", 4, "--seed", 1, "--save-stack",
            "--out", tmp_path / "run",
        )
        assert res.returncode == 0
        stack, chain_T, eta = read_stack(tmp_path / "run" / "stack.stack")
        x0, _, _ = read_stack(tmp_path / "run" / "x0.stack")
        assert stack.shape == (4, 3)
        assert chain_T == 20 and eta == 0.0
        assert np.array_equal(stack[-1], x0[0])

    def test_threads_default_comes_from_env(self, fixtures, tmp_path):
        res = run_cli(
            "sample", "--predictor", "zero", "--T", 3, "--out", tmp_path / "run",
            env_extra={"PARSEQ_THREADS": "4"},
        )
        assert res.returncode == 0
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["args"]["threads"] == 4


class TestManifestRerun:
    def test_rerun_reproduces_outputs_byte_for_byte(self, fixtures, tmp_path):
        root = fixtures["root"]
        out = tmp_path / "run"
        res = run_cli(
            "sample", "--mode", "deq-anderson",
            "--predictor", f"mlp:{root / 'mlp.json'}",
            "--T", 30, "--S", 8, "--seed", 11, "--out", out,
        )
        assert res.returncode == 0
        before = {
            name: (out / name).read_bytes() for name in ("x0.stack", "residuals.csv")
        }
        manifest_before = json.loads((out / "manifest.json").read_text())
        for name in before:
            (out / name).unlink()

        assert run_cli("rerun", out / "manifest.json").returncode == 0
        for name, payload in before.items():
            assert (out / name).read_bytes() == payload
        manifest_after = json.loads((out / "manifest.json").read_text())
        manifest_before.pop("timings_ms")
        manifest_after.pop("timings_ms")
        assert manifest_after == manifest_before

    def test_rerun_can_redirect_outputs(self, fixtures, tmp_path):
        res = run_cli("sample", "--predictor", "zero", "--T", 5, "--seed", 2,
                      "--out", tmp_path / "a")
        assert res.returncode == 0
        res = run_cli("rerun", tmp_path / "a" / "manifest.json",
                      "--out", tmp_path / "b")
        assert res.returncode == 0
        assert (tmp_path / "a" / "x0.stack").read_bytes() == (
            tmp_path / "b" / "x0.stack"
        ).read_bytes()

    def test_rerun_rejects_manifest_without_command(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"args": {}}))
        res = run_cli("rerun", path)
        assert res.returncode == 4
        assert "command" in res.stderr


class TestExitCodes:
    def test_subseq_without_S_is_usage_error(self, tmp_path):
        res = run_cli("sample", "--predictor", "zero", "--T", 20,
                      "--subseq", "quadratic", "--out", tmp_path / "x")
        assert res.returncode == 2
        assert "--S" in res.stderr

    def test_naive_invert_with_eta_is_usage_error(self, fixtures, tmp_path):
        root = fixtures["root"]
        res = run_cli("invert", "--target", root / "target.stack",
                      "--method", "naive", "--eta", 0.5, "--T", 20,
                      "--predictor", f"gaussian:{root / 'gauss.json'}",
                      "--out", tmp_path / "x")
        assert res.returncode == 2
        assert "eta" in res.stderr

    def test_unknown_predictor_is_usage_error(self, tmp_path):
        res = run_cli("sample", "--predictor", "resnet", "--out", tmp_path / "x")
        assert res.returncode == 2
        assert "predictor" in res.stderr

    def test_truncated_stack_is_parse_error(self, fixtures, tmp_path):
        root = fixtures["root"]
        stub = tmp_path / "trunc.stack"
        stub.write_bytes((root / "noise20.stack").read_bytes()[:10])
        res = run_cli("eval-w2", "--samples", stub,
                      "--target", f"gaussian:{root / 'gauss.json'}")
        assert res.returncode == 4

    def test_wrong_schema_weight_file_is_parse_error(self, fixtures, tmp_path):
        root = fixtures["root"]
        res = run_cli("sample", "--predictor", f"mlp:{root / 'gauss.json'}",
                      "--T", 20, "--out", tmp_path / "x")
        assert res.returncode == 4
        assert "widths" in res.stderr

    def test_missing_file_is_io_error(self, fixtures, tmp_path):
        res = run_cli("invert", "--target", tmp_path / "nope.stack",
                      "--T", 20, "--predictor", "zero", "--out", tmp_path / "x")
        assert res.returncode == 4

    def test_divergent_weights_exit_numeric_failure(self, fixtures, tmp_path):
        root = fixtures["root"]
        res = run_cli("sample", "--mode", "deq-anderson",
                      "--predictor", f"mlp:{root / 'diverge.json'}",
                      "--T", 20, "--seed", 0, "--out", tmp_path / "x")
        assert res.returncode == 3
        assert "numeric failure" in res.stderr


class TestTrace:
    def test_picard_reaches_tol_within_S_rows(self, tmp_path):
        res = run_cli("trace", "--mode", "deq-picard", "--predictor", "gaussian",
                      "--D", 4, "--T", 40, "--S", 5, "--runs", 3,
                      "--solver-tol", 1e-8, "--solver-max-iters", 10,
                      "--out", tmp_path / "tr")
        assert res.returncode == 0
        header, rows = read_trace(tmp_path / "tr" / "trace.csv")
        assert header == ["iter", "run0", "run1", "run2", "res_min", "res_max"]
        # residual index S is the confirming pass, so at most S + 1 rows
        assert len(rows) <= 6
        for col in (1, 2, 3):
            finals = [float(r[col]) for r in rows if r[col] != ""]
            assert finals[-1] <= 1e-8

    def test_anderson_trace_shorter_than_picard(self, tmp_path):
        # paired run on an affine (Gaussian-optimal) chain; both modes draw
        # the same x_T and noise because only the seed feeds the streams
        base = ["trace", "--predictor", "gaussian", "--D", 4,
                "--T", 200, "--S", 100, "--eta", 1, "--runs", 1, "--seed", 3,
                "--solver-tol", 1e-3, "--solver-max-iters", 60]
        assert run_cli(*base, "--mode", "deq-picard",
                       "--out", tmp_path / "pic").returncode == 0
        assert run_cli(*base, "--mode", "deq-anderson",
                       "--out", tmp_path / "and").returncode == 0
        _, pic = read_trace(tmp_path / "pic" / "trace.csv")
        _, ands = read_trace(tmp_path / "and" / "trace.csv")
        assert len(ands) < len(pic)
        assert float(ands[-1][1]) <= 1e-3

    def test_zero_predictor_trace_is_one_step_plus_confirmation(self, tmp_path):
        res = run_cli("trace", "--mode", "deq-picard", "--predictor", "zero",
                      "--T", 10, "--runs", 2, "--out", tmp_path / "tr")
        assert res.returncode == 0
        _, rows = read_trace(tmp_path / "tr" / "trace.csv")
        assert len(rows) == 2
        assert float(rows[1][1]) == 0.0 and float(rows[1][2]) == 0.0


class TestBench:
    def test_report_covers_every_combination(self, fixtures, tmp_path):
        root = fixtures["root"]
        res = run_cli("bench", "--predictor", f"mlp:{root / 'mlp.json'}",
                      "--T", 30, "--S-list", "5,10", "--threads-list", "1,2",
                      "--out", tmp_path / "bench")
        assert res.returncode == 0
        with open(tmp_path / "bench" / "bench.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["mode", "S", "threads", "wall_ms", "iters"]
        body = rows[1:]
        assert len(body) == 2 * (1 + 2)
        assert {(r[0], r[1], r[2]) for r in body} == {
            ("sequential", "5", "1"), ("deq-anderson", "5", "1"),
            ("deq-anderson", "5", "2"), ("sequential", "10", "1"),
            ("deq-anderson", "10", "1"), ("deq-anderson", "10", "2"),
        }
        for r in body:
            assert float(r[3]) > 0.0
            if r[0] == "deq-anderson":
                assert int(r[4]) <= 15
            else:
                assert int(r[4]) == int(r[1])


class TestEvalW2:
    def test_self_sample_scores_near_zero(self, fixtures, tmp_path):
        root, mu, var = fixtures["root"], fixtures["mu"], fixtures["var"]
        draws = mu + np.sqrt(var) * stream(0, "scratch").standard_normal((10_000, 3))
        write_stack(tmp_path / "samples.stack", draws, 0, 0.0)
        res = run_cli("eval-w2", "--samples", tmp_path / "samples.stack",
                      "--target", f"gaussian:{root / 'gauss.json'}",
                      "--out", tmp_path / "ev")
        assert res.returncode == 0
        report = json.loads(res.stdout)
        assert report["w2"] <= 0.1 * np.linalg.norm(np.sqrt(var))
        assert report["moments"]["n"] == 10_000
        on_disk = json.loads((tmp_path / "ev" / "eval.json").read_text())
        assert on_disk == report

    def test_single_sample_is_an_error(self, fixtures, tmp_path):
        root = fixtures["root"]
        write_stack(tmp_path / "one.stack", np.array([[0.1, 0.2, 0.3]]), 0, 0.0)
        res = run_cli("eval-w2", "--samples", tmp_path / "one.stack",
                      "--target", f"gaussian:{root / 'gauss.json'}")
        assert res.returncode == 4

    def test_dimension_mismatch_is_an_error(self, fixtures, tmp_path):
        root = fixtures["root"]
        write_stack(tmp_path / "d2.stack", np.zeros((5, 2)), 0, 0.0)
        res = run_cli("eval-w2", "--samples", tmp_path / "d2.stack",
                      "--target", f"gaussian:{root / 'gauss.json'}")
        assert res.returncode == 2
        assert "dimension" in res.stderr


class TestInvert:
    def test_deq_run_writes_report_trace_and_recovered_state(self, fixtures, tmp_path):
        root = fixtures["root"]
        out = tmp_path / "inv"
        res = run_cli("invert", "--target", root / "target.stack",
                      "--method", "deq", "--grad", "phantom",
                      "--predictor", f"gaussian:{root / 'gauss.json'}",
                      "--T", 20, "--epochs", 40, "--lr", 0.05, "--seed", 1,
                      "--out", out)
        assert res.returncode == 0
        report = json.loads((out / "run.json").read_text())
        assert report["epochs_run"] == 40
        assert report["best_loss"] <= report["loss_trace"][0]
        assert report["x_T_hat_file"] == "x_T_hat.stack"
        x_T_hat, _, _ = read_stack(out / "x_T_hat.stack")
        assert x_T_hat.shape == (1, 3)
        with open(out / "loss_trace.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "loss"]
        assert len(rows) == 41
        assert float(rows[1][1]) == report["loss_trace"][0]

    def test_self_generated_target_reaches_stop_loss(self, fixtures, tmp_path):
        root = fixtures["root"]
        res = run_cli("invert", "--target", root / "selfgen.stack",
                      "--method", "deq", "--grad", "phantom",
                      "--predictor", f"gaussian:{root / 'gauss.json'}",
                      "--T", 20, "--epochs", 200, "--lr", 0.05,
                      "--stop-loss", 1e-4, "--seed", 0, "--out", tmp_path / "inv")
        assert res.returncode == 0
        report = json.loads((tmp_path / "inv" / "run.json").read_text())
        assert report["best_loss"] <= 1e-4
        assert report["epochs_run"] < 200

    def test_exact_gradient_and_stochastic_method_run(self, fixtures, tmp_path):
        root = fixtures["root"]
        res = run_cli("invert", "--target", root / "target.stack",
                      "--method", "deq", "--grad", "exact", "--lr", 0.001,
                      "--predictor", f"gaussian:{root / 'gauss.json'}",
                      "--T", 20, "--S", 5, "--epochs", 10, "--out", tmp_path / "a")
        assert res.returncode == 0
        res = run_cli("invert", "--target", root / "target.stack",
                      "--method", "deq-stochastic", "--eta", 0.5,
                      "--predictor", f"gaussian:{root / 'gauss.json'}",
                      "--T", 20, "--S", 5, "--epochs", 10, "--out", tmp_path / "b")
        assert res.returncode == 0
        run_a = json.loads((tmp_path / "a" / "run.json").read_text())
        run_b = json.loads((tmp_path / "b" / "run.json").read_text())
        assert run_a["config"]["grad"] == "exact"
        assert run_b["config"]["eta"] == 0.5
