"""End-to-end command-line behavior, driven through main()."""

import json
from pathlib import Path

import numpy as np
import pytest

from layercollapse import (
    canonical_key,
    decode_genome,
    dominates,
    load_checkpoint,
    load_plan,
    plan_from_ops,
    save_plan,
)
from layercollapse.cli import (
    _COMPRESS_DEFAULTS,
    _PARETO_DEFAULTS,
    _resolve,
    build_parser,
    main,
)

from conftest import corpus_lines


VOLATILE_KEYS = {
    "elapsed_seconds",
    "total_seconds",
    "hit_seconds",
    "miss_seconds",
    "per_kind_seconds",
    "out_dir",
    "workers",
}


def _scrub(obj):
    """Strip timing and location fields so reruns can be compared exactly."""
    if isinstance(obj, dict):
        return {k: _scrub(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [_scrub(v) for v in obj]
    return obj


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _read_history(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    calib = root / "calibration.txt"
    calib.write_text("\n".join(corpus_lines(128)) + "\n", encoding="utf-8")
    for name, layers in (("ckpt4", 4), ("ckpt8", 8), ("ckpt16", 16)):
        rc = main(
            [
                "gen-toy",
                "--layers", str(layers),
                "--d-model", "16",
                "--n-heads", "2",
                "--d-ff", "24",
                "--max-seq-len", "32",
                "--seed", "1",
                "--out-dir", str(root / name),
            ]
        )
        assert rc == 0
    return root


def _compress_args(work, out, **extra):
    args = [
        "compress",
        "--checkpoint", str(work / "ckpt4"),
        "--calibration", str(work / "calibration.txt"),
        "--target-ratio", "0.25",
        "--population", "8",
        "--budget", "16",
        "--n-calibration", "8",
        "--calib-max-len", "16",
        "--out-dir", str(out),
    ]
    for flag, value in extra.items():
        args += [f"--{flag.replace('_', '-')}", str(value)]
    return args


class TestGenToy:
    def test_checkpoint_loads(self, work):
        model = load_checkpoint(work / "ckpt8")
        assert model.config.n_layers == 8
        assert model.config.d_model == 16

    def test_byte_deterministic(self, work, tmp_path):
        for sub in ("a", "b"):
            rc = main(
                [
                    "gen-toy",
                    "--layers", "4",
                    "--d-model", "16",
                    "--n-heads", "2",
                    "--d-ff", "24",
                    "--max-seq-len", "32",
                    "--seed", "1",
                    "--out-dir", str(tmp_path / sub),
                ]
            )
            assert rc == 0
        for name in ("model.bin", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_single_layer_rejected(self, tmp_path, capsys):
        rc = main(["gen-toy", "--layers", "1", "--out-dir", str(tmp_path / "bad")])
        assert rc == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("invalid-config: ")
        assert len(err.splitlines()) == 1

    def test_seed_changes_weights(self, work, tmp_path):
        rc = main(
            [
                "gen-toy",
                "--layers", "4",
                "--d-model", "16",
                "--n-heads", "2",
                "--d-ff", "24",
                "--max-seq-len", "32",
                "--seed", "2",
                "--out-dir", str(tmp_path / "other"),
            ]
        )
        assert rc == 0
        a = (work / "ckpt4" / "model.bin").read_bytes()
        b = (tmp_path / "other" / "model.bin").read_bytes()
        assert a != b


class TestCompress:
    def test_artifacts_and_report(self, work, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(_compress_args(work, out)) == 0
        assert capsys.readouterr().out.startswith("best fitness ")

        report = _read_json(out / "report.json")
        assert report["command"] == "compress"
        assert report["best"]["removed_layers"] == 1
        assert abs(report["best"]["ratio"] - 0.25) <= 0.5 / 4
        compressed = load_checkpoint(out / "compressed")
        assert compressed.config.n_layers == 3
        plan = load_plan(out / "plan.json")
        assert plan.removed_count == 1
        assert canonical_key(plan) == report["best"]["canonical_key"]

        history = _read_history(out / "history.jsonl")
        assert history[0]["generation"] == 0
        used = [h["evaluations_used"] for h in history]
        assert used[-1] >= 16
        assert used[-1] <= 16 + 8
        best_series = [h["best_fitness"] for h in history]
        assert all(b >= a for a, b in zip(best_series, best_series[1:]))
        run = report["runs"][0]
        assert run["cache"]["hits"] + run["cache"]["misses"] == used[-1]
        for artifact in run["artifacts"].values():
            assert (out / artifact).exists()

    def test_defaults_echo(self, work, tmp_path):
        out = tmp_path / "defaults"
        args = [
            "compress",
            "--checkpoint", str(work / "ckpt4"),
            "--calibration", str(work / "calibration.txt"),
            "--target-ratio", "0.25",
            "--n-calibration", "8",
            "--calib-max-len", "16",
            "--out-dir", str(out),
        ]
        assert main(args) == 0
        cfg = _read_json(out / "report.json")["config"]
        assert cfg["population"] == 100
        assert cfg["budget"] == 10000
        assert cfg["fitness"] == "similarity"
        assert cfg["repair_trials"] == 100
        assert cfg["crossover_prob"] == 0.9
        # unset mutation probability resolves to one over genome length
        assert cfg["mutation_prob"] == pytest.approx(1.0 / 12.0)

    def test_deterministic_outputs(self, work, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(_compress_args(work, out_a)) == 0
        assert main(_compress_args(work, out_b)) == 0
        for name in ("plan.json", "compressed/model.bin", "compressed/manifest.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
        assert _scrub(_read_json(out_a / "report.json")) == _scrub(
            _read_json(out_b / "report.json")
        )
        assert _scrub(_read_history(out_a / "history.jsonl")) == _scrub(
            _read_history(out_b / "history.jsonl")
        )

    def test_worker_count_invisible(self, work, tmp_path):
        out_a, out_b = tmp_path / "w1", tmp_path / "w4"
        assert main(_compress_args(work, out_a, workers=1)) == 0
        assert main(_compress_args(work, out_b, workers=4)) == 0
        assert (out_a / "plan.json").read_bytes() == (out_b / "plan.json").read_bytes()
        assert _scrub(_read_json(out_a / "report.json")) == _scrub(
            _read_json(out_b / "report.json")
        )

    def test_repeats(self, work, tmp_path):
        out = tmp_path / "rep"
        assert main(_compress_args(work, out, repeats=2, seed=4)) == 0
        report = _read_json(out / "report.json")
        assert [run["seed"] for run in report["runs"]] == [4, 5]
        for r in range(2):
            sub = out / f"repeat-{r:02d}"
            assert (sub / "plan.json").exists()
            assert (sub / "history.jsonl").exists()
            assert (sub / "compressed" / "model.bin").exists()
        agg = report["aggregate"]
        scores = [run["best_fitness"] for run in report["runs"]]
        assert agg["best_fitness_mean"] == pytest.approx(float(np.mean(scores)))
        assert agg["best_fitness_stddev"] == pytest.approx(
            float(np.std(scores, ddof=1))
        )
        best = report["best"]
        assert best["fitness"] == max(scores)

    def test_unreachable_target_rejected(self, work, tmp_path, capsys):
        out = tmp_path / "bad"
        args = _compress_args(work, out)
        args[args.index("--target-ratio") + 1] = "0.03"
        assert main(args) == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("invalid-target: ")
        assert "0" in err
        assert len(err.splitlines()) == 1

    def test_missing_required_setting(self, work, tmp_path, capsys):
        rc = main(
            [
                "compress",
                "--checkpoint", str(work / "ckpt4"),
                "--target-ratio", "0.25",
                "--out-dir", str(tmp_path / "x"),
            ]
        )
        assert rc == 1
        assert capsys.readouterr().err.startswith("invalid-config: ")

    def test_config_file_and_flag_precedence(self, work, tmp_path):
        config = {
            "checkpoint": str(work / "ckpt4"),
            "calibration": str(work / "calibration.txt"),
            "target_ratio": 0.25,
            "population": 8,
            "budget": 16,
            "n_calibration": 8,
            "calib_max_len": 16,
            "seed": 3,
        }
        config_path = tmp_path / "run.json"
        config_path.write_text(json.dumps(config))
        out = tmp_path / "cfg"
        rc = main(
            [
                "compress",
                "--config", str(config_path),
                "--seed", "9",
                "--out-dir", str(out),
            ]
        )
        assert rc == 0
        echoed = _read_json(out / "report.json")["config"]
        assert echoed["seed"] == 9  # flag wins
        assert echoed["population"] == 8  # file wins over default
        assert echoed["budget"] == 16

    def test_unknown_config_key_rejected(self, work, tmp_path, capsys):
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps({"populaton": 8}))
        rc = main(
            [
                "compress",
                "--config", str(config_path),
                "--checkpoint", str(work / "ckpt4"),
                "--calibration", str(work / "calibration.txt"),
                "--target-ratio", "0.25",
                "--out-dir", str(tmp_path / "x"),
            ]
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("invalid-config: ")
        assert "populaton" in err


@pytest.fixture(scope="module")
def run_dir(work, tmp_path_factory):
    out = tmp_path_factory.mktemp("pareto")
    rc = main(
        [
            "pareto",
            "--checkpoint", str(work / "ckpt8"),
            "--calibration", str(work / "calibration.txt"),
            "--population", "8",
            "--budget", "48",
            "--n-calibration", "8",
            "--calib-max-len", "16",
            "--seed", "2",
            "--out-dir", str(out),
        ]
    )
    assert rc == 0
    return out


class TestPareto:
    def test_front_csv_shape(self, run_dir):
        lines = (run_dir / "front.csv").read_text().splitlines()
        assert lines[0] == "ratio,fitness,removed_layers,canonical_key,plan_file"
        assert len(lines) > 1
        ratios = [float(line.split(",")[0]) for line in lines[1:]]
        assert ratios == sorted(ratios)

    def test_front_rows_non_dominated(self, run_dir):
        rows = []
        for line in (run_dir / "front.csv").read_text().splitlines()[1:]:
            ratio, fitness, *_ = line.split(",")
            rows.append((float(fitness), float(ratio)))
        for i, a in enumerate(rows):
            for b in rows[i + 1 :]:
                assert not dominates(a, b)
                assert not dominates(b, a)

    def test_plan_files_exist_and_load(self, run_dir):
        report = _read_json(run_dir / "report.json")
        for row in report["runs"][0]["front"]:
            plan = load_plan(run_dir / row["plan_file"])
            assert canonical_key(plan) == row["canonical_key"]
            assert plan.removed_count == row["removed_layers"]

    def test_rerun_identical_csv(self, run_dir, work, tmp_path):
        out = tmp_path / "again"
        rc = main(
            [
                "pareto",
                "--checkpoint", str(work / "ckpt8"),
                "--calibration", str(work / "calibration.txt"),
                "--population", "8",
                "--budget", "48",
                "--n-calibration", "8",
                "--calib-max-len", "16",
                "--seed", "2",
                "--out-dir", str(out),
            ]
        )
        assert rc == 0
        assert (out / "front.csv").read_bytes() == (run_dir / "front.csv").read_bytes()

    def test_default_population_and_budget(self):
        parser = build_parser()
        args = parser.parse_args(
            [
                "pareto",
                "--checkpoint", "unused",
                "--calibration", "unused",
                "--out-dir", "unused",
            ]
        )
        cfg = _resolve(
            args, _PARETO_DEFAULTS, required=("checkpoint", "calibration", "out_dir")
        )
        assert cfg["population"] == 200
        assert cfg["budget"] == 30000

    def test_compress_defaults_constants(self):
        assert _COMPRESS_DEFAULTS["population"] == 100
        assert _COMPRESS_DEFAULTS["budget"] == 10000


class TestApply:
    def test_identity_plan_bit_identical(self, work, tmp_path):
        plan_path = tmp_path / "identity.json"
        save_plan(decode_genome([0] * 24, 8), plan_path)
        out = tmp_path / "out"
        rc = main(
            [
                "apply",
                "--checkpoint", str(work / "ckpt8"),
                "--plan", str(plan_path),
                "--out-dir", str(out),
            ]
        )
        assert rc == 0
        assert (out / "model.bin").read_bytes() == (
            work / "ckpt8" / "model.bin"
        ).read_bytes()

    def test_redundant_genomes_byte_identical_outputs(self, work, tmp_path, capsys):
        genome_a = [5, 7, 1] + [0] * 45
        genome_b = [5, 7, 1, 6, 7, 1] + [0] * 42
        outputs = []
        for tag, genome in (("a", genome_a), ("b", genome_b)):
            plan_path = tmp_path / f"plan_{tag}.json"
            save_plan(decode_genome(genome, 16), plan_path)
            out = tmp_path / f"out_{tag}"
            rc = main(
                [
                    "apply",
                    "--checkpoint", str(work / "ckpt16"),
                    "--plan", str(plan_path),
                    "--out-dir", str(out),
                ]
            )
            assert rc == 0
            outputs.append((out / "model.bin").read_bytes())
        assert outputs[0] == outputs[1]
        assert "16 -> 14" in capsys.readouterr().out

    def test_matches_compress_output(self, work, tmp_path):
        run = tmp_path / "run"
        assert main(_compress_args(work, run)) == 0
        out = tmp_path / "applied"
        rc = main(
            [
                "apply",
                "--checkpoint", str(work / "ckpt4"),
                "--plan", str(run / "plan.json"),
                "--out-dir", str(out),
            ]
        )
        assert rc == 0
        assert (out / "model.bin").read_bytes() == (
            run / "compressed" / "model.bin"
        ).read_bytes()

    def test_layer_count_mismatch(self, work, tmp_path, capsys):
        plan_path = tmp_path / "plan8.json"
        save_plan(plan_from_ops([(2, 4)], 8), plan_path)
        rc = main(
            [
                "apply",
                "--checkpoint", str(work / "ckpt4"),
                "--plan", str(plan_path),
                "--out-dir", str(tmp_path / "x"),
            ]
        )
        assert rc == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("layer-count-mismatch: ")
        assert "8" in err and "4" in err
        assert len(err.splitlines()) == 1


class TestEval:
    def _eval_args(self, work, a, b, out, **extra):
        args = [
            "eval",
            "--checkpoint-a", str(a),
            "--checkpoint-b", str(b),
            "--calibration", str(work / "calibration.txt"),
            "--n-calibration", "8",
            "--calib-max-len", "16",
            "--out-dir", str(out),
        ]
        for flag, value in extra.items():
            if flag == "kinds":
                args += ["--kinds", *value]
            else:
                args += [f"--{flag.replace('_', '-')}", str(value)]
        return args

    def test_same_model_perfect_scores(self, work, tmp_path, capsys):
        out = tmp_path / "self"
        rc = main(self._eval_args(work, work / "ckpt4", work / "ckpt4", out))
        assert rc == 0
        report = _read_json(out / "report.json")
        sim = report["metrics"]["similarity"]
        assert sim["overall"] == pytest.approx(1.0, abs=1e-9)
        assert sim["attention"] == pytest.approx(1.0, abs=1e-9)
        assert report["metrics"]["kl_divergence"] == pytest.approx(0.0, abs=1e-9)
        assert report["metrics"]["perplexity_a"] == report["metrics"]["perplexity_b"]
        assert set(report["timing"]["per_kind_seconds"]) == {
            "similarity",
            "kl",
            "perplexity",
        }
        assert "similarity overall 1.000000" in capsys.readouterr().out

    def test_compressed_with_plan(self, work, tmp_path):
        run = tmp_path / "run"
        assert main(_compress_args(work, run)) == 0
        out = tmp_path / "eval"
        rc = main(
            self._eval_args(
                work,
                work / "ckpt4",
                run / "compressed",
                out,
                plan=run / "plan.json",
            )
        )
        assert rc == 0
        report = _read_json(out / "report.json")
        sim = report["metrics"]["similarity"]
        for field in ("attention", "ffn", "hidden"):
            assert -1.0 <= sim[field] <= 1.0
        assert sim["overall"] == pytest.approx(
            (sim["attention"] + sim["ffn"] + sim["hidden"]) / 3.0, abs=1e-12
        )
        assert report["metrics"]["kl_divergence"] >= 0.0

    def test_kind_filtering(self, work, tmp_path):
        out = tmp_path / "klonly"
        rc = main(
            self._eval_args(work, work / "ckpt4", work / "ckpt4", out, kinds=["kl"])
        )
        assert rc == 0
        report = _read_json(out / "report.json")
        assert set(report["metrics"]) == {"kl_divergence"}
        assert set(report["timing"]["per_kind_seconds"]) == {"kl"}

    def test_mismatch_without_plan(self, work, tmp_path, capsys):
        rc = main(
            self._eval_args(work, work / "ckpt8", work / "ckpt4", tmp_path / "x")
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("layer-count-mismatch: ")
        assert "plan" in err

    def test_mismatch_without_plan_kl_only_allowed(self, work, tmp_path):
        out = tmp_path / "xkl"
        rc = main(
            self._eval_args(
                work, work / "ckpt8", work / "ckpt4", out, kinds=["kl", "perplexity"]
            )
        )
        assert rc == 0
        report = _read_json(out / "report.json")
        assert report["metrics"]["kl_divergence"] > 0.0
        assert report["metrics"]["perplexity_a"] >= 1.0
        assert report["metrics"]["perplexity_b"] >= 1.0

    def test_wrong_plan_rejected(self, work, tmp_path, capsys):
        plan_path = tmp_path / "plan.json"
        save_plan(plan_from_ops([(2, 4)], 8), plan_path)
        rc = main(
            self._eval_args(
                work,
                work / "ckpt4",
                work / "ckpt4",
                tmp_path / "x",
                plan=plan_path,
            )
        )
        assert rc == 1
        assert capsys.readouterr().err.startswith("layer-count-mismatch: ")


class TestTopLevel:
    def test_no_command_prints_help(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().out

    def test_unknown_kind_rejected_by_parser(self, capsys):
        with pytest.raises(SystemExit):
            main(["compress", "--fitness", "accuracy"])
