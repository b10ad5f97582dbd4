import dataclasses
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hierafl import cli
from hierafl.config import ConfigError, default_config, load_config, parse_config, serialize_config
from hierafl.data import Dataset, generate_synthetic
from hierafl.ensemble import EnsembleLibrary
from hierafl.experiment import (
    OUTPUT_ENV,
    evaluate,
    format_metrics,
    init_server,
    metrics_header,
    prepare_data,
    resolve_output,
    run_ablation,
    run_experiment,
)
from hierafl.model import HierarchyNetSpec, build_network, load_checkpoint
from hierafl.protocol import make_devices, run_round

GOLDEN = Path(__file__).parent / "golden"
TOY = GOLDEN / "toy.ini"


@pytest.fixture
def toy():
    return load_config(TOY)


class TestConfig:
    def test_round_trip_default(self):
        cfg = default_config()
        assert parse_config(serialize_config(cfg)) == cfg

    def test_round_trip_custom(self, toy):
        cfg = toy.with_seed(99).with_mode("logits_only")
        cfg = cfg.replace(rounds=dataclasses.replace(cfg.rounds, capabilities=(2, 1, 2), server_lr=0.5))
        again = parse_config(serialize_config(cfg))
        assert again == cfg
        assert again.rounds.capabilities == (2, 1, 2)

    def test_round_trip_floats_exact(self, toy):
        cfg = toy.replace(partition=dataclasses.replace(toy.partition, alpha=0.1 + 0.2))
        assert parse_config(serialize_config(cfg)).partition.alpha == 0.1 + 0.2

    def test_auto_is_none(self):
        cfg = parse_config("[distill]\nlr = auto\nmeta_lr = 0.5\n")
        assert cfg.distill.lr is None and cfg.distill.meta_lr == 0.5

    def test_seed_propagates_to_rounds(self):
        assert parse_config("[experiment]\nseed = 5\n").rounds.seed == 5

    @pytest.mark.parametrize(
        "text, path",
        [
            ("[distill]\ntemperature = 2\n", "distill.temperature"),
            ("[experiment]\nname = x\n", "experiment.name"),
            ("[extras]\na = 1\n", "extras"),
            ("[rounds]\ndevices = many\n", "rounds.devices"),
        ],
    )
    def test_rejections_name_the_field(self, text, path):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.path == path

    def test_cross_field_checks(self):
        with pytest.raises(ConfigError, match="num_classes"):
            parse_config("[dataset]\nclasses = 3\n")
        with pytest.raises(ConfigError, match="capabilities"):
            parse_config("[rounds]\ndevices = 2\ncapabilities = 1,5\n")

    def test_field_validation_surfaces(self):
        with pytest.raises(ConfigError) as info:
            parse_config("[distill]\nbeta = -1\n")
        assert info.value.path == "distill"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.ini")


class TestEvaluate:
    spec = HierarchyNetSpec(2, 4, (5, 5), 3, 5)

    def test_zero_weights_pick_class_zero(self):
        params = {k: np.zeros_like(v) for k, v in build_network(self.spec, 0).items()}
        test = Dataset(np.ones((10, 4)), np.arange(10) % 5, 5)
        accs, ens = evaluate(params, test)
        # every class ties, argmax falls to class 0
        assert accs == [20.0, 20.0] and ens == 20.0

    def test_single_class(self):
        spec = HierarchyNetSpec(1, 2, (2,), 2, 1)
        params = {k: np.zeros_like(v) for k, v in build_network(spec, 0).items()}
        assert evaluate(params, Dataset(np.ones((3, 2)), [0, 0, 0], 1)) == ([100.0], 100.0)

    def test_memorised_set(self):
        spec = HierarchyNetSpec(1, 10, (10,), 10, 10)
        params = {k: np.zeros_like(v) for k, v in build_network(spec, 0).items()}
        params["trunk.1.W"] = np.eye(10)
        params["exit.1.proj.W"] = np.eye(10)
        params["exit.1.cls.W"] = np.eye(10)
        test = Dataset(np.eye(10), np.arange(10), 10)
        assert evaluate(params, test)[0] == [100.0]

    def test_one_hot_ensemble_equals_exit(self):
        params = build_network(self.spec, 3)
        test = generate_synthetic(5, 4, 20, 0.5, seed=1)
        accs, _ = evaluate(params, test)
        for j in range(2):
            logits = np.full(2, -1000.0)
            logits[j] = 0.0
            assert evaluate(params, test, EnsembleLibrary(logits))[1] == accs[j]

    def test_chance_level_untrained(self):
        # one random net can luck into a class mapping, so average over initialisations
        spec = HierarchyNetSpec(4, 16, (16,) * 4, 8, 10)
        scores = []
        for seed in range(10):
            test = generate_synthetic(10, 16, 60, 0.5, seed=seed)
            accs, ens = evaluate(build_network(spec, seed), test)
            scores.append(accs + [ens])
        assert np.all(np.abs(np.mean(scores, axis=0) - 10.0) <= 5.0)

    def test_class_mismatch(self):
        with pytest.raises(ValueError, match="classes"):
            evaluate(build_network(self.spec, 0), Dataset(np.ones((2, 4)), [0, 1], 2))


class TestExperiment:
    def test_golden_metrics(self, toy, tmp_path):
        result = run_experiment(toy, output_dir=tmp_path)
        assert (tmp_path / "metrics.csv").read_text() == (GOLDEN / "toy_metrics.csv").read_text()
        assert (tmp_path / "summary.txt").read_text() == (GOLDEN / "toy_summary.txt").read_text()
        assert len(result.rows) == 2

    def test_header(self):
        assert metrics_header(2) == ["round", "lr", "acc_1", "acc_2", "acc_ensemble", "loss_meta", "loss_distill",
                                     "m_1", "m_2"]

    def test_outputs_written(self, toy, tmp_path):
        run_experiment(toy, output_dir=tmp_path)
        assert load_config(tmp_path / "config.ini") == toy
        arrays = load_checkpoint(tmp_path / "checkpoint.hfl")
        assert "ensemble.meta_logits" in arrays and "exit.2.cls.W" in arrays

    def test_identical_runs_identical_files(self, toy, tmp_path):
        run_experiment(toy, output_dir=tmp_path / "a")
        run_experiment(toy, output_dir=tmp_path / "b")
        for name in ("metrics.csv", "summary.txt", "checkpoint.hfl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_off_mode_equals_protocol_without_distillation(self, toy):
        cfg = toy.with_mode("off")
        result = run_experiment(cfg, write=False)
        prepared = prepare_data(cfg)
        server = init_server(cfg, prepared)
        devices = make_devices(server, prepared.shards, cfg.rounds)
        for row in result.rows:
            server, metrics = run_round(server, devices, cfg.rounds, distill=None)
            accs, ens = evaluate(server.params, prepared.test, server.library)
            assert (row.round, row.acc, row.acc_ensemble) == (metrics.round, accs, ens)
            assert (row.loss_meta, row.loss_distill) == (metrics.loss_meta, metrics.loss_distill)
        for k in server.params:
            np.testing.assert_array_equal(server.params[k], result.server.params[k])

    def test_off_mode_keeps_uniform_meta(self, toy):
        rows = run_experiment(toy.with_mode("off"), write=False).rows
        assert all(r.weights == [0.5, 0.5] for r in rows)

    def test_ablation_shares_partitions(self, toy, tmp_path):
        finals = run_ablation(toy, tmp_path)
        assert set(finals) == {"off", "logits_only", "full"}
        summary = (tmp_path / "ablation_summary.txt").read_text()
        assert "full.final_acc_2=" in summary
        for mode in finals:
            cfg = load_config(tmp_path / mode / "config.ini")
            assert cfg.distill.mode == mode and cfg.seed == toy.seed

    def test_format_metrics_round_trip(self, toy):
        rows = run_experiment(toy, write=False).rows
        text = format_metrics(rows, 2)
        assert text.splitlines()[0] == ",".join(metrics_header(2))
        assert len(text.splitlines()) == 3


class TestOutputResolution:
    def test_precedence(self, toy, monkeypatch):
        monkeypatch.delenv(OUTPUT_ENV, raising=False)
        assert resolve_output(toy) == Path("runs/toy")
        monkeypatch.setenv(OUTPUT_ENV, "/tmp/env-out")
        assert resolve_output(toy) == Path("/tmp/env-out")
        assert resolve_output(toy, "/tmp/flag") == Path("/tmp/flag")


class TestCli:
    def test_run_and_eval(self, tmp_path, capsys):
        assert cli.main(["run", "--config", str(TOY), "--out", str(tmp_path)]) == 0
        assert "metrics=" in capsys.readouterr().out
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "checkpoint.hfl"),
                         "--data", "synthetic:classes=3,dim=6,per_class=20,seed=7"])
        out = capsys.readouterr().out
        assert code == 0
        assert out.splitlines()[0].startswith("acc_1=") and "acc_ensemble=" in out

    def test_eval_matches_final_row(self, tmp_path, capsys, toy):
        cli.main(["run", "--config", str(TOY), "--out", str(tmp_path)])
        capsys.readouterr()
        # the toy test split is synthetic stream 1 with 20 per class, so eval reproduces the last row
        cli.main(["eval", "--checkpoint", str(tmp_path / "checkpoint.hfl"),
                  "--data", "synthetic:classes=3,dim=6,per_class=20,seed=7,spread=0.3"])
        got = dict(line.split("=") for line in capsys.readouterr().out.split())
        last = (tmp_path / "metrics.csv").read_text().splitlines()[-1].split(",")
        assert [got["acc_1"], got["acc_2"], got["acc_ensemble"]] == last[2:5]

    def test_env_override(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
        assert cli.main(["run", "--config", str(TOY)]) == 0
        assert (tmp_path / "env" / "metrics.csv").exists()

    def test_seed_flag(self, tmp_path, capsys):
        cli.main(["run", "--config", str(TOY), "--seed", "8", "--out", str(tmp_path)])
        assert "seed=8" in (tmp_path / "summary.txt").read_text()

    def test_partition_report(self, capsys):
        assert cli.main(["partition-report", "--config", str(TOY)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split("\t") == ["device", "capability", "n", "c0", "c1", "c2"]
        body = [line.split("\t") for line in lines[1:4]]
        assert [row[1] for row in body] == ["1", "2", "1"]
        total = sum(int(row[2]) for row in body)
        public = int(lines[-1].split()[1].split("=")[1])
        assert total + public == 90

    def test_config_error_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[model]\ndepth = 3\n")
        assert cli.main(["run", "--config", str(bad)]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        assert err[0].startswith("error kind=config path=model.depth message=")

    def test_runtime_error_line(self, tmp_path, capsys):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.hfl"), "--data", "synthetic:"]) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error kind=")

    def test_bad_data_spec(self):
        with pytest.raises(ValueError):
            cli.parse_data_spec("parquet:x")
        with pytest.raises(ValueError):
            cli.parse_data_spec("synthetic:colour=3")

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "hierafl", "partition-report", "--config", "preset"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0
        assert len(proc.stdout.splitlines()) == 8 + 2
