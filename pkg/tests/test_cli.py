import csv
import json

import pytest

from schedlab import cli
from schedlab.config import (
    PRESETS, preset_config, resolve, run_config_from_dict, run_config_from_json,
    run_config_to_json,
)
from schedlab.neuralnet import load_checkpoint, params_hash


def micro_config_dict(out_dir, **over):
    doc = {
        "seed": 5,
        "out_dir": str(out_dir),
        "mode": "bc-then-pg",
        "env_mode": "online",
        "objective": "slowdown",
        "load": 0.7,
        "policy": "mlp",
        "mlp_hidden": 8,
        "workload": {"r": 4, "long_duration_range": [4, 5],
                     "arrival_window": 10},
        "env": {"r": 4, "time_horizon": 6, "num_slots": 2,
                "backlog_capacity": 6, "arrival_window": 10,
                "hard_step_cap": 200},
        "train": {"jobsets_per_epoch": 3, "rollouts_per_jobset": 2,
                  "epochs": 2, "bc_num_jobsets": 12, "bc_max_epochs": 3,
                  "bc_batch_size": 16, "checkpoint_every": 1},
    }
    doc.update(over)
    return doc


class TestConfig:
    def test_presets_resolve(self):
        paper = preset_config("paper")
        assert paper.env.num_slots == 10 and paper.env.r == 20
        assert paper.env.time_horizon == 20
        assert paper.env.backlog_capacity == 60
        assert paper.workload.arrival_window == 50
        assert paper.train.jobsets_per_epoch == 100
        assert paper.train.rollouts_per_jobset == 20
        desk = preset_config("desk")
        assert desk.env.r == 10 and desk.env.num_slots == 5
        assert desk.workload.long_duration_range == (5, 8)

    def test_unknown_keys_rejected(self):
        doc = micro_config_dict("x")
        doc["bogus"] = 1
        with pytest.raises(ValueError, match="bogus"):
            run_config_from_dict(doc)
        doc = micro_config_dict("x")
        doc["env"]["nonsense"] = 2
        with pytest.raises(ValueError, match="nonsense"):
            run_config_from_dict(doc)

    def test_round_trip(self):
        cfg = run_config_from_dict(micro_config_dict("y"))
        again = run_config_from_json(run_config_to_json(cfg))
        assert again == cfg

    def test_offline_resolution(self):
        doc = micro_config_dict("z", env_mode="offline",
                                objective="completion_time")
        doc["workload"]["num_jobs"] = 5
        cfg = run_config_from_dict(doc)
        workload, env = resolve(cfg)
        assert env.num_slots == 5 and env.backlog_capacity == 0
        assert env.objective == "completion_time"

    def test_online_resolution_sets_rate(self):
        cfg = run_config_from_dict(micro_config_dict("w"))
        workload, env = resolve(cfg)
        assert workload.arrival_rate is not None
        from schedlab.workload import compute_load
        assert compute_load(workload) == pytest.approx(0.7)


class TestGen:
    def test_deterministic_files(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            rc = cli.main(["gen", "--scale", "desk", "--seed", "3",
                           "--count", "4", "--load", "0.8",
                           "--out", str(out)])
            assert rc == 0
        for i in range(4):
            name = f"jobset_{i:04d}.json"
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_offline_zero_arrivals(self, tmp_path):
        rc = cli.main(["gen", "--scale", "desk", "--mode", "offline",
                       "--count", "2", "--out", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "jobset_0000.json").read_text())
        assert doc["mode"] == "offline"
        assert all(j["arrival"] == 0 for j in doc["jobs"])
        assert len(doc["jobs"]) == PRESETS["desk"]["workload"]["num_jobs"]

    def test_count_honored(self, tmp_path):
        cli.main(["gen", "--scale", "desk", "--count", "7", "--load", "0.5",
                  "--out", str(tmp_path)])
        assert len(list(tmp_path.glob("jobset_*.json"))) == 7


class TestTrain:
    def test_bc_then_pg_artifacts(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        out = tmp_path / "run"
        cfg_path.write_text(json.dumps(micro_config_dict(out)))
        rc = cli.main(["train", "--config", str(cfg_path)])
        assert rc == 0
        assert (out / "config.json").exists()
        assert (out / "bc_final.npz").exists()
        assert (out / "bc_history.csv").exists()
        assert (out / "pg_init.npz").exists()
        assert (out / "pg_final.npz").exists()
        assert (out / "metrics.csv").exists()
        assert list((out / "checkpoints").glob("pg_epoch_*.npz"))
        # bc-then-pg contract: PG starts from the saved BC parameters
        bc_net, _, _ = load_checkpoint(out / "bc_final.npz")
        pg0, _, _ = load_checkpoint(out / "pg_init.npz")
        assert params_hash(bc_net) == params_hash(pg0)
        with open(out / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["epoch"] for r in rows] == ["0", "1"]

    def test_resume_reproduces_metrics(self, tmp_path):
        import schedlab.training as training
        from schedlab.config import run_config_from_dict

        full = run_config_from_dict(micro_config_dict(tmp_path / "full",
                                                      mode="pg"))
        training.train(full)

        part_doc = micro_config_dict(tmp_path / "part", mode="pg")
        part_doc["train"]["epochs"] = 1
        training.train(run_config_from_dict(part_doc))
        part_doc["train"]["epochs"] = 2
        training.train(run_config_from_dict(part_doc), resume=True)

        def metric_rows(p):
            with open(p / "metrics.csv") as f:
                return [
                    {k: v for k, v in row.items() if k != "wallclock_s"}
                    for row in csv.DictReader(f)
                ]

        assert metric_rows(tmp_path / "full") == metric_rows(tmp_path / "part")

    def test_rerun_from_resolved_config_reproduces_metrics(self, tmp_path):
        import schedlab.training as training

        doc = micro_config_dict(tmp_path / "a", mode="pg")
        training.train(run_config_from_dict(doc))
        # the run dir's resolved config, pointed at a fresh out dir, must
        # reproduce the metrics byte for byte (wallclock aside)
        resolved = json.loads((tmp_path / "a" / "config.json").read_text())
        resolved["out_dir"] = str(tmp_path / "b")
        training.train(run_config_from_dict(resolved))

        def rows(p):
            with open(p / "metrics.csv") as f:
                return [{k: v for k, v in r.items() if k != "wallclock_s"}
                        for r in csv.DictReader(f)]

        assert rows(tmp_path / "a") == rows(tmp_path / "b")

    def test_offline_training_runs(self, tmp_path):
        doc = micro_config_dict(tmp_path / "off", mode="pg",
                                env_mode="offline",
                                objective="completion_time")
        doc["workload"]["num_jobs"] = 4
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(doc))
        rc = cli.main(["train", "--config", str(cfg_path)])
        assert rc == 0
        saved = json.loads((tmp_path / "off" / "config.json").read_text())
        assert saved["env_mode"] == "offline"


class TestEval:
    def test_heuristics_only(self, tmp_path):
        rc = cli.main(["eval", "--scale", "desk", "--agents", "sjf,random",
                       "--loads", "0.7", "--seeds-per-cell", "3",
                       "--seed", "2", "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "sweep.csv").exists()

    def test_policy_agent_from_checkpoint(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        out = tmp_path / "run"
        doc = micro_config_dict(out, mode="pg")
        cfg_path.write_text(json.dumps(doc))
        assert cli.main(["train", "--config", str(cfg_path)]) == 0
        eval_out = tmp_path / "eval"
        rc = cli.main(["eval", "--config", str(cfg_path),
                       "--agents", f"policy:{out / 'pg_final.npz'}",
                       "--loads", "0.7", "--seeds-per-cell", "2",
                       "--out", str(eval_out)])
        assert rc == 0

    def test_default_load_grid(self):
        parser_loads = ",".join(f"{x / 10:.1f}" for x in range(1, 20))
        assert parser_loads.startswith("0.1,") and parser_loads.endswith("1.9")
        assert len(parser_loads.split(",")) == 19


class TestCurves:
    def test_curves_command(self, tmp_path):
        out = tmp_path / "run"
        doc = micro_config_dict(out, mode="pg")
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(doc))
        cli.main(["train", "--config", str(cfg_path)])
        rc = cli.main(["curves", "--metrics", str(out / "metrics.csv"),
                       "--out", str(tmp_path / "curves")])
        assert rc == 0
        assert (tmp_path / "curves" / "curves.csv").exists()


class TestSelftest:
    def test_selftest_passes(self, capsys):
        rc = cli.main(["selftest"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "selftest: PASS" in out

    def test_selftest_detects_injected_fault(self, capsys, monkeypatch):
        from schedlab import neuralnet as nn
        saved = nn.Dense.backward

        def corrupted(self, dy):
            dx = saved(self, dy)
            self.gw *= -1.0
            return dx

        monkeypatch.setattr(nn.Dense, "backward", corrupted)
        rc = cli.main(["selftest"])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out
