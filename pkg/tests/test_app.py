"""Application layer: bundled functions, configuration, and the CLI."""

import math
import os

import numpy as np
import pytest
import yaml

from dynens.app import CONFIGS_DIR, ConfigError, load_config, make_objective
from dynens.app.cli import main as cli_main
from dynens.app.functions import (
    gen_gpu_bucket_batch,
    gen_random_batch,
    sim_norm,
    sim_sleep,
    sim_stub_app,
    sim_synthetic,
)
from dynens.executor import Executor
from dynens.history import EnsembleRecord, History
from dynens.resources import PlatformSpec
from dynens.runtime import DefaultAlloc, PersistentAlloc, Tag, run_ensemble

SHIPPED = {name: os.path.join(CONFIGS_DIR, name)
           for name in os.listdir(CONFIGS_DIR)}


# -- test doubles --------------------------------------------------------


class FakeGenCtx:
    """Drives a persistent generator for a fixed number of batches."""

    def __init__(self, seed=0, batches=3):
        self.rng = np.random.default_rng(seed)
        self.sent = []
        self.recv_calls = 0
        self.remaining = batches

    def recv(self):
        self.recv_calls += 1
        return Tag.RESULT, []

    def send_recv(self, points):
        self.sent.append(list(points))
        self.remaining -= 1
        if self.remaining <= 0:
            return Tag.PERSIS_STOP, []
        return Tag.RESULT, []


class _RiggedRng:
    """uniform() replays canned rows regardless of the requested bounds."""

    def __init__(self, rows):
        self.rows = [np.asarray(r, dtype=float) for r in rows]

    def uniform(self, lb, ub, size=None):
        return self.rows.pop(0)


def record(sim_id, x, returned=True, f=0.0):
    return EnsembleRecord(sim_id=sim_id, x=np.asarray(x, float),
                          f=f, returned=returned)


# -- objective -----------------------------------------------------------


class TestObjective:
    def test_same_seed_same_surface(self):
        a = make_objective(2, seed=7)
        b = make_objective(2, seed=7)
        pts = np.random.default_rng(0).uniform(0, 1, (20, 2))
        assert np.array_equal(a(pts), b(pts))

    def test_seeds_differ(self):
        pts = np.random.default_rng(0).uniform(0, 1, (20, 2))
        assert not np.array_equal(make_objective(2, seed=0)(pts),
                                  make_objective(2, seed=1)(pts))

    def test_vectorized_matches_scalar(self):
        f = make_objective(3, seed=2)
        pts = np.random.default_rng(1).uniform(0, 1, (10, 3))
        batch = f(pts)
        singles = np.array([f(p) for p in pts])
        assert np.allclose(batch, singles, rtol=0, atol=1e-15)

    def test_scalar_input_gives_scalar(self):
        f = make_objective(2, seed=0)
        out = f(np.array([0.5, 0.5]))
        assert np.ndim(out) == 0


# -- generators ----------------------------------------------------------


class TestRandomBatch:
    def test_batches_within_bounds(self):
        ctx = FakeGenCtx(seed=0, batches=4)
        params = {"lb": [-3, -2], "ub": [3, 2], "batch_size": 50}
        tag = gen_random_batch([], params, ctx)
        assert tag == Tag.PERSIS_STOP
        assert len(ctx.sent) == 4
        for batch in ctx.sent:
            assert len(batch) == 50
            xs = np.array([p.x for p in batch])
            assert np.all(xs >= [-3, -2]) and np.all(xs < [3, 2])

    def test_identical_seeds_identical_points(self):
        params = {"lb": [0, 0], "ub": [1, 1], "batch_size": 8}
        a, b = FakeGenCtx(seed=5, batches=2), FakeGenCtx(seed=5, batches=2)
        gen_random_batch([], params, a)
        gen_random_batch([], params, b)
        assert np.array_equal(np.array([p.x for p in a.sent[0]]),
                              np.array([p.x for p in b.sent[0]]))

    def test_prior_history_burns_the_stream(self):
        params = {"lb": [0, 0], "ub": [1, 1], "batch_size": 2}
        fresh = FakeGenCtx(seed=9, batches=2)
        gen_random_batch([], params, fresh)

        resumed = FakeGenCtx(seed=9, batches=1)
        prior = [record(i, p.x) for i, p in enumerate(fresh.sent[0])]
        gen_random_batch(prior, params, resumed)
        # The resumed stream continues where the first run's second batch was.
        assert np.array_equal(np.array([p.x for p in resumed.sent[0]]),
                              np.array([p.x for p in fresh.sent[1]]))
        assert resumed.recv_calls == 0

    def test_unreturned_tail_waits_for_results_first(self):
        params = {"lb": [0, 0], "ub": [1, 1], "batch_size": 2}
        prior = [record(0, [0.1, 0.1]), record(1, [0.2, 0.2], returned=False)]
        ctx = FakeGenCtx(seed=9, batches=1)
        gen_random_batch(prior, params, ctx)
        assert ctx.recv_calls == 1


class TestGpuBucketBatch:
    def test_bucket_boundaries_and_clamp(self):
        # [0, 8] with 4 buckets of width 2; the top edge stays at 4.
        rows = [np.array([[0.0, 0.5], [1.0, 0.5], [1.999, 0.5],
                          [2.0, 0.5], [7.999, 0.5], [8.0, 0.5]])]
        ctx = FakeGenCtx(batches=1)
        ctx.rng = _RiggedRng(rows)
        params = {"lb": [0, 0], "ub": [8, 1], "batch_size": 6, "max_gpus": 4}
        gen_gpu_bucket_batch([], params, ctx)
        assert [p.num_gpus for p in ctx.sent[0]] == [1, 1, 1, 2, 4, 4]

    def test_single_bucket_always_one_gpu(self):
        ctx = FakeGenCtx(batches=2)
        params = {"lb": [0, 0], "ub": [8, 1], "batch_size": 5, "max_gpus": 1}
        gen_gpu_bucket_batch([], params, ctx)
        assert all(p.num_gpus == 1 for batch in ctx.sent for p in batch)

    def test_rejects_nonpositive_max_gpus(self):
        with pytest.raises(ValueError, match="max_gpus"):
            gen_gpu_bucket_batch([], {"lb": [0], "ub": [1], "batch_size": 1,
                                      "max_gpus": 0}, FakeGenCtx())


# -- simulators ----------------------------------------------------------


class TestSimulators:
    def test_norm(self):
        fs = sim_norm([record(0, [3.0, 4.0]), record(1, [0.0, 0.0])], {}, None)
        assert fs == [5.0, 0.0]

    def test_norm_permutation_invariant(self):
        a = sim_norm([record(0, [1.0, -2.0, 3.0])], {}, None)
        b = sim_norm([record(0, [3.0, 1.0, -2.0])], {}, None)
        assert a == b

    def test_sleep_returns_zeros(self):
        fs = sim_sleep([record(0, [0.1]), record(1, [0.2])],
                       {"seconds": 0.0}, None)
        assert fs == [0.0, 0.0]

    def test_synthetic_matches_objective(self):
        xs = [[0.25, 0.75], [0.5, 0.5]]
        fs = sim_synthetic([record(i, x) for i, x in enumerate(xs)],
                           {"landscape_seed": 3}, None)
        direct = make_objective(2, seed=3)
        assert fs == [float(direct(np.asarray(x))) for x in xs]

    def test_stub_app_requires_assignment(self, tmp_path):
        class Ctx:
            executor = Executor(PlatformSpec())
            assignment = None
            worker_id = 2
        with pytest.raises(RuntimeError, match="resource assignment"):
            sim_stub_app([record(0, [1.0, 0.0])],
                         {"app_path": str(tmp_path / "app")}, Ctx())


# -- configuration -------------------------------------------------------


def base_doc(tmp_path, **blocks):
    doc = {
        "version": 1,
        "ensemble": {"nworkers": 3,
                     "ensemble_dir": str(tmp_path / "ens")},
        "exit": {"sim_max": 8},
        "gen": {"function": "random_batch",
                "user": {"lb": [0, 0], "ub": [1, 1], "batch_size": 2}},
        "sim": {"function": "norm"},
    }
    doc.update(blocks)
    return doc


def write_doc(tmp_path, doc, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


class TestLoadConfig:
    def test_minimal_defaults(self, tmp_path):
        cfg = load_config(write_doc(tmp_path, base_doc(tmp_path)))
        run = cfg.run
        assert run.nworkers == 3
        assert run.comms == "local"
        assert run.seed == 0
        assert run.n_dims == 2
        assert run.sim_error == "nan"
        assert run.exit_criteria.sim_max == 8
        assert cfg.persistent and cfg.alloc_name == "persistent"
        assert run.gen_params["lb"] == [0.0, 0.0]
        assert isinstance(cfg.make_alloc(), PersistentAlloc)

    def test_one_shot_gen_defaults_to_default_alloc(self, tmp_path):
        doc = base_doc(tmp_path)
        doc["gen"]["function"] = "random_sample"
        cfg = load_config(write_doc(tmp_path, doc))
        assert not cfg.persistent and cfg.alloc_name == "default"
        assert isinstance(cfg.make_alloc(), DefaultAlloc)

    def test_resuming_alloc_carries_returned_ids(self, tmp_path):
        cfg = load_config(write_doc(tmp_path, base_doc(tmp_path)))
        prior = [record(0, [0, 0]), record(1, [0, 0], returned=False)]
        alloc = cfg.make_alloc(prior_records=prior)
        assert alloc.forwarded == {0}

    def test_flag_overrides_beat_document(self, tmp_path):
        path = write_doc(tmp_path, base_doc(tmp_path))
        cfg = load_config(path, nworkers=7, seed=42, comms="gen_on_manager",
                          ensemble_dir=str(tmp_path / "other"))
        assert cfg.run.nworkers == 7
        assert cfg.run.seed == 42
        assert cfg.run.comms == "gen_on_manager"
        assert cfg.run.ensemble_dir == str(tmp_path / "other")

    def test_gp_metrics_path_defaults_into_ensemble_dir(self, tmp_path):
        doc = base_doc(tmp_path)
        doc["gen"] = {"function": "gp_active_learning",
                      "user": {"lb": [0, 0], "ub": [1, 1], "batch_size": 2}}
        cfg = load_config(write_doc(tmp_path, doc))
        assert cfg.run.gen_params["metrics_path"] == os.path.join(
            cfg.run.ensemble_dir, "metrics.csv")
        doc["gen"]["user"]["metrics_path"] = "elsewhere.csv"
        cfg = load_config(write_doc(tmp_path, doc, "config2.yaml"))
        assert cfg.run.gen_params["metrics_path"] == "elsewhere.csv"

    def test_inventory_file(self, tmp_path):
        nodes = tmp_path / "nodes.txt"
        nodes.write_text("a 4 2\nb 4 2\n")
        doc = base_doc(tmp_path,
                       inventory={"source": "file", "path": str(nodes)})
        cfg = load_config(write_doc(tmp_path, doc))
        assert [n.name for n in cfg.run.inventory.nodes] == ["a", "b"]
        assert cfg.run.platform is not None  # implied by the inventory

    def test_detected_inventory_takes_explicit_node_shape(self, tmp_path):
        doc = base_doc(tmp_path,
                       platform={"overrides": {"cores_per_node": 4,
                                               "gpus_per_node": 2}},
                       inventory={"source": "detected"})
        cfg = load_config(write_doc(tmp_path, doc))
        assert all(n.cores == 4 and n.gpus == 2
                   for n in cfg.run.inventory.nodes)

    def test_detected_inventory_keeps_real_cores_without_override(
            self, tmp_path):
        doc = base_doc(tmp_path, inventory={"source": "detected"})
        cfg = load_config(write_doc(tmp_path, doc))
        assert all(n.cores == (os.cpu_count() or 1)
                   for n in cfg.run.inventory.nodes)

    def test_inventory_flag_override(self, tmp_path):
        nodes = tmp_path / "nodes.txt"
        nodes.write_text("x 8 0\n")
        path = write_doc(tmp_path, base_doc(tmp_path))
        cfg = load_config(path, inventory_path=str(nodes))
        assert [n.cores for n in cfg.run.inventory.nodes] == [8]

    def test_stop_val_round_trip(self, tmp_path):
        doc = base_doc(tmp_path)
        doc["exit"] = {"stop_val": {"field": "f", "threshold": 0.25}}
        cfg = load_config(write_doc(tmp_path, doc))
        assert cfg.run.exit_criteria.stop_val == ("f", 0.25)


def _drop(*keys):
    def mutate(doc):
        target = doc
        for key in keys[:-1]:
            target = target[key]
        del target[keys[-1]]
    return mutate


def _set(*keys_and_value):
    *keys, value = keys_and_value

    def mutate(doc):
        target = doc
        for key in keys[:-1]:
            target = target.setdefault(key, {})
        target[keys[-1]] = value
    return mutate


CONFIG_ERRORS = [
    (_set("bogus", 1), "top level: unknown"),
    (_drop("version"), "version: expected 1"),
    (_set("version", 2), "version: expected 1"),
    (_drop("ensemble", "nworkers"), "ensemble.nworkers: required"),
    (_set("ensemble", "nworkers", 0), "ensemble.nworkers: must be >= 1"),
    (_set("ensemble", "nworkers", "five"), "ensemble.nworkers: expected an integer"),
    (_set("ensemble", "comms", "smoke"), "ensemble.comms: must be one of"),
    (_set("ensemble", "seed", 1.5), "ensemble.seed: expected an integer"),
    (_drop("exit"), "exit: at least one"),
    (_set("exit", "sim_max", -1), "exit.sim_max: must be >= 0"),
    (_set("exit", "surprise", 1), "exit: unknown"),
    (_set("exit", "stop_val", {"field": "x", "threshold": 1}),
     "only 'f' is supported"),
    (_set("exit", "stop_val", {"field": "f"}), "threshold: required"),
    (_drop("gen", "function"), "gen.function: required"),
    (_set("gen", "function", "napping"), "unknown generator 'napping'"),
    (_set("sim", "function", "napping"), "unknown simulator 'napping'"),
    (_drop("gen", "user", "lb"), "gen.user.lb: required"),
    (_set("gen", "user", "lb", ["a", "b"]), "list of numbers"),
    (_set("gen", "user", "ub", [1, 1, 1]), "does not match lb length"),
    (_set("gen", "user", "ub", [0, 1]), "must exceed lb"),
    (_drop("gen", "user", "batch_size"), "gen.user.batch_size: required"),
    (_set("gen", "user", "batch_size", 0), "must be >= 1"),
    (_set("gen", "persistent", False), "is persistent"),
    (_set("alloc", "function", "default"), "needs the persistent allocator"),
    (_set("sim", "error_policy", "shrug"), "sim.error_policy: must be one of"),
    (_set("inventory", "path", "x.txt"), "only valid with source 'file'"),
    (_set("inventory", "source", "file"), "inventory.path: required"),
    (_set("platform", "overrides", "gpu_count", 4),
     "platform.overrides: unknown"),
    (_set("platform", "name", "krakenbox"), "platform"),
]


class TestConfigErrors:
    @pytest.mark.parametrize("mutate,match", CONFIG_ERRORS,
                             ids=[m for _, m in CONFIG_ERRORS])
    def test_rejected_with_field_path(self, tmp_path, mutate, match):
        doc = base_doc(tmp_path)
        mutate(doc)
        with pytest.raises(ConfigError, match=match):
            load_config(write_doc(tmp_path, doc))

    def test_one_shot_gen_with_persistent_alloc(self, tmp_path):
        doc = base_doc(tmp_path)
        doc["gen"]["function"] = "random_sample"
        doc["alloc"] = {"function": "persistent"}
        with pytest.raises(ConfigError, match="needs the default allocator"):
            load_config(write_doc(tmp_path, doc))

    def test_gen_on_manager_needs_persistent_pair(self, tmp_path):
        doc = base_doc(tmp_path)
        doc["gen"]["function"] = "random_sample"
        doc["ensemble"]["comms"] = "gen_on_manager"
        with pytest.raises(ConfigError, match="gen_on_manager"):
            load_config(write_doc(tmp_path, doc))

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(str(tmp_path / "missing.yaml"))

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("version: [1\n")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config(str(path))


# -- one-shot generator through the default allocator --------------------


class TestOneShotRun:
    def test_random_sample_fills_history(self, tmp_path):
        doc = base_doc(tmp_path)
        doc["gen"]["function"] = "random_sample"
        doc["gen"]["user"]["batch_size"] = 3
        doc["exit"] = {"gen_max": 9}
        cfg = load_config(write_doc(tmp_path, doc))
        history, flag = run_ensemble(cfg.run, cfg.gen_fn, cfg.sim_fn,
                                     alloc=cfg.make_alloc())
        assert flag == "gen_max"
        assert len(history) >= 9
        xs = np.array([r.x for r in history])
        assert np.all(xs >= 0.0) and np.all(xs < 1.0)
        for rec in history:
            if rec.returned:
                assert rec.f == pytest.approx(float(np.linalg.norm(rec.x)))


# -- command line --------------------------------------------------------


def run_cli(*argv):
    return cli_main(list(argv))


class TestCli:
    @pytest.mark.parametrize("name", sorted(SHIPPED))
    def test_shipped_configs_validate(self, capsys, name):
        assert run_cli("validate", SHIPPED[name]) == 0
        assert "ok" in capsys.readouterr().out

    def test_validate_reports_field_and_exits_2(self, tmp_path, capsys):
        doc = base_doc(tmp_path)
        del doc["exit"]
        assert run_cli("validate", write_doc(tmp_path, doc)) == 2
        assert "error: exit:" in capsys.readouterr().err

    def test_run_rejects_bad_config(self, tmp_path, capsys):
        doc = base_doc(tmp_path)
        doc["gen"]["function"] = "napping"
        assert run_cli("run", write_doc(tmp_path, doc)) == 2
        assert "unknown generator" in capsys.readouterr().err

    def test_run_and_replay(self, tmp_path, capsys):
        ens = str(tmp_path / "ens")
        assert run_cli("run", SHIPPED["random_norm.yaml"],
                       "--ensemble-dir", ens, "--seed", "2") == 0
        out = capsys.readouterr().out
        assert "completed: sim_max" in out
        assert "500 generated, 500 returned" in out
        dump = os.path.join(ens, "history.tsv")
        assert os.path.exists(dump)
        assert run_cli("replay-metrics", dump) == 0
        assert "500 returned" in capsys.readouterr().out

    def test_dry_run_prints_launch_lines(self, tmp_path, capfd):
        nodes = tmp_path / "nodes.txt"
        nodes.write_text("n0 4 4\n")
        assert run_cli("run", SHIPPED["random_stub.yaml"],
                       "--ensemble-dir", str(tmp_path / "ens"),
                       "--inventory", str(nodes), "--dry-run") == 0
        out = capfd.readouterr().out
        assert "[dry-run]" in out
        assert "./forces_stub" in out

    def test_dry_run_bucket_requests_vary(self, tmp_path, capfd):
        nodes = tmp_path / "nodes.txt"
        nodes.write_text("n0 4 4\n")
        assert run_cli("run", SHIPPED["gpu_bucket_stub.yaml"],
                       "--ensemble-dir", str(tmp_path / "ens"),
                       "--inventory", str(nodes), "--dry-run") == 0
        lines = [l for l in capfd.readouterr().out.splitlines()
                 if "[dry-run]" in l]
        widths = {l.split("-np ")[1].split()[0] for l in lines if "-np " in l}
        assert len(widths) > 1


# -- smoke matrix: generators x simulators x comms modes ------------------


def _stub_doc(tmp_path, stub_app, fake_mpiexec, gen_block, comms="local",
              sim_max=12):
    nodes = tmp_path / "nodes.txt"
    nodes.write_text("n0 4 4\n")
    return {
        "version": 1,
        "ensemble": {"nworkers": 5, "comms": comms,
                     "ensemble_dir": str(tmp_path / "ens"), "seed": 3},
        "exit": {"sim_max": sim_max},
        "platform": {"overrides": {
            "mpi_runner": "mpich",
            "runner_name": fake_mpiexec,
            "cores_per_node": 4,
            "gpus_per_node": 4,
            "gpu_setting_type": "env",
            "gpu_setting_name": "CUDA_VISIBLE_DEVICES",
        }},
        "inventory": {"source": "file", "path": str(nodes)},
        "gen": gen_block,
        "sim": {"function": "stub_app",
                "user": {"app_path": stub_app, "steps": 5}},
    }


RANDOM_STUB_GEN = {"function": "random_batch",
                   "user": {"lb": [1, 0], "ub": [8, 1], "batch_size": 4}}
GP_STUB_GEN = {"function": "gp_active_learning",
               "user": {"lb": [1, 0], "ub": [8, 1], "batch_size": 4}}


class TestSmokeMatrix:
    @pytest.mark.parametrize("comms", ["local", "gen_on_manager"])
    def test_random_norm(self, tmp_path, capsys, comms):
        assert run_cli("run", SHIPPED["random_norm.yaml"],
                       "--ensemble-dir", str(tmp_path / "ens"),
                       "--comms", comms) == 0
        assert "500 returned" in capsys.readouterr().out

    def test_gp_norm_local(self, tmp_path, capsys):
        doc = base_doc(tmp_path)
        doc["gen"] = {"function": "gp_active_learning",
                      "user": {"lb": [0, 0], "ub": [1, 1], "batch_size": 4}}
        doc["exit"] = {"sim_max": 24}
        assert run_cli("run", write_doc(tmp_path, doc)) == 0
        assert "24 returned" in capsys.readouterr().out
        assert os.path.exists(os.path.join(doc["ensemble"]["ensemble_dir"],
                                           "metrics.csv"))

    def test_gp_synthetic_gen_on_manager(self, tmp_path, capsys):
        # The shipped config already runs the generator inside the manager.
        assert run_cli("run", SHIPPED["gp_synthetic.yaml"],
                       "--ensemble-dir", str(tmp_path / "ens")) == 0
        assert "160 returned" in capsys.readouterr().out

    @pytest.mark.parametrize("comms", ["local", "gen_on_manager"])
    def test_random_stub(self, tmp_path, capsys, stub_app, fake_mpiexec,
                         comms):
        doc = _stub_doc(tmp_path, stub_app, fake_mpiexec, RANDOM_STUB_GEN,
                        comms=comms)
        assert run_cli("run", write_doc(tmp_path, doc)) == 0
        out = capsys.readouterr().out
        assert "12 returned" in out
        assert "failed" not in out

    @pytest.mark.parametrize("comms", ["local", "gen_on_manager"])
    def test_gp_stub(self, tmp_path, capsys, stub_app, fake_mpiexec, comms):
        doc = _stub_doc(tmp_path, stub_app, fake_mpiexec, GP_STUB_GEN,
                        comms=comms)
        assert run_cli("run", write_doc(tmp_path, doc)) == 0
        out = capsys.readouterr().out
        assert "12 returned" in out
        assert "failed" not in out

    def test_stub_history_has_real_energies(self, tmp_path, stub_app,
                                            fake_mpiexec, capsys):
        doc = _stub_doc(tmp_path, stub_app, fake_mpiexec, RANDOM_STUB_GEN,
                        sim_max=8)
        assert run_cli("run", write_doc(tmp_path, doc)) == 0
        capsys.readouterr()
        history = History.load(os.path.join(doc["ensemble"]["ensemble_dir"],
                                            "history.tsv"))
        returned = [r for r in history if r.returned]
        assert len(returned) >= 8
        assert all(math.isfinite(r.f) for r in returned)
