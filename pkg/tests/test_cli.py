import csv
import json
import shutil

import numpy as np
import pytest

from dualflow import checkpoint as ckio
from dualflow.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from dualflow.config import ConfigError, RunConfig
from dualflow.diffcore import Tape
from dualflow.model import DualModeModel, ModelConfig
from dualflow.trainer import TrainConfig, init_state


def tiny(run_dir, **over):
    cfg = {
        "run_dir": str(run_dir), "seed": 3,
        "model": {"hidden": 8, "layers": 1, "heads": 1, "time_freqs": 2},
        "train": {"steps": 6, "batch_size": 2, "K": 2, "R_max": 2, "rollout_steps": 2, "checkpoint_every": 4},
        "pretrain": {"branch_steps": 1, "joint_steps": 2},
        "distill": {"n_fake": 1},
        "eval": {"num_chunks": 6, "streams": 3, "reference_streams": 6},
    }
    for k, v in over.items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    return cfg


def write(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


# -- configuration ------------------------------------------------------------

def test_unknown_and_missing_keys_name_the_key(tmp_path, capsys):
    bad = tiny(tmp_path / "r")
    bad["train"]["stepz"] = 3
    assert main(["pretrain", write(tmp_path / "c.json", bad)]) == EXIT_CONFIG
    assert "train.stepz" in capsys.readouterr().err
    nokey = tiny(tmp_path / "r")
    del nokey["seed"]
    assert main(["train", write(tmp_path / "c.json", nokey)]) == EXIT_CONFIG
    assert "'seed'" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({**tiny(tmp_path), "bogus": 1})


@pytest.mark.parametrize("patch", [
    {"train": {"lr": "fast"}}, {"regime": "unknown"}, {"model": {"hidden": 9, "heads": 2}},
    {"eval": {"fractions": [0.5, 0.4]}}, {"sampler": {"few_steps": 9}}, {"ema": {"mutual": 1.0}},
    {"data": {"regime": "nonsense"}}, {"seed": -1},
])
def test_invalid_values_rejected(tmp_path, patch):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(tiny(tmp_path, **patch))


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["pretrain", str(p)]) == EXIT_CONFIG


def test_hash_ignores_run_location_only(tmp_path):
    a = RunConfig.from_dict(tiny(tmp_path / "a"))
    b = RunConfig.from_dict(tiny(tmp_path / "b", train={"steps": 50}))
    c = RunConfig.from_dict(tiny(tmp_path / "a", train={"lr": 2e-3}))
    assert a.hash() == b.hash() != c.hash()


def test_run_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DUALFLOW_RUN_ROOT", str(tmp_path))
    cfg = RunConfig.from_dict(tiny("rel"))
    assert cfg.run_path() == tmp_path / "rel"


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    model = DualModeModel.create(ModelConfig(hidden=8, layers=1, heads=1), 0)
    st = init_state(model, TrainConfig(), with_fake=True, teacher=model.clone())
    st.opt.m = {k: np.random.default_rng(1).standard_normal(v.shape) for k, v in model.params.items()}
    ck = ckio.from_state(st, 5, "abc", {"note": "x"})
    ckio.save(tmp_path / "a.ckpt", ck)
    back = ckio.load(tmp_path / "a.ckpt")
    assert (back.step, back.seed, back.config_hash, back.meta["note"]) == (0, 5, "abc", "x")
    for g in ck.groups:
        for k, v in ck.groups[g].items():
            assert back.groups[g][k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()
    st2 = ckio.to_state(back)
    assert st2.fake is not None and st2.teacher is not None
    ckio.save(tmp_path / "b.ckpt", ckio.from_state(st2, 5, "abc", {"note": "x"}))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage!" * 4)
    with pytest.raises(ckio.CheckpointError):
        ckio.load(p)
    model = DualModeModel.create(ModelConfig(hidden=8, layers=1, heads=1), 0)
    ckio.save(p, ckio.from_state(init_state(model, TrainConfig()), 0, "h"))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ckio.CheckpointError, match="truncated"):
        ckio.load(p)
    assert not list(tmp_path.glob("*.tmp"))


# -- pipeline -----------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    pre = write(root / "pre.json", tiny(root / "pre"))
    assert main(["pretrain", pre]) == EXIT_OK
    return root


def test_pretrain_outputs(pipeline):
    d = pipeline / "pre"
    rows = list(csv.DictReader(open(d / "stages.csv")))
    assert [r["stage"] for r in rows] == ["branch_a", "branch_b", "joint"]
    assert [r["coupled"] for r in rows] == ["False", "False", "True"]
    ck = ckio.load(d / "pretrain.ckpt")
    assert ck.meta["kind"] == "pretrain" and ck.meta["coupling_enabled_step"] == 2


def test_identical_runs_identical_checkpoints(pipeline, tmp_path):
    # same config (run_dir included, since it is stored in the metadata), run twice
    cfg = write(tmp_path / "a.json", tiny(tmp_path / "run"))
    blobs = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "run", ignore_errors=True)
        assert main(["train", cfg]) == EXIT_OK
        blobs.append((tmp_path / "run" / "latest.ckpt").read_bytes())
    assert blobs[0] == blobs[1]
    assert sorted(p.name for p in (tmp_path / "run").glob("ckpt_*")) == ["ckpt_000004.ckpt"]


def test_resume_matches_uninterrupted(tmp_path):
    full = tiny(tmp_path / "full")
    assert main(["train", write(tmp_path / "full.json", full)]) == EXIT_OK
    part = tiny(tmp_path / "part", train={"steps": 4})
    assert main(["train", write(tmp_path / "part.json", part)]) == EXIT_OK
    rest = tiny(tmp_path / "part")
    assert main(["train", write(tmp_path / "rest.json", rest), "--resume"]) == EXIT_OK
    a, b = ckio.load(tmp_path / "full" / "latest.ckpt"), ckio.load(tmp_path / "part" / "latest.ckpt")
    assert a.step == b.step == 6
    for g in a.groups:
        for k in a.groups[g]:
            assert a.groups[g][k].tobytes() == b.groups[g][k].tobytes(), (g, k)
    logs = [list(csv.reader(open(tmp_path / n / "train_log.csv"))) for n in ("full", "part")]
    assert logs[0] == logs[1]


def test_resume_hash_mismatch(tmp_path, capsys):
    assert main(["train", write(tmp_path / "a.json", tiny(tmp_path / "r", train={"steps": 4}))]) == EXIT_OK
    changed = write(tmp_path / "b.json", tiny(tmp_path / "r", train={"lr": 5e-4}))
    assert main(["train", changed, "--resume"]) == EXIT_CONFIG
    assert "hash" in capsys.readouterr().err
    assert main(["train", changed, "--resume", "--override-hash"]) == EXIT_OK


def test_teacher_regimes(pipeline, tmp_path):
    assert main(["train", write(tmp_path / "x.json", tiny(tmp_path / "x", regime="tf_dmd"))]) == EXIT_CONFIG
    teacher = str(pipeline / "pre" / "pretrain.ckpt")
    for reg in ("tf_dmd", "tf_shortcut", "self_forcing"):
        cfg = tiny(tmp_path / reg, regime=reg, teacher=teacher, init=teacher, train={"steps": 2})
        assert main(["train", write(tmp_path / f"{reg}.json", cfg)]) == EXIT_OK
        ck = ckio.load(tmp_path / reg / "latest.ckpt")
        assert ck.meta["regime"] == reg and "teacher" in ck.groups
        assert ("phi" in ck.groups) == (reg != "tf_shortcut")


def test_sample_deterministic_and_ema(pipeline, tmp_path, capsys):
    ck = str(pipeline / "pre" / "pretrain.ckpt")
    outs = []
    for name in ("a", "b"):
        assert main(["sample", ck, "--streams", "2", "--num-chunks", "3", "--out", str(tmp_path / f"{name}.csv")]) == 0
        outs.append(json.loads(capsys.readouterr().out))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert outs[0]["nfe_per_chunk"] == 4 and outs[0]["params"] == "theta"
    assert main(["sample", ck, "--mode", "multi", "--steps", "8", "--cfg-scale", "2", "--ema",
                 "--out", str(tmp_path / "c.csv")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["nfe_per_chunk"] == 16 and rep["params"] == "ema"
    assert (tmp_path / "c.csv").read_bytes() != (tmp_path / "a.csv").read_bytes()


def test_eval_order_and_drift_csv(pipeline, tmp_path):
    ck = str(pipeline / "pre" / "pretrain.ckpt")
    out = tmp_path / "m.csv"
    assert main(["eval", ck, ck, "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert [r["regime"] for r in rows] == ["mutual"] * 3 + ["mutual#2"] * 3
    assert [r["energy_distance"] for r in rows[:3]] == [r["energy_distance"] for r in rows[3:]]
    drift = list(csv.DictReader(open(tmp_path / "m_drift.csv")))
    assert [d["regime"] for d in drift] == ["mutual", "mutual#2"]


def test_attn_outputs(pipeline, tmp_path):
    ck = str(pipeline / "pre" / "pretrain.ckpt")
    assert main(["attn", ck, "--out-dir", str(tmp_path / "attn")]) == EXIT_OK
    sim = list(csv.DictReader(open(tmp_path / "attn" / "similarity.csv")))
    assert len(sim) == 1 and float(sim[0]["degenerate_similarity"]) == 1.0
    alloc = list(csv.DictReader(open(tmp_path / "attn" / "allocation.csv")))
    assert sum(float(r["mass"]) for r in alloc) == pytest.approx(1.0)


def test_missing_files_are_io_errors(tmp_path):
    assert main(["sample", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "o.csv")]) == EXIT_IO
    assert main(["train", write(tmp_path / "c.json", tiny(tmp_path / "r")), "--resume"]) == EXIT_IO


def test_gradcheck_csv(tmp_path):
    cfg = write(tmp_path / "g.json", tiny(tmp_path / "g"))
    out = tmp_path / "grad.csv"
    assert main(["gradcheck", cfg, "--probes", "30", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 30 and max(float(r["rel_error"]) for r in rows) < 1e-4


def test_gradcheck_flags_corrupted_backward(tmp_path, monkeypatch):
    original = Tape.gelu

    def broken(self, a):
        out = original(self, a)
        if out.idx >= 0:
            op = self.ops[-1]
            good = op.backward
            op.backward = lambda g: tuple(1.1 * x for x in good(g))
        return out

    monkeypatch.setattr(Tape, "gelu", broken)
    cfg = write(tmp_path / "g.json", tiny(tmp_path / "g"))
    assert main(["gradcheck", cfg, "--probes", "60"]) == EXIT_NUMERIC
