"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The training benchmarks (criteria 6, 7, 8 and 11) use a hidden-32, two-layer
model so the whole file fits the single-core runtime budgets.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

import test_distill as td
from dualflow import checkpoint as ckio
from dualflow.cli import attention_report, cmd_gradcheck, evaluate_model, main
from dualflow.config import RunConfig
from dualflow.diffcore import Tape
from dualflow.distill import (
    DistillBatch,
    DistillConfig,
    IntervalSample,
    dmd_terms,
    pair_mse,
    rows,
    shortcut_target,
    student_few,
    x0_from_velocity,
)
from dualflow.eval import drift_ratio, energy_distance, paired_bootstrap_ed
from dualflow.flow import interpolate, sample_noise, target_velocity, v_to_x0
from dualflow.model import DualModeModel, Mode, ModelConfig, init_params
from dualflow.sampler import ModelField, SamplerSpec, TimeGrid, generate_streams, multi_step_sample
from dualflow.synthdata import gen_streams, optimal_velocity_gaussian
from dualflow.trainer import (
    TrainRegime,
    gt_context,
    init_state,
    pretrain_branch,
    pretrain_step,
    run,
    train_step,
)

EULER_32 = (1 + 1 / 32) ** 32


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def bench_config(regime: str, seed: int, **over) -> RunConfig:
    raw = {"run_dir": "bench", "seed": seed, "data": {"regime": regime},
           "model": {"hidden": 32, "layers": 2}, "distill": {"n_fake": 1}}
    for k, v in over.items():
        raw.setdefault(k, {}).update(v) if isinstance(v, dict) else raw.__setitem__(k, v)
    return RunConfig.from_dict(raw)


def pretrain(cfg: RunConfig) -> DualModeModel:
    """Branch-wise then joint multi-mode pretraining, as `dualflow pretrain` does."""
    model = DualModeModel.create(cfg.model_config(), cfg.seed)
    tc = cfg.train_config(ema_decay=cfg.ema.pretrain)
    st = init_state(model, tc, with_fake=False)
    src = cfg.source()
    for b in "ab":
        pretrain_branch(st, src, tc, b, cfg.pretrain.branch_steps)
    for _ in range(cfg.pretrain.joint_steps):
        pretrain_step(st, src, tc, None)
    return st.model


def distill(cfg: RunConfig, teacher: DualModeModel, regime: str, steps: int, lam: float | None = None):
    """Train one regime from the pretrained checkpoint; returns the training state."""
    tc = cfg.train_config(regime)
    if lam is not None:
        tc = replace(tc, distill=replace(tc.distill, lam=lam))
    reg = TrainRegime(regime)
    frozen = teacher.clone() if reg is not TrainRegime.MUTUAL else None
    st = init_state(teacher.clone(), tc, with_fake=reg is not TrainRegime.TF_SHORTCUT, teacher=frozen)
    run(st, cfg.source(), tc, steps)
    return st


def ema_model(st) -> DualModeModel:
    return st.model.with_params(st.ema.shadow)


# -- 1 ----------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    rep, ok = cmd_gradcheck(None, probes=200, h=1e-5, tol=1e-4)
    dt = time.perf_counter() - t0
    ok = ok and len(rep.probes) >= 200 and dt < 60
    report(capsys, 1, ok, f"max rel error {rep.max_rel_error:.2e} over {len(rep.probes)} probes in {dt:.1f}s")


# -- 2 ----------------------------------------------------------------------------

def test_criterion_2_analytic_ode(capsys):
    def euler(n):
        return multi_step_sample(lambda x, a, b, m: x, np.ones((1, 1)), TimeGrid.uniform(n))[0, 0]

    x32, x64 = euler(32), euler(64)
    ratio = (np.e - x32) / (np.e - x64)
    ok = abs(x32 - 2.6770) <= 1e-3 and abs(x32 - EULER_32) < 1e-12 and abs(ratio / 2 - 1) <= 0.2
    report(capsys, 2, ok, f"x(1)={x32:.6f} (closed form {EULER_32:.6f}); error ratio 32->64 steps {ratio:.3f}")


# -- 3 ----------------------------------------------------------------------------

def test_criterion_3_algebraic_identities(capsys):
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((10_000, 5))
    eps = sample_noise(rng, x0.shape)
    t = rng.uniform(0, 1, (10_000, 1))
    err = float(np.max(np.abs(v_to_x0(interpolate(x0, eps, t), t, target_velocity(x0, eps)) - x0)))
    cfg = ModelConfig()
    model = DualModeModel.create(cfg, 0)
    from conftest import make_probe

    same = True
    for seed in range(3):
        tt = rng.uniform(0, 1, 3)
        q = make_probe(cfg, t1=tt, t2=tt, seed=seed)
        (a1, b1), (a2, b2) = model.predict(q, Mode.MULTI), model.predict(q, Mode.FEW)
        same &= np.array_equal(a1, a2) and np.array_equal(b1, b2)
    report(capsys, 3, err < 1e-12 and same, f"round-trip max error {err:.1e}; MULTI(t,t)==FEW(t,t) bitwise: {same}")


# -- 4 ----------------------------------------------------------------------------

def test_criterion_4_distillation_fixed_points(capsys):
    cfg = ModelConfig(hidden=16, layers=2, heads=2)
    batch, x = td._batch(cfg)
    iv = IntervalSample([0.2, 0.4, 0.5], [0.45, 0.65, 0.95], [0.3, 0.5, 0.75])
    eps = np.random.default_rng(0).standard_normal(x.shape)
    model = DualModeModel(cfg, init_params(cfg, 2, out_scale=1.0))

    # fake == teacher (a clone at w=1): exactly zero student gradient
    tape = Tape()
    P = tape.watch(model.params)
    x0_t = x0_from_velocity(tape, x, iv.t1, student_few(tape, P, model, batch, x, iv), model)
    x0_few = ModelField.join(x0_t[0].data.reshape(3, -1), x0_t[1].data.reshape(3, -1))
    terms = dmd_terms(model, model.clone(), batch, x0_few, iv.tau, eps, 1.0)
    g = tape.backward(pair_mse(tape, x0_t, rows(terms.target, model)))
    dmd_zero = all(not np.any(v) for v in g.values())

    # constant-output model: long-interval shortcut loss is exactly zero
    const = td.ConstantModel(cfg, 0.37)
    tape = Tape()
    P = tape.watch(const.params)
    tgt = shortcut_target(const, batch, x, iv, DistillConfig())
    sc = pair_mse(tape, student_few(tape, P, const, batch, x, iv), rows(tgt, const)).item()

    iso = []
    for branch, fn in (("shortcut-short", lambda: td.test_shortcut_target_is_stop_gradient(True)),
                       ("shortcut-long", lambda: td.test_shortcut_target_is_stop_gradient(False)),
                       ("dmd", td.test_dmd_target_is_stop_gradient)):
        try:
            fn()
            iso.append(branch)
        except AssertionError:
            pass
    ok = dmd_zero and sc == 0.0 and len(iso) == 3
    report(capsys, 4, ok, f"DMD grad zero at fixed point: {dmd_zero}; constant-model shortcut loss {sc}; "
                          f"stop-gradient isolation passed on {iso}")


# -- 5 ----------------------------------------------------------------------------

def test_criterion_5_objective_bookkeeping(capsys, tmp_path):
    cfg = bench_config("oscillator", 0, model={"hidden": 16}, train={"batch_size": 4, "R_max": 3})
    tc = cfg.train_config()
    model = DualModeModel.create(cfg.model_config(), 0)
    model.set_branch_coupling(True)
    st = init_state(model, tc)
    worst = 0.0
    for _ in range(8):
        rec = train_step(st, cfg.source(), tc)
        worst = max(worst, abs(rec.total - (rec.l_multi + rec.l_dmd / 3 + 2 * rec.l_sc / 3)))
    report(capsys, 5, worst <= 1e-12 and tc.distill.lam == 1 / 3,
           f"max |total - (L_multi + L_dmd/3 + 2 L_sc/3)| = {worst:.1e} over 8 steps")


# -- 9 ----------------------------------------------------------------------------

def test_criterion_9_nfe_accounting(capsys):
    cfg = ModelConfig(hidden=16, layers=1, heads=2)
    model = DualModeModel.create(cfg, 0)
    gt, conds = gen_streams(bench_config("gaussian", 0).source().regime,
                            bench_config("gaussian", 0).source().spec(1), [0, 1])
    first = [s[0] for s in gt]
    nfe = {}
    for name, spec in (("few4", SamplerSpec.few(4)), ("few8", SamplerSpec.few(8)),
                       ("multi32", SamplerSpec.multi(32)), ("multi32_cfg", SamplerSpec.multi(32, 3.0))):
        nfe[name] = generate_streams(model, conds, 3, spec, [5, 6], first).nfe_per_chunk
    ok = nfe == {"few4": 4, "few8": 8, "multi32": 32, "multi32_cfg": 64}
    report(capsys, 9, ok, f"NFE per chunk {nfe}")


# -- 10 ---------------------------------------------------------------------------

def test_criterion_10_persistence_and_determinism(capsys, tmp_path):
    raw = {"run_dir": str(tmp_path / "full"), "seed": 4,
           "model": {"hidden": 8, "layers": 1, "heads": 1, "time_freqs": 2},
           "train": {"steps": 6, "batch_size": 2, "K": 2, "R_max": 2, "rollout_steps": 2, "checkpoint_every": 3},
           "pretrain": {"branch_steps": 1, "joint_steps": 2}, "distill": {"n_fake": 1}}

    def conf(name, **train):
        r = json.loads(json.dumps(raw))
        r["run_dir"] = str(tmp_path / name)
        r["train"].update(train)
        p = tmp_path / f"{name}.json"
        p.write_text(json.dumps(r))
        return str(p)

    assert main(["train", conf("full")]) == 0
    # round trip
    a = tmp_path / "full" / "latest.ckpt"
    ck = ckio.load(a)
    ckio.save(tmp_path / "copy.ckpt", ck)
    round_trip = a.read_bytes() == (tmp_path / "copy.ckpt").read_bytes()
    # interrupted at step 3, resumed to 6
    assert main(["train", conf("part", steps=3)]) == 0
    assert main(["train", conf("part"), "--resume"]) == 0
    b = ckio.load(tmp_path / "part" / "latest.ckpt")
    resumed = ck.step == b.step and all(
        ck.groups[g][k].tobytes() == b.groups[g][k].tobytes() for g in ck.groups for k in ck.groups[g])
    # identical seeds, identical sample files
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / f"{name}.csv"
        assert main(["sample", str(a), "--streams", "2", "--num-chunks", "4", "--seed", "9", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    samples = outs[0] == outs[1]
    report(capsys, 10, round_trip and resumed and samples,
           f"checkpoint round trip bitwise: {round_trip}; resume == uninterrupted bitwise: {resumed}; "
           f"identical sample CSVs: {samples}")


# -- 6 ----------------------------------------------------------------------------

def velocity_gap_probes(cfg: RunConfig, n: int = 1000, seed: int = 123):
    """Noised ground-truth chunks with ground-truth histories, plus the closed-form optimal velocity."""
    src = cfg.source()
    streams, conds = gen_streams(src.regime, src.spec(cfg.train.R_max + 1), range(50_000, 50_000 + n))
    rng = np.random.default_rng(seed)
    R = rng.integers(0, cfg.train.R_max + 1, n)
    ctxs = [gt_context(s, r, cfg.train.K) for s, r in zip(streams, R)]
    x0 = ModelField.join(np.stack([s[r].a for s, r in zip(streams, R)]), np.stack([s[r].b for s, r in zip(streams, R)]))
    ts = np.stack([s[r].timestamps for s, r in zip(streams, R)])
    t = rng.uniform(0, 1, n)
    x = interpolate(x0, rng.standard_normal(x0.shape), t[:, None])
    batch = DistillBatch(ctxs, conds, ts)
    v_star = optimal_velocity_gaussian(x, t[:, None], src.regime)

    def gap(model: DualModeModel) -> float:
        return float(np.mean((batch.field(model).velocity(x, t, t, Mode.MULTI) - v_star) ** 2))

    return gap


CRIT6_STEPS = 600


def test_criterion_6_flow_matching_optimum(capsys):
    t0 = time.perf_counter()
    cfg = bench_config("gaussian", 0)
    gap = velocity_gap_probes(cfg)
    model = DualModeModel.create(cfg.model_config(), cfg.seed)
    model.set_branch_coupling(True)
    tc = cfg.train_config()
    st = init_state(model, tc)
    g0 = gap(model)
    run(st, cfg.source(), tc, CRIT6_STEPS)
    g1 = gap(st.model)
    dt = time.perf_counter() - t0
    ok = g1 < 0.1 * g0 and dt < 15 * 60
    report(capsys, 6, ok, f"MULTI velocity gap {g0:.4f} -> {g1:.4f} ({g1 / g0:.1%} of initial) "
                          f"after {CRIT6_STEPS} MUTUAL steps, {dt:.0f}s")


# -- 7 ----------------------------------------------------------------------------

CRIT7_STEPS = 1600


def chunk_samples(model: DualModeModel, cfg: RunConfig, spec: SamplerSpec, n: int = 256, chunks: int = 8):
    """Generated chunk vectors (positions 1..chunks-1 pooled), rows paired across models by seed."""
    src = cfg.source()
    gt, conds = gen_streams(src.regime, src.spec(1), [7_000 + i for i in range(n)])
    res = generate_streams(model, conds, chunks - 1, spec, [9_000 + i for i in range(n)], [s[0] for s in gt],
                           cfg.train.K, cfg.data.duration)
    return np.stack([c.flat() for s in res.streams for c in s[1:]])


def test_criterion_7_few_step_quality(capsys):
    cfg = bench_config("gaussian", 0, distill={"n_fake": 5}, pretrain={"branch_steps": 75, "joint_steps": 300})
    teacher = pretrain(cfg)
    models = {name: ema_model(distill(cfg, teacher, "mutual", CRIT7_STEPS, lam))
              for name, lam in (("hybrid", 1 / 3), ("sc_only", 0.0), ("dmd_only", 1.0))}
    src = cfg.source()
    ref_streams, _ = gen_streams(src.regime, src.spec(8), [10 ** 9 + i for i in range(512)])
    Y = np.stack([c.flat() for s in ref_streams for c in s[1:]])
    few = {k: chunk_samples(m, cfg, SamplerSpec.few(4)) for k, m in models.items()}
    multi = chunk_samples(models["hybrid"], cfg, SamplerSpec.multi(32))
    ed_few, ed_multi = energy_distance(few["hybrid"], Y), energy_distance(multi, Y)
    lines = [f"FEW-4 ED {ed_few:.4f} vs MULTI-32 ED {ed_multi:.4f} (limit 2x)"]
    ok = ed_few <= 2 * ed_multi
    for abl in ("sc_only", "dmd_only"):
        point, lo, hi = paired_bootstrap_ed(few["hybrid"], few[abl], Y, n_boot=200, seed=1)
        lines.append(f"hybrid - {abl}: {point:+.4f} [{lo:+.4f}, {hi:+.4f}]")
        ok &= lo <= 0.0
    report(capsys, 7, ok, "; ".join(lines))


# -- 8 and 11: the long-horizon benchmark ------------------------------------------------

REGIMES = ("mutual", "tf_dmd", "tf_shortcut", "self_forcing")
DRIFT_SEEDS = (0, 1, 2)
DRIFT_STEPS = 800


def drift_config(seed: int) -> RunConfig:
    # training sequences span up to R_max + 2 = 8 chunks; evaluation streams are 3x that
    return bench_config("oscillator", seed, distill={"n_fake": 5},
                        pretrain={"branch_steps": 75, "joint_steps": 300},
                        eval={"num_chunks": 24, "streams": 256, "reference_streams": 1024, "seed": 100 + seed})


@pytest.fixture(scope="module")
def drift_bench():
    t0 = time.perf_counter()
    out = {"ratios": {}, "tables": {}, "models": {}}
    for seed in DRIFT_SEEDS:
        cfg = drift_config(seed)
        teacher = pretrain(cfg)
        for reg in REGIMES:
            model = ema_model(distill(cfg, teacher, reg, DRIFT_STEPS))
            table = evaluate_model(model, cfg, reg)
            out["tables"][seed, reg] = table
            out["ratios"][seed, reg] = drift_ratio(table)["energy_distance"]
            if seed == DRIFT_SEEDS[0]:
                out["models"][reg] = model
    out["seconds"] = time.perf_counter() - t0
    return out


def test_criterion_8_long_horizon_drift(capsys, drift_bench):
    r = drift_bench["ratios"]
    wins, lines = 0, []
    for seed in DRIFT_SEEDS:
        m = r[seed, "mutual"]
        win = all(m < r[seed, b] for b in REGIMES[1:])
        wins += win
        eds = {reg: [round(row.energy_distance, 3) for row in drift_bench["tables"][seed, reg].rows] for reg in REGIMES}
        lines.append(f"seed {seed}: " + ", ".join(f"{reg} {r[seed, reg]:.3f} {eds[reg]}" for reg in REGIMES)
                     + (" (mutual lowest)" if win else ""))
    ok = wins >= 2 and drift_bench["seconds"] < 3600
    report(capsys, 8, ok, f"mutual has the smallest drift ratio on {wins}/3 seeds "
                          f"({drift_bench['seconds']:.0f}s total)\n    " + "\n    ".join(lines))


def test_criterion_11_attention_analyses(capsys, drift_bench):
    cfg = drift_config(DRIFT_SEEDS[0])
    sim, deg, base, _, ent_mutual = attention_report(drift_bench["models"]["mutual"], cfg)
    ent_tf = {reg: attention_report(drift_bench["models"][reg], cfg)[4] for reg in ("tf_dmd", "tf_shortcut")}
    ok = bool(np.all(deg == 1.0) and np.all(sim > base) and all(ent_mutual >= e for e in ent_tf.values()))
    report(capsys, 11, ok, f"degenerate similarity {deg.tolist()}; trained {np.round(sim, 4).tolist()} vs untrained "
                           f"{np.round(base, 4).tolist()}; late entropy mutual {ent_mutual:.4f} vs "
                           + ", ".join(f"{k} {v:.4f}" for k, v in ent_tf.items()))
