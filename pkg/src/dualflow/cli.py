"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckio
from .config import ConfigError, RunConfig, resolve
from .diffcore import NonFiniteError, Tape, grad_check
from .distill import pair_mse
from .eval import (
    MetricTable,
    WindowSpec,
    attention_similarity,
    drift_ratio,
    late_allocation,
    probe_query,
    probe_t2,
    throughput_report,
    windowed_eval,
)
from .model import DualModeModel, Mode, ModelConfig, init_params, make_query
from .sampler import SamplerSpec, generate_streams
from .synthdata import Regime, gen_streams, write_stream_csv
from .trainer import (
    CsvLog,
    StreamSource,
    TrainRegime,
    gt_context,
    init_state,
    pretrain_branch,
    pretrain_step,
    run,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
NEEDS_TEACHER = (TrainRegime.TF_DMD, TrainRegime.TF_SHORTCUT, TrainRegime.SELF_FORCING)


def _meta(cfg: RunConfig, kind: str) -> dict:
    return {"kind": kind, "regime": cfg.regime, "config": cfg.to_dict()}


def _config_of(ck: ckio.Checkpoint) -> RunConfig:
    try:
        return RunConfig.from_dict(ck.meta["config"])
    except KeyError:
        raise ConfigError("checkpoint carries no run configuration") from None


# -- pretrain ----------------------------------------------------------------------

def cmd_pretrain(cfg: RunConfig) -> Path:
    """Branch-wise pretraining (coupling off), then joint multi-mode training."""
    out = cfg.run_path()
    out.mkdir(parents=True, exist_ok=True)
    model = DualModeModel.create(cfg.model_config(), cfg.seed)
    tc = cfg.train_config(ema_decay=cfg.ema.pretrain)
    state = init_state(model, tc, with_fake=False, ema_decay=cfg.ema.pretrain)
    source = cfg.source()
    log = CsvLog(out / "pretrain_log.csv")
    stages = []
    for branch in ("a", "b"):
        start = state.step
        pretrain_branch(state, source, tc, branch, cfg.pretrain.branch_steps, log)
        stages.append((f"branch_{branch}", start, state.step, False))
    start = state.step
    for _ in range(cfg.pretrain.joint_steps):
        log.write(pretrain_step(state, source, tc, None))
    stages.append(("joint", start, state.step, True))
    with open(out / "stages.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "start_step", "end_step", "coupled"])
        w.writerows(stages)
    path = out / "pretrain.ckpt"
    meta = _meta(cfg, "pretrain")
    meta["coupling_enabled_step"] = start
    ckio.save(path, ckio.from_state(state, cfg.seed, cfg.hash(), meta))
    return path


# -- train -------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, resume: bool = False, override_hash: bool = False) -> Path:
    regime = TrainRegime(cfg.regime)
    out = cfg.run_path()
    out.mkdir(parents=True, exist_ok=True)
    latest = out / "latest.ckpt"
    tc = cfg.train_config()
    if resume:
        ck = ckio.load(latest)
        if ck.config_hash != cfg.hash() and not override_hash:
            raise ConfigError("config hash differs from the checkpoint (use --override-hash to force)")
        state = ckio.to_state(ck)
    else:
        if regime in NEEDS_TEACHER and not cfg.teacher:
            raise ConfigError(f"regime '{regime.value}' requires 'teacher' (a frozen pretrained checkpoint)")
        model = (ckio.model_of(ckio.load(resolve(cfg.init))) if cfg.init
                 else DualModeModel.create(cfg.model_config(), cfg.seed))
        model.set_branch_coupling(True)
        teacher = ckio.model_of(ckio.load(resolve(cfg.teacher))) if regime in NEEDS_TEACHER else None
        state = init_state(model, tc, with_fake=regime is not TrainRegime.TF_SHORTCUT, teacher=teacher)
    if regime in NEEDS_TEACHER and state.teacher is None:
        raise ConfigError(f"regime '{regime.value}' has no frozen teacher in the checkpoint")
    log = CsvLog(out / "train_log.csv", append=resume)
    source = cfg.source()
    meta = _meta(cfg, "train")
    every = cfg.train.checkpoint_every
    while state.step < cfg.train.steps:
        n = min(every - state.step % every, cfg.train.steps - state.step)
        run(state, source, tc, n, log)
        ck = ckio.from_state(state, cfg.seed, cfg.hash(), meta)
        if state.step % every == 0:
            ckio.save(out / f"ckpt_{state.step:06d}.ckpt", ck)
        ckio.save(latest, ck)
    if not latest.exists():
        ckio.save(latest, ckio.from_state(state, cfg.seed, cfg.hash(), meta))
    return latest


# -- sample ------------------------------------------------------------------------

def _spec(cfg: RunConfig, mode: str, steps: int | None, cfg_scale: float | None) -> SamplerSpec:
    if mode == "few":
        return SamplerSpec.few(steps or cfg.sampler.few_steps)
    return SamplerSpec.multi(steps or cfg.sampler.multi_steps, cfg.sampler.cfg_scale if cfg_scale is None else cfg_scale)


def _first_chunks(cfg: RunConfig, n: int, seed: int, num_chunks: int):
    src = cfg.source()
    return gen_streams(src.regime, src.spec(num_chunks), [seed * 100003 + i for i in range(n)])


def cmd_sample(ckpt: str, mode: str, num_chunks: int, seed: int, out: str, streams: int = 1,
               steps: int | None = None, cfg_scale: float | None = None, use_ema: bool = False) -> dict:
    ck = ckio.load(resolve(ckpt))
    cfg = _config_of(ck)
    model = ckio.model_of(ck, "ema" if use_ema else "theta")
    spec = _spec(cfg, mode, steps, cfg_scale)
    gt, conds = _first_chunks(cfg, streams, seed, 1)
    t0 = time.perf_counter()
    res = generate_streams(model, conds, num_chunks, spec, [seed * 7919 + i for i in range(streams)],
                           [s[0] for s in gt], cfg.train.K, cfg.data.duration)
    thr = throughput_report(res, time.perf_counter() - t0)
    path = resolve(out)
    for i, s in enumerate(res.streams):
        write_stream_csv(path, s, i, append=i > 0)
    report = {"mode": mode, "steps": spec.grid.steps, "cfg_scale": spec.cfg_scale, "streams": streams,
              "num_chunks": num_chunks, "nfe_per_chunk": thr.nfe_per_chunk,
              "chunks_per_sec": thr.chunks_per_sec, "params": "ema" if use_ema else "theta"}
    return report


# -- eval --------------------------------------------------------------------------

def evaluate_model(model: DualModeModel, cfg: RunConfig, label: str, fractions=None, streams: int | None = None,
                   spec: SamplerSpec | None = None) -> MetricTable:
    """FEW-sampled streams from a ground-truth first chunk, scored per window."""
    e = cfg.eval
    n = streams or e.streams
    src = cfg.source()
    gt, conds = gen_streams(src.regime, src.spec(1), [e.seed * 100003 + i for i in range(n)])
    spec = spec or SamplerSpec.few(cfg.sampler.few_steps)
    res = generate_streams(model, conds, e.num_chunks - 1, spec, [e.seed * 7919 + i for i in range(n)],
                           [s[0] for s in gt], cfg.train.K, cfg.data.duration)
    ref, _ = gen_streams(src.regime, src.spec(e.num_chunks),
                         [10 ** 9 + e.seed * 100003 + i for i in range(e.reference_streams)])
    windows = WindowSpec.proportional(e.num_chunks - 1, fractions or e.fractions, offset=1)
    return windowed_eval(res.streams, ref, windows, label, src.regime.true_lag, res.nfe_per_chunk)


DRIFT_COLUMNS = ("regime", "energy_distance", "sync_lag_error", "displacement_mean")


def cmd_eval(ckpts: Sequence[str], out: str, fractions=None, use_ema: bool = False,
             streams: int | None = None) -> MetricTable:
    table = MetricTable()
    labels = []
    for p in ckpts:
        ck = ckio.load(resolve(p))
        cfg = _config_of(ck)
        label = ck.meta.get("regime", "unknown")
        k = 2
        base = label
        while label in labels:
            label, k = f"{base}#{k}", k + 1
        labels.append(label)
        model = ckio.model_of(ck, "ema" if use_ema else "theta")
        table.extend(evaluate_model(model, cfg, label, fractions, streams))
    path = resolve(out)
    table.to_csv(path)
    with open(path.with_name(path.stem + "_drift.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DRIFT_COLUMNS)
        for label in labels:
            d = drift_ratio(table.for_regime(label))
            w.writerow([label] + [repr(d[c]) for c in DRIFT_COLUMNS[1:]])
    return table


# -- gradcheck -------------------------------------------------------------------

def gradcheck_loss(model_cfg: ModelConfig, seed: int = 0):
    """A scalar objective over a mixed batch: varied history lengths, a null condition, FEW times."""
    rng = np.random.default_rng(seed)
    src = StreamSource(Regime.oscillator(), model_cfg.tokens_per_chunk, model_cfg.d_a, model_cfg.d_b)
    chunks, conds = src.draw(rng, 3, 5)
    ctxs = [gt_context(s, r, 4) for s, r in zip(chunks, (0, 2, 4))]
    conds[1] = conds[1].as_null()
    cur = 4
    xa = np.stack([s[cur].a for s in chunks]) + 0.3 * rng.standard_normal((3,) + chunks[0][cur].a.shape)
    xb = np.stack([s[cur].b for s in chunks]) + 0.3 * rng.standard_normal((3,) + chunks[0][cur].b.shape)
    q = make_query(xa, xb, chunks[0][cur].timestamps, [0.2, 0.5, 0.7], [0.45, 0.5, 0.95], ctxs, conds)
    ta = rng.standard_normal((3 * model_cfg.tokens_per_chunk, model_cfg.d_a))
    tb = rng.standard_normal((3 * model_cfg.tokens_per_chunk, model_cfg.d_b))
    model = DualModeModel.create(model_cfg, seed)
    # unit output scale so the head gradients are not dwarfed by round-off
    params = init_params(model_cfg, seed, out_scale=1.0)

    def fn(tape: Tape, P: dict):
        return pair_mse(tape, model.forward(tape, P, q, Mode.FEW), (ta, tb))

    return fn, params


GRAD_COLUMNS = ("param", "index", "analytic", "numeric", "rel_error")


def cmd_gradcheck(cfg: RunConfig | None, out: str | None = None, probes: int = 200, h: float = 1e-5,
                  tol: float = 1e-4):
    model_cfg = cfg.model_config() if cfg else ModelConfig()
    fn, params = gradcheck_loss(model_cfg, cfg.seed if cfg else 0)
    report = grad_check(fn, params, probe_count=probes, h=h, seed=cfg.seed if cfg else 0)
    if out:
        with open(resolve(out), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(GRAD_COLUMNS)
            for name, j, a, fd, err in report.probes:
                w.writerow([name, j, repr(a), repr(fd), repr(err)])
    return report, report.passed(tol)


# -- attention ----------------------------------------------------------------------

SIM_COLUMNS = ("layer", "similarity", "degenerate_similarity", "untrained_similarity")
ALLOC_COLUMNS = ("history_chunk", "mass", "entropy")


def attention_report(model: DualModeModel, cfg: RunConfig, probes: int = 32, streams: int = 16):
    src = cfg.source()
    q, t1 = probe_query(src, probes, cfg.eval.seed, cfg.train.K, cfg.train.R_max)
    t2 = probe_t2(t1, cfg.eval.seed)
    sim = attention_similarity(model, q, t2)
    deg = attention_similarity(model, q, t1)
    base = attention_similarity(DualModeModel.create(cfg.model_config(), cfg.seed), q, t2)
    gt, conds = gen_streams(src.regime, src.spec(1), [cfg.eval.seed * 100003 + i for i in range(streams)])
    res = generate_streams(model, conds, cfg.eval.num_chunks - 1, SamplerSpec.few(cfg.sampler.few_steps),
                           [cfg.eval.seed * 7919 + i for i in range(streams)], [s[0] for s in gt],
                           cfg.train.K, cfg.data.duration)
    mass, ent = late_allocation(model, res.streams, conds, cfg.train.K)
    return sim, deg, base, mass, ent


def cmd_attn(ckpt: str, out_dir: str, use_ema: bool = False, probes: int = 32, streams: int = 16):
    ck = ckio.load(resolve(ckpt))
    cfg = _config_of(ck)
    model = ckio.model_of(ck, "ema" if use_ema else "theta")
    sim, deg, base, mass, ent = attention_report(model, cfg, probes, streams)
    out = resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "similarity.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SIM_COLUMNS)
        for l in range(len(sim)):
            w.writerow([l, repr(float(sim[l])), repr(float(deg[l])), repr(float(base[l]))])
    with open(out / "allocation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ALLOC_COLUMNS)
        for k, m in enumerate(mass):
            w.writerow([k, repr(float(m)), repr(ent)])
    return sim, deg, base, mass, ent


# -- argument parsing --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualflow", description="Dual-mode streaming flow model at desk scale.")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("pretrain", help="branch-wise then joint multi-mode pretraining")
    s.add_argument("config")

    s = sub.add_parser("train", help="train under the configured regime")
    s.add_argument("config")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--override-hash", action="store_true")

    s = sub.add_parser("sample", help="generate streams and report NFE/throughput")
    s.add_argument("checkpoint")
    s.add_argument("--mode", choices=("few", "multi"), default="few")
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--num-chunks", type=int, default=8)
    s.add_argument("--streams", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ema", action="store_true", help="sample with the EMA shadow parameters")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="windowed metrics for one or more checkpoints")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--fractions", type=lambda v: [float(x) for x in v.split(",")])
    s.add_argument("--streams", type=int)
    s.add_argument("--ema", action="store_true")

    s = sub.add_parser("gradcheck", help="finite-difference check of the model gradients")
    s.add_argument("config", nargs="?")
    s.add_argument("--probes", type=int, default=200)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--out")

    s = sub.add_parser("attn", help="attention similarity and allocation analyses")
    s.add_argument("checkpoint")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--ema", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "pretrain":
            print(cmd_pretrain(RunConfig.load(args.config)))
        elif args.cmd == "train":
            print(cmd_train(RunConfig.load(args.config), args.resume, args.override_hash))
        elif args.cmd == "sample":
            rep = cmd_sample(args.checkpoint, args.mode, args.num_chunks, args.seed, args.out, args.streams,
                             args.steps, args.cfg_scale, args.ema)
            print(json.dumps(rep, sort_keys=True))
        elif args.cmd == "eval":
            cmd_eval(args.checkpoints, args.out, args.fractions, args.ema, args.streams)
            print(resolve(args.out))
        elif args.cmd == "gradcheck":
            cfg = RunConfig.load(args.config) if args.config else None
            rep, ok = cmd_gradcheck(cfg, args.out, args.probes, args.h)
            print(json.dumps({"max_rel_error": rep.max_rel_error, "probes": len(rep.probes),
                              "nonfinite": rep.nonfinite, "passed": ok}))
            return EXIT_OK if ok else EXIT_NUMERIC
        elif args.cmd == "attn":
            sim, _, base, _, ent = cmd_attn(args.checkpoint, args.out_dir, args.ema)
            print(json.dumps({"similarity": sim.tolist(), "untrained": base.tolist(), "entropy": ent}))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
