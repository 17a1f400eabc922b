"""``etadrive`` command line: collect, train, eval, ablate, bench, replay, report.

Exit codes: 0 success, 1 domain failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, config_hash, load_config
from .errors import ConfigError, ContractError
from .harness import (ABLATION_ROWS, CollectionError, collect_dataset, evaluate_closed_loop,
                      load_checkpoint, load_dataset, run_ablation_matrix, save_checkpoint,
                      save_dataset, train)
from .harness.evaluate import eval_pipeline_config
from .models import MODES, check_mode, train_kind
from .plan import ActionPlan
from .scheduler import Infeasible, gantt, plan_schedule, run_pipeline, simulate_schedule, sweep
from .toyworld import (SCENARIO_KINDS, CameraModel, action_to_mask, expert_policy, frame_to_text,
                       make_scenario, read_log, render_observation, replay, scenario_suite, write_log)

log = logging.getLogger("etadrive")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
TRAIN_KINDS = {"async": "full", "base": "base"}


class UsageError(Exception):
    pass


def _header(cfg: RunConfig, seed: int, command: str, **extra) -> dict:
    return {"command": command, "seed": seed, "config_hash": config_hash(cfg), "config": cfg.to_dict(),
            **extra}


def _write_header_file(path: Path, header: dict) -> None:
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _episodes(cfg: RunConfig, seeds: Sequence[int], scenarios: str | None = None):
    kinds = cfg.world.scenarios
    if scenarios:
        kinds = tuple(s.strip() for s in scenarios.split(",") if s.strip())
        bad = [k for k in kinds if k not in SCENARIO_KINDS]
        if bad:
            raise UsageError(f"unknown scenario(s): {', '.join(bad)}")
    return scenario_suite(kinds, seeds)


def _delta_ticks(cfg: RunConfig) -> int:
    n = round(cfg.world.delta_ms / 100.0)
    if abs(n * 100.0 - cfg.world.delta_ms) > 1e-9 or n < 1:
        raise ConfigError(f"world.delta_ms {cfg.world.delta_ms} must be a positive multiple of 100")
    return n


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(args, cfg: RunConfig) -> int:
    seeds = _ints(args.seeds) if args.seeds else list(cfg.world.train_seeds)
    episodes = _episodes(cfg, seeds, args.scenarios)
    try:
        ds = collect_dataset(episodes, _delta_ticks(cfg), cfg.world.collect_ticks)
    except CollectionError as exc:
        print(f"collection aborted: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    out = Path(args.out or "dataset.etad")
    header = _header(cfg, args.seed, "collect", episodes=[e.episode_id for e in episodes])
    save_dataset(out, ds, header)
    print(f"wrote {len(ds)} samples from {len(episodes)} episodes to {out} (config {header['config_hash']})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    mode = TRAIN_KINDS.get(args.kind, args.kind)
    check_mode(mode)
    if not args.data:
        raise UsageError("train needs --data PATH (see 'collect')")
    ds = load_dataset(args.data)
    tcfg = replace(cfg.train, seed=args.seed)
    every = max(1, tcfg.total_steps // 20)

    def progress(rec):
        if rec.step % every == 0 or rec.step == tcfg.total_steps - 1:
            print(f"step {rec.step:5d}  lr {rec.lr:.2e}  loss {rec.total:.4f}  action {rec.action:.4f}"
                  f"  mask {rec.mask:.4f}  forecast {rec.forecast:.4f}", flush=True)

    res = train(ds, mode, tcfg, cfg.model.build(), on_step=progress)
    out = Path(args.out or f"{mode}_s{args.seed}.ckpt")
    save_checkpoint(out, res.model)
    header = _header(cfg, args.seed, "train", mode=mode, data=str(args.data))
    _write_header_file(out.with_suffix(out.suffix + ".json"), header)
    res.write_losses(out.with_suffix(out.suffix + ".losses.jsonl"), header)
    print(f"saved {out} after {tcfg.total_steps} steps in {res.seconds:.1f}s")
    return EXIT_OK


def _ckpt_path(pattern: str, mode: str, seed: int) -> Path:
    return Path(pattern.format(mode=mode, seed=seed))


def _load_models(pattern: str, mode: str, seeds: Sequence[int], cfg: RunConfig):
    kind = train_kind(mode)
    models, missing = {}, []
    for s in seeds:
        p = _ckpt_path(pattern, kind, s)
        if not p.exists():
            missing.append(str(p))
            continue
        models[s] = load_checkpoint(p, kind, cfg.model.build())
    return models, missing


def cmd_eval(args, cfg: RunConfig) -> int:
    mode = check_mode(args.mode)
    seeds = _ints(args.seeds)
    models, missing = _load_models(args.ckpt, mode, seeds, cfg)
    if missing:
        raise UsageError(f"missing checkpoints: {', '.join(missing)}")
    episodes = _episodes(cfg, cfg.world.eval_seeds, args.scenarios)
    pcfg = eval_pipeline_config(cfg.world.delta_ms)
    report = evaluate_closed_loop(models, mode, episodes, cfg.costs, pcfg)
    print(report.to_text())
    header = _header(cfg, args.seed, "eval", mode=mode, seeds=seeds)
    if args.out:
        report.write_jsonl(args.out, header)
    if args.log_dir:
        d = Path(args.log_dir)
        d.mkdir(parents=True, exist_ok=True)
        for s, model in models.items():
            for ep in episodes:
                res = run_pipeline(ep, model, cfg.costs, pcfg, mode=mode)
                write_log(d / f"{mode}_s{s}_{ep.episode_id}.jsonl", res.rollout,
                          dict(header, kind=ep.kind, episode_seed=ep.seed, model_seed=s))
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    seeds = _ints(args.seeds)
    models: dict[str, dict] = {}
    missing = []
    for kind in sorted({train_kind(m) for _, m in ABLATION_ROWS}):
        got, miss = _load_models(args.ckpt, kind, seeds, cfg)
        models[kind] = got
        if miss:
            missing.append(kind)
    if missing:
        print(f"missing checkpoints; train these modes first: {', '.join(missing)}", file=sys.stderr)
        return EXIT_USAGE
    episodes = _episodes(cfg, cfg.world.eval_seeds, args.scenarios)
    table = run_ablation_matrix(models, episodes, cfg.costs, eval_pipeline_config(cfg.world.delta_ms))
    print(table.to_text())
    if args.out:
        header = _header(cfg, args.seed, "ablate", seeds=seeds)
        with open(args.out, "w") as fh:
            fh.write(json.dumps({"header": header}) + "\n")
            for rec in table.as_records():
                fh.write(json.dumps(rec) + "\n")
    return EXIT_OK


def _cell(row: dict | None) -> str:
    if row is None:
        return "n/a"
    return str(row["batch"]) if row["feasible"] else "-"


def cmd_bench(args, cfg: RunConfig) -> int:
    pcfg = cfg.schedule.build()
    mode = check_mode(args.mode)
    if args.sweep:
        print(f"feasibility frontier for mode {mode} (B = batch, '-' = infeasible)")
        rows = sweep(cfg.costs, mode=mode)
        deltas = sorted({r["delta_ms"] for r in rows})
        print("T\\Delta " + "".join(f"{d:>7g}" for d in deltas))
        for t in sorted({r["tick_ms"] for r in rows}):
            cells = {r["delta_ms"]: r for r in rows if r["tick_ms"] == t}
            print(f"{t:>7g} " + "".join(f"{_cell(cells.get(d)):>7}" for d in deltas))
        return EXIT_OK
    plan = plan_schedule(cfg.costs, pcfg, mode)
    print(f"mode {mode}  T={pcfg.tick_ms:g} ms  Delta={pcfg.delta_ms:g} ms  "
          f"reactive path {cfg.costs.reactive_cost(mode):g} ms")
    if isinstance(plan, Infeasible):
        print(f"INFEASIBLE: binding constraint {plan.binding}: {plan.inequality}")
        print(f"fix: {plan.fix}")
        return EXIT_DOMAIN
    print(f"feasible: batch size B={plan.batch_size}")
    trace, _ = simulate_schedule(cfg.costs, pcfg, args.ticks, mode)
    summary = trace.summary(pcfg.tick_ms)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(gantt(trace, pcfg.tick_ms))
    if args.out:
        trace.write_jsonl(args.out, _header(cfg, args.seed, "bench", mode=mode))
    return EXIT_OK


def cmd_replay(args, cfg: RunConfig) -> int:
    head, records = read_log(args.log)
    meta = head.get("header", {})
    if "kind" not in meta:
        raise UsageError(f"{args.log}: log header lacks the scenario kind")
    episode = make_scenario(meta["kind"], int(meta["episode_seed"]))
    states = replay(episode, records)
    mismatches = 0
    for s, rec in zip(states, records):
        ego = [s.ego.x, s.ego.y, s.ego.heading, s.ego.speed]
        if ego != rec["ego"] or s.flags() != rec["flags"]:
            mismatches += 1
    cam = CameraModel()
    lo, hi = 0, len(states)
    if args.ticks:
        a, _, b = args.ticks.partition(":")
        lo, hi = int(a or 0), int(b or len(states))
    for k in range(lo, min(hi, len(states))):
        s = states[k]
        frame = render_observation(s, cam)
        gt = pred = None
        rec = records[k] if k < len(records) else {}
        if args.show_mask and rec.get("action") is not None:
            pred = action_to_mask(ActionPlan.from_residuals(np.asarray(rec["action"])), cam)
            gt = action_to_mask(expert_policy(s), cam)
        flags = ",".join(f for f, v in s.flags().items() if v) or "-"
        print(f"tick {k}  t={s.sim_time:.1f}s  x={s.ego.x:.2f} y={s.ego.y:.2f} v={s.ego.speed:.2f}  flags {flags}")
        print(frame_to_text(frame, gt, pred))
    failed = next((s.tick for s in states if s.failed), None)
    print(f"replayed {len(states)} states; mismatches vs log: {mismatches}; failure tick: {failed}")
    return EXIT_OK if mismatches == 0 else EXIT_DOMAIN


def cmd_report(args, cfg: RunConfig) -> int:
    rows = []
    for p in args.inputs:
        with open(p) as fh:
            first = json.loads(fh.readline())
            if "summary" in first:
                rows.append(first["summary"])
            else:
                rows.extend(json.loads(line) for line in fh if line.strip())
    if not rows:
        raise UsageError("no metrics records found")
    print(f"{'row':<5}{'mode':<23}{'SR':>16}{'collision':>11}{'latency':>9}")
    for r in rows:
        print(f"{r.get('row', '-'):<5}{r['mode']:<23}{r['sr']:>9.2f}+-{r['sr_std']:<5.2f}"
              f"{r['collision']:>11.2f}{r['latency_ms']:>9.0f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="run seed, recorded in every output header")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="etadrive", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="roll the expert and write a dataset")
    c.add_argument("--scenarios", help="comma-separated scenario kinds")
    c.add_argument("--seeds", help="comma-separated episode seeds (default world.train_seeds)")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--data", help="dataset file from 'collect'")
    t.add_argument("--kind", default="async", choices=sorted(set(TRAIN_KINDS) | set(MODES) - {"gt_forecast_test_only"}),
                   help="'async' (= full), 'base' or an ablation mode")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="closed-loop evaluation")
    e.add_argument("--mode", default="full", choices=MODES)
    e.add_argument("--seeds", default="0,1,2", help="model seeds to evaluate")
    e.add_argument("--ckpt", default="{mode}_s{seed}.ckpt", help="checkpoint path pattern")
    e.add_argument("--scenarios", help="comma-separated scenario kinds")
    e.add_argument("--log-dir", help="also write per-episode logs for 'replay'")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="evaluate the ablation matrix")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--ckpt", default="{mode}_s{seed}.ckpt", help="checkpoint path pattern")
    a.add_argument("--scenarios", help="comma-separated scenario kinds")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", parents=[common], help="schedule feasibility and timeline")
    b.add_argument("--mode", default="full", choices=MODES)
    b.add_argument("--ticks", type=int, default=200, help="length of the synthetic run")
    b.add_argument("--sweep", action="store_true", help="print the feasibility frontier over T and Delta")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("replay", parents=[common], help="re-simulate an episode log as text frames")
    r.add_argument("log", help="episode log written by 'eval --log-dir'")
    r.add_argument("--show-mask", action="store_true", help="overlay model vs expert patch masks")
    r.add_argument("--ticks", help="range a:b of ticks to print")
    r.set_defaults(func=cmd_replay)

    rp = sub.add_parser("report", parents=[common], help="tabulate metrics files")
    rp.add_argument("inputs", nargs="+", help="metrics files from 'eval --out' or 'ablate --out'")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
