"""Command-line entry points: data generation, training, evaluation,
single-episode simulation, and analytic cost accounting.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Every artifact written here embeds the config hash that produced
it.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import (RunConfig, apply_overrides, build_encoders, build_model,
                     build_vocab, config_hash, engine_settings, load_config,
                     save_config)
from .data import (augment_dialogue, generate_dataset, generate_episode,
                   load_dataset, save_dataset)
from .dropping import flops_estimate
from .engine import DialogueEngine, EngineSettings, build_training_episode, save_episode
from .errors import (ConfigError, DataError, FrameflowError, GenerationError,
                     MetricError, NumericError, StreamError)
from .metrics import evaluate_model, reports_to_csv, save_report
from .train import load_checkpoint, train


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; defaults apply otherwise")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field, e.g. dropping.beta=0.5")
    p.add_argument("--no-slow-path", action="store_true",
                   help="disable the keyframe augmentation block")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frameflow")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dialogue corpus")
    _add_common(g)
    g.add_argument("--episodes", type=int, default=100)
    g.add_argument("--out", required=True)
    g.add_argument("--augment", default=None,
                   help="corrupt_message | temporal_jitter | drop_message")

    t = sub.add_parser("train", help="train on a generated corpus")
    _add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None,
                   help="checkpoint file to continue from")

    e = sub.add_parser("eval", help="score a model over a corpus")
    _add_common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--out", default=None,
                   help="report path (.json; sweeps write .csv)")
    e.add_argument("--sweep", default=None, metavar="KEY=V1,V2,...",
                   help="evaluate once per value, e.g. dropping.beta=0.2,0.5")

    s = sub.add_parser("simulate", help="run the live engine on one episode")
    _add_common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--episode", type=int, default=0)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--out", required=True)

    b = sub.add_parser("bench-flops", help="analytic cost of one episode")
    _add_common(b)
    b.add_argument("--out", default=None)
    b.add_argument("--sweep", default=None, metavar="KEY=V1,V2,...")
    return p


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set)
    if args.no_slow_path:
        overrides.append("slow_path.enabled=false")
    return apply_overrides(cfg, overrides)


def _sweep(cfg: RunConfig, spec: str | None) -> list[tuple[str, RunConfig]]:
    if spec is None:
        return [("", cfg)]
    key, sep, values = spec.partition("=")
    if not sep or not values:
        raise ConfigError(f"sweep spec {spec!r} must look like key=v1,v2,...")
    return [(f"{key}={v}", apply_overrides(cfg, [f"{key}={v}"]))
            for v in values.split(",")]


def _load_samples(path: str):
    try:
        samples, manifest = load_dataset(path)
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    if not samples:
        raise DataError(f"dataset {path} holds no episodes")
    return samples, manifest


def _build_episodes(cfg: RunConfig, samples, model, general, ego):
    settings = engine_settings(cfg)
    built = [build_training_episode(s, model, general, ego, settings)
             for s in samples]
    return [(seq, bundles) for seq, bundles, _ in built]


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    samples = generate_dataset(cfg.data, n_episodes=args.episodes)
    if args.augment:
        vocab = build_vocab(cfg)
        samples = [augment_dialogue(s, args.augment, cfg.data.seed, vocab)
                   for s in samples]
    save_dataset(args.out, samples, {"config_hash": config_hash(cfg),
                                     "augment": args.augment or ""})
    n_turns = sum(len(s.turns) for s in samples)
    print(f"wrote {len(samples)} episodes ({n_turns} turns) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    chash = config_hash(cfg)
    samples, _ = _load_samples(args.data)
    model = build_model(cfg)
    general, ego = build_encoders(cfg)
    episodes = _build_episodes(cfg, samples, model, general, ego)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.json", cfg)
    started = time.perf_counter()
    records = train(model, episodes, cfg.train,
                    log_path=out / "training_log.jsonl",
                    resume=args.resume,
                    checkpoint_path=out / "checkpoint",
                    config_hash=chash)
    wall = time.perf_counter() - started
    meta = {"config_hash": chash, "steps_run": len(records),
            "first_loss": records[0]["loss"] if records else None,
            "final_loss": records[-1]["loss"] if records else None,
            "wall_clock_s": round(wall, 3), "n_episodes": len(episodes)}
    (out / "train_meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n")
    if records:
        print(f"trained {meta['steps_run']} steps in {wall:.1f}s; "
              f"loss {meta['first_loss']:.4f} -> {meta['final_loss']:.4f}")
    else:
        print("checkpoint already covers the requested step budget")
    return 0


def cmd_eval(args) -> int:
    base = _load_cfg(args)
    variants = _sweep(base, args.sweep)
    samples, _ = _load_samples(args.data)
    reports = []
    for label, cfg in variants:
        model = build_model(cfg)
        if args.checkpoint:
            load_checkpoint(args.checkpoint, model)
        general, ego = build_encoders(cfg)
        extras = {"sweep": label} if label else {}
        report = evaluate_model(model, samples, general, ego,
                                engine_settings(cfg), cfg.metrics,
                                config_hash=config_hash(cfg),
                                seed=cfg.data.seed, extras=extras)
        reports.append(report)
        tag = f" [{label}]" if label else ""
        print(f"fluency={report.fluency:.3f} time_diff={report.time_diff:.3f}s "
              f"lm_ppl={report.lm_ppl:.2f} correctness={report.lm_correctness:.3f}"
              f" flops={report.flops_total}{tag}")
    if args.out:
        if len(reports) == 1:
            save_report(args.out, reports[0])
        else:
            Path(args.out).write_text(reports_to_csv(reports))
        print(f"wrote {args.out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    samples, _ = _load_samples(args.data)
    if not 0 <= args.episode < len(samples):
        raise DataError(f"episode {args.episode} outside the dataset "
                        f"(0..{len(samples) - 1})")
    sample = samples[args.episode]
    model = build_model(cfg)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model)
    general, ego = build_encoders(cfg)
    engine = DialogueEngine(model, general, ego, engine_settings(cfg))
    queries = [(t.query_time, t.query_tokens) for t in sample.turns
               if t.query_time is not None]
    result, _ = engine.run_stream(sample.frames, queries=queries,
                                  drop_salt=sample.episode_id,
                                  meta={"episode_id": sample.episode_id,
                                        "config_hash": config_hash(cfg)})
    save_episode(args.out, result)
    responds = sum(1 for d in result.decisions if d.decision == "respond")
    print(f"episode {sample.episode_id}: {len(result.decisions)} decisions, "
          f"{responds} responses; log at {args.out}")
    return 0


def cmd_bench_flops(args) -> int:
    base = _load_cfg(args)
    variants = _sweep(base, args.sweep)
    entries = []
    for label, cfg in variants:
        model = build_model(cfg)
        general, ego = build_encoders(cfg)
        sample = generate_episode(cfg.data, cfg.data.seed, episode_id=0)
        with_sp = engine_settings(cfg)
        seq_on, _, _ = build_training_episode(sample, model, general, ego, with_sp)
        off = EngineSettings(use_slow_path=False,
                             max_response_len=with_sp.max_response_len)
        seq_off, _, _ = build_training_episode(sample, model, general, ego, off)
        kw = dict(n_layers=model.n_layers, d_model=model.d_model,
                  d_ff=model.d_ff, beta=cfg.dropping.beta,
                  policy=cfg.dropping.policy)
        on = flops_estimate(visual=seq_on.visual, group_ids=seq_on.group_ids, **kw)
        without = flops_estimate(visual=seq_off.visual,
                                 group_ids=seq_off.group_ids, **kw)
        entry = {"sweep": label, "config_hash": config_hash(cfg),
                 "beta": cfg.dropping.beta, "policy": cfg.dropping.policy,
                 "total": on.total if with_sp.use_slow_path else without.total,
                 "base_stream": without.total,
                 "keyframe_augmentation": (on.total - without.total
                                           if with_sp.use_slow_path else 0),
                 "per_layer": on.per_layer if with_sp.use_slow_path
                              else without.per_layer}
        entries.append(entry)
        tag = f" [{label}]" if label else ""
        print(f"total={entry['total']} base_stream={entry['base_stream']} "
              f"keyframe_augmentation={entry['keyframe_augmentation']}{tag}")
    if args.out:
        Path(args.out).write_text(
            json.dumps(entries, sort_keys=True, indent=2) + "\n")
        print(f"wrote {args.out}")
    return 0


_COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
             "simulate": cmd_simulate, "bench-flops": cmd_bench_flops}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (NumericError, MetricError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, GenerationError, StreamError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except FrameflowError as e:
        # remaining package errors are misconfigurations of some component
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
