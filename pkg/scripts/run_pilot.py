#!/usr/bin/env python3
"""End-to-end training calibration: learned token dropping vs random.

Trains the six-layer toy model on a generated corpus, evaluates on held-out
episodes, and writes the artifacts the acceptance gate pins its budget and
thresholds against: configs, training logs, checkpoints, eval reports, and a
summary with wall-clock times and threshold checks.

Default arguments reproduce the committed run under results/pilot/.
"""

from __future__ import annotations

import argparse
import copy
import json
import time
from pathlib import Path

from frameflow.config import (DroppingSettings, ModelSettings, RunConfig,
                              build_encoders, build_model, config_hash,
                              engine_settings, save_config)
from frameflow.data import DataSettings, generate_episode
from frameflow.engine import build_training_episode
from frameflow.metrics import evaluate_model, save_report
from frameflow.train import TrainSettings, train


def parse_args() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/pilot"))
    ap.add_argument("--train-episodes", type=int, default=300)
    ap.add_argument("--eval-episodes", type=int, default=40)
    ap.add_argument("--steps", type=int, default=1400)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--d-model", type=int, default=32)
    ap.add_argument("--n-heads", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--beta", type=float, default=0.5)
    ap.add_argument("--policy", default="interleaved")
    ap.add_argument("--stream-weight", type=float, default=3.0)
    ap.add_argument("--events", type=int, default=3)
    return ap.parse_args()


def pilot_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    cfg.model = ModelSettings(d_model=args.d_model, n_layers=6,
                              n_heads=args.n_heads, vocab_size=32,
                              enc_width=16, seed=args.seed)
    cfg.dropping = DroppingSettings(beta=args.beta, policy=args.policy,
                                    scale_by_r=True, seed=args.seed)
    cfg.data = DataSettings(duration_s=10.0, events_per_episode=args.events,
                            seed=args.seed)
    cfg.train = TrainSettings(steps=args.steps, batch_size=args.batch_size,
                              lr=args.lr, stream_weight=args.stream_weight,
                              seed=args.seed)
    return cfg


def run_arm(name: str, cfg: RunConfig, episodes, eval_samples, general, ego,
            out: Path) -> dict:
    model = build_model(cfg)
    es = engine_settings(cfg)
    t0 = time.monotonic()
    records = train(model, episodes, cfg.train,
                    log_path=out / f"training_log_{name}.jsonl",
                    checkpoint_path=out / f"checkpoint_{name}",
                    config_hash=config_hash(cfg))
    train_s = time.monotonic() - t0
    t0 = time.monotonic()
    report = evaluate_model(model, eval_samples, general, ego,
                            engine_settings=es,
                            config_hash=config_hash(cfg),
                            seed=cfg.data.seed, extras={"arm": name})
    eval_s = time.monotonic() - t0
    save_report(out / f"report_{name}.json", report)
    return {"records": records, "report": report,
            "train_wall_s": round(train_s, 2), "eval_wall_s": round(eval_s, 2)}


def main() -> int:
    args = parse_args()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg = pilot_config(args)
    cfg_random = copy.deepcopy(cfg)
    cfg_random.dropping.random_dropping = True
    save_config(out / "config_learned.json", cfg)
    save_config(out / "config_random.json", cfg_random)

    wall0 = time.monotonic()
    general, ego = build_encoders(cfg)
    # held-out episodes use ids past the training range: same recipe,
    # disjoint streams
    train_samples = [generate_episode(cfg.data, cfg.data.seed, i)
                     for i in range(args.train_episodes)]
    eval_samples = [generate_episode(cfg.data, cfg.data.seed,
                                     args.train_episodes + i)
                    for i in range(args.eval_episodes)]
    # episode sequences depend on encoders and ground truth, not on model
    # weights, so both arms share them
    probe = build_model(cfg)
    es = engine_settings(cfg)
    episodes = [build_training_episode(s, probe, general, ego, es)[:2]
                for s in train_samples]
    build_s = time.monotonic() - wall0

    arms = {}
    for name, arm_cfg in (("learned", cfg), ("random", cfg_random)):
        arms[name] = run_arm(name, arm_cfg, episodes, eval_samples,
                             general, ego, out)
        rep = arms[name]["report"]
        print(f"{name}: fluency={rep.fluency:.4f} time_diff={rep.time_diff:.3f}"
              f" lm_ppl={rep.lm_ppl:.3f} det={rep.determination_accuracy:.4f}"
              f" corr={rep.lm_correctness:.4f}"
              f" train={arms[name]['train_wall_s']}s"
              f" eval={arms[name]['eval_wall_s']}s")

    learned = arms["learned"]
    first = learned["records"][0]["loss"]
    final = learned["records"][-1]["loss"]
    checks = {
        "loss_halved": final < 0.5 * first,
        "fluency_ok": learned["report"].fluency >= 0.80,
        "time_diff_ok": learned["report"].time_diff <= 0.5,
        "random_strictly_worse":
            arms["random"]["report"].fluency < learned["report"].fluency,
    }
    summary = {
        "config_hash": config_hash(cfg),
        "train_episodes": args.train_episodes,
        "eval_episodes": args.eval_episodes,
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "d_model": args.d_model,
        "first_loss": first,
        "final_loss": final,
        "loss_ratio": final / first,
        "fluency_learned": learned["report"].fluency,
        "fluency_random": arms["random"]["report"].fluency,
        "time_diff_learned": learned["report"].time_diff,
        "lm_ppl_learned": learned["report"].lm_ppl,
        "checks": checks,
        "corpus_build_wall_s": round(build_s, 2),
        "train_wall_s": {k: v["train_wall_s"] for k, v in arms.items()},
        "eval_wall_s": {k: v["eval_wall_s"] for k, v in arms.items()},
        "total_wall_s": round(time.monotonic() - wall0, 2),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                 sort_keys=True) + "\n")
    print(json.dumps(checks))
    print(f"total wall clock: {summary['total_wall_s']} s")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
