#!/usr/bin/env python
"""Three-way phantom benchmark: generator alone, GAN and CycleGAN.

Generates 131 phantoms (95 train / 36 test), trains each loop with Adam at
lr 2e-4 and betas (0.5, 0.999), evaluates on the test split with
largest-component clean-up and writes:

    methods.csv       one row per loop: method,dice,precision,recall
    ab.csv            raw vs post-processed mean dice on early checkpoints
    results.json      everything above plus timings and the supervised-loss ratio

Usage: python scripts/run_phantom_experiment.py [--out runs/phantom] [--iterations 300]
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from segtransgan import data as D
from segtransgan import evaluation as E
from segtransgan.cli import cmd_generate_data, cmd_train, deterministic_mode, evaluate_predictions, \
    generator_from_checkpoint, predict_probs
from segtransgan.config import RunConfig
from segtransgan.models import generator_forward
from segtransgan.tensor import no_grad
from segtransgan.training import Trainer, checkpoint_load, supervised_loss

METHODS = {"none": "Transformer", "gan": "Transformer GAN", "cyclegan": "Transformer CycleGAN"}
log = logging.getLogger("phantom")


def run_config(out: Path, loop: str, iterations: int, batch_size: int, early: int) -> RunConfig:
    cfg = RunConfig()
    cfg.data.root = str(out / "data")
    cfg.train.loop = loop
    cfg.train.batch_size = batch_size
    cfg.train.max_iterations = iterations
    cfg.train.epochs = math.ceil(iterations / D.iterations_per_epoch(95, batch_size))
    cfg.train.checkpoint_dir = str(out / loop / "checkpoints")
    cfg.train.checkpoint_interval = early
    cfg.train.log_path = str(out / loop / "train_log.csv")
    cfg.eval.output_dir = str(out / loop / "eval")
    return cfg.validate()


def evaluate_checkpoint(cfg: RunConfig, ckpt: Path, test: list[D.Sample]):
    params, gcfg = generator_from_checkpoint(ckpt)
    probs = predict_probs(np.stack([s.image for s in test]), params, gcfg)
    return evaluate_predictions([s.id for s in test], probs, [s.mask for s in test], cfg.eval)


def mean_supervised(params, gcfg, samples: list[D.Sample], batch_size: int = 16) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            image, mask = D.make_batch(chunk)
            probs = generator_forward(image, params, gcfg)
            total += float(supervised_loss(probs, mask).data) * len(chunk)
    return total / len(samples)


def run(out: Path, iterations: int = 300, batch_size: int = 8, early: int = 100, seed: int = 0) -> dict:
    if not 0 < early <= 200 or iterations % early:
        raise ValueError("early checkpoint must be <= 200 and divide the iteration count")
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    base = run_config(out, "gan", iterations, batch_size, early)
    base.data.seed = base.train.seed = seed
    cmd_generate_data(base)
    split = D.read_split(out / "data" / "split.txt")
    train = D.load_dataset(out / "data", split.train)
    test = D.load_dataset(out / "data", split.test)

    results = {"iterations": iterations, "batch_size": batch_size, "early_iteration": early,
               "n_train": len(train), "n_test": len(test), "learning_rate": base.train.learning_rate,
               "betas": [base.train.beta1, base.train.beta2], "methods": {}, "ab": {}}
    with deterministic_mode(True):
        for loop in METHODS:
            cfg = run_config(out, loop, iterations, batch_size, early)
            cfg.data.seed = cfg.train.seed = seed
            t0 = time.perf_counter()
            cmd_train(cfg)
            seconds = time.perf_counter() - t0
            ckpts = Path(cfg.train.checkpoint_dir)
            raw, post = evaluate_checkpoint(cfg, ckpts / "final.ckpt", test)
            E.write_report(raw, out / loop / "metrics_raw.csv")
            mean = E.write_report(post, out / loop / "metrics_post.csv")
            results["methods"][loop] = {"name": METHODS[loop], "dice": mean[0], "precision": mean[1],
                                        "recall": mean[2], "raw_dice": E.aggregate(raw)[0],
                                        "train_seconds": seconds}
            raw, post = evaluate_checkpoint(cfg, ckpts / f"iter_{early:06d}.ckpt", test)
            results["ab"][loop] = {"raw_dice": E.aggregate(raw)[0], "post_dice": E.aggregate(post)[0]}
            log.info("%s: dice %.4f after %d iterations (%.0f s)", loop, mean[0], iterations, seconds)

            if loop == "gan":
                init = Trainer("gan", cfg.model.generator(), cfg.model.discriminator_kind(), cfg.train.train_config())
                final = checkpoint_load(ckpts / "final.ckpt")
                g = init.nets["G"]
                before = mean_supervised(g, cfg.model.generator(), train)
                g.load_state({k[len("param/G/"):]: v for k, v in final.tensors.items() if k.startswith("param/G/")})
                after = mean_supervised(g, cfg.model.generator(), train)
                results["supervised"] = {"initial": before, "final": after, "ratio": after / before}

    E.write_method_table([(m["name"], m["dice"], m["precision"], m["recall"])
                          for m in results["methods"].values()], out / "methods.csv")
    with open(out / "ab.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "iteration", "dice_raw", "dice_post"])
        for loop, ab in results["ab"].items():
            w.writerow([METHODS[loop], early, f"{ab['raw_dice']:.4f}", f"{ab['post_dice']:.4f}"])
    results["total_seconds"] = time.perf_counter() - started
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/phantom")
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--early", type=int, default=100, help="iteration of the A/B checkpoint")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run(Path(args.out), args.iterations, args.batch_size, args.early, args.seed)
    print((Path(args.out) / "methods.csv").read_text(), end="")
    print((Path(args.out) / "ab.csv").read_text(), end="")
    print(f"supervised loss ratio (gan, final/initial): {res['supervised']['ratio']:.4f}")
    print(f"total {res['total_seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
