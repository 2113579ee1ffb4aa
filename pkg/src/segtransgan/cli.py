"""Command-line entry point: generate-data, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 I/O failure, 2 configuration or validation error,
3 numeric failure (non-finite values).
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from .config import RunConfig
from .models import ConfigError, GeneratorConfig, generator_forward
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad
from .training import (
    CheckpointError,
    CheckpointNameError,
    TrainLog,
    Trainer,
    checkpoint_load,
)

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("segtransgan")


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    """Pin BLAS/OpenMP pools to one thread so reductions keep a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    if args.deterministic:
        cfg.train.deterministic = True
    return cfg.validate()


# ---------------------------------------------------------------------------
# verbs


def cmd_generate_data(cfg: RunConfig, count: int | None = None, out_dir: str | None = None) -> int:
    count = cfg.data.count if count is None else count
    root = Path(out_dir or cfg.data.root)
    if count < 2:
        raise ConfigError("count must be at least 2")
    samples = D.generate_phantoms(count, cfg.data.seed, cfg.data.phantom)
    split = D.split_dataset([s.id for s in samples], cfg.data.train_fraction, cfg.data.seed)
    D.save_dataset(root, samples, split)
    print(f"wrote {count} phantoms to {root} ({len(split.train)} train / {len(split.test)} test)")
    return EXIT_OK


def _load_split(cfg: RunConfig, which: str) -> list[D.Sample]:
    root = Path(cfg.data.root)
    manifest = root / "split.txt"
    if manifest.exists():
        split = D.read_split(manifest)
    else:
        found = D.dataset_ids(root)
        if not found:
            raise FileNotFoundError(f"no dataset under {root} (run generate-data first)")
        split = D.split_dataset(found, cfg.data.train_fraction, cfg.data.seed)
    ids = split.train if which == "train" else split.test
    if not ids:
        raise FileNotFoundError(f"no {which} samples under {root}")
    samples = D.load_dataset(root, ids)
    for s in samples:
        if s.hw[0] % 4 or s.hw[1] % 4:
            raise ShapeError(f"sample {s.id} has size {s.hw}, not divisible by 4")
    return samples


def cmd_train(cfg: RunConfig) -> int:
    t = cfg.train
    samples = _load_split(cfg, "train")
    trainer = Trainer(t.loop, cfg.model.generator(), cfg.model.discriminator_kind(), t.train_config(),
                      run_config=cfg.to_dict())
    ckpt_dir = Path(t.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    Path(t.log_path).parent.mkdir(parents=True, exist_ok=True)
    if t.resume:
        trainer.restore(checkpoint_load(t.resume))
        if Path(t.log_path).exists():
            trainer.log = TrainLog.from_csv(t.log_path, t.loop)
            trainer.log.truncate(trainer.iteration)
        log.info("resumed from %s at iteration %d", t.resume, trainer.iteration)
    total = trainer.total_iterations(len(samples))

    def progress(rec):
        if rec["iteration"] % 25 == 0 or rec["iteration"] == total:
            log.info("iter %d/%d loss_G=%.4f", rec["iteration"], total, rec["loss_G"])

    with deterministic_mode(t.deterministic):
        trainer.fit(samples, checkpoint_dir=ckpt_dir, checkpoint_interval=t.checkpoint_interval,
                    log_path=t.log_path, deterministic=t.deterministic, progress=progress)
    print(f"trained loop={t.loop} for {trainer.iteration} iterations; "
          f"checkpoint {ckpt_dir / 'final.ckpt'}, log {t.log_path}")
    return EXIT_OK


def generator_from_checkpoint(path):
    """Rebuild the image->mask generator stored in a checkpoint."""
    from .models import build_generator

    bundle = checkpoint_load(path)
    model = bundle.config.get("model")
    if model is None:
        raise CheckpointNameError(f"{path}: checkpoint carries no model configuration")
    cfg = RunConfig.from_dict({"model": model}).model
    gcfg = cfg.generator()
    params = build_generator(gcfg)
    prefix = "param/G/"
    state = {k[len(prefix):]: v for k, v in bundle.tensors.items() if k.startswith(prefix)}
    try:
        params.load_state(state)
    except (KeyError, ShapeError) as exc:
        raise CheckpointNameError(str(exc)) from exc
    return params, gcfg


def predict_probs(images: np.ndarray, params, gcfg: GeneratorConfig, batch_size: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(generator_forward(Tensor(images[i : i + batch_size]), params, gcfg).data)
    return np.concatenate(out)


def evaluate_predictions(ids, probs, gts, ev) -> tuple[list, list]:
    """Metric rows without and with post-processing, for A/B comparison."""
    raw = [E.threshold(p[0], ev.threshold) for p in probs]
    post = [E.postprocess(m, largest=ev.largest_component, fill=ev.fill_holes, connectivity=ev.connectivity)
            for m in raw]
    gt = [g[0] for g in gts]
    return E.evaluate(ids, raw, gt), E.evaluate(ids, post, gt)


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str | None = None) -> int:
    ev = cfg.eval
    params, gcfg = generator_from_checkpoint(checkpoint)
    samples = _load_split(cfg, split or ev.split)
    with deterministic_mode(cfg.train.deterministic):
        probs = predict_probs(np.stack([s.image for s in samples]), params, gcfg)
    raw_rows, post_rows = evaluate_predictions([s.id for s in samples], probs, [s.mask for s in samples], ev)
    out = Path(ev.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_mean = E.write_report(raw_rows, out / "metrics_raw.csv")
    post_mean = E.write_report(post_rows, out / "metrics_post.csv")
    chosen = post_mean if (ev.largest_component or ev.fill_holes) else raw_mean
    print("dice,precision,recall")
    print(",".join(f"{v:.4f}" for v in chosen))
    log.info("raw dice %.4f / post-processed dice %.4f", raw_mean[0], post_mean[0])
    return EXIT_OK


def cmd_predict(checkpoint: str, image_path: str, out_mask: str, gt_path: str | None = None,
                out_overlay: str | None = None, ev=None) -> int:
    from .config import EvalSection

    ev = ev or EvalSection()
    params, gcfg = generator_from_checkpoint(checkpoint)
    image = D.load_pgm(image_path)
    h, w = image.shape
    if h % gcfg.divisor or w % gcfg.divisor:
        raise ShapeError(f"image {h}x{w} is not divisible by {gcfg.divisor}")
    probs = predict_probs(image[None, None], params, gcfg)[0, 0]
    mask = E.postprocess(E.threshold(probs, ev.threshold), largest=ev.largest_component,
                         fill=ev.fill_holes, connectivity=ev.connectivity)
    D.save_pgm(out_mask, mask.astype(np.float64))
    msg = f"wrote mask {out_mask} ({int(mask.sum())} foreground pixels)"
    if gt_path:
        gt = D.load_pgm(gt_path, mask=True).astype(np.uint8)
        if out_overlay:
            E.save_ppm(out_overlay, E.overlay(image, mask, gt))
            msg += f", overlay {out_overlay}"
        d, p, r, _ = E.metrics(mask, gt)
        msg += f"; dice={d:.4f} precision={p:.4f} recall={r:.4f}"
    print(msg)
    return EXIT_OK


def cmd_gradcheck(names=None) -> int:
    from . import gradcheck

    results = gradcheck.run_all(names)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override data and training seeds")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="segtransgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="write a phantom dataset")
    g.add_argument("--count", type=int)
    g.add_argument("--out", help="dataset root (defaults to data.root)")

    sub.add_parser("train", parents=[common], help="train with the configured loop")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "test"))

    p = sub.add_parser("predict", parents=[common], help="segment one PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    p.add_argument("out_mask")
    p.add_argument("--gt", help="ground-truth mask PGM (enables metrics and overlay)")
    p.add_argument("--overlay", help="output PPM overlay path (needs --gt)")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--only", nargs="*", help="run only these registered checks")
    c.add_argument("--list", action="store_true", help="list registered checks and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        if args.command == "generate-data":
            return cmd_generate_data(cfg, args.count, args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "predict":
            return cmd_predict(args.checkpoint, args.image, args.out_mask, args.gt, args.overlay, cfg.eval)
        if args.command == "gradcheck":
            if args.list:
                from .gradcheck import REGISTRY

                print("\n".join(REGISTRY))
                return EXIT_OK
            with deterministic_mode(True):
                return cmd_gradcheck(args.only)
    except (ConfigError, ShapeError, CheckpointNameError, D.NonBinaryMaskError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, D.PGMError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
