"""Losses, Adam, GAN / CycleGAN / supervised training loops and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample, iterations_per_epoch, make_batch, epoch_order
from .models import (
    DiscriminatorKind,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
)
from .nn import ParamSet
from .tensor import (
    DTYPE,
    NonFiniteError,
    Rng,
    ShapeError,
    Tensor,
    _node,
    _sigmoid,
    abs_,
    add,
    backward,
    log,
    mean,
    mul,
    sub,
    sum_,
    as_tensor,
)

LOOP_KINDS = ("none", "gan", "cyclegan")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 8
    lambda_seg: float = 100.0
    lambda_cyc: float = 10.0
    seed: int = 0
    max_iterations: int | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lambda_seg < 0 or self.lambda_cyc < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable for large |z|."""
    target = as_tensor(target)
    if target.ndim == 0:
        target = Tensor(np.full(logits.shape, float(target.data)))
    if target.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs target {target.shape}")
    z, y = logits.data, target.data
    n = z.size
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        gz = g * (_sigmoid(z) - y) / n if logits.requires_grad else None
        gy = -g * z / n if target.requires_grad else None
        return gz, gy

    return _node(np.asarray(per.mean()), (logits, target), bw, "bce_with_logits")


def bce_probs(probs: Tensor, target: Tensor) -> Tensor:
    """Mean BCE on probabilities; logs are clamped at 1e-12."""
    pos = mul(target, log(probs))
    negs = mul(sub(1.0, target), log(sub(1.0, probs)))
    return -mean(add(pos, negs))


def dice_loss(probs: Tensor, gt: Tensor, smooth: float = 1.0) -> Tensor:
    inter = sum_(mul(probs, gt))
    denom = sum_(probs) + sum_(gt) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def supervised_loss(probs: Tensor, gt: Tensor) -> Tensor:
    return 0.5 * bce_probs(probs, gt) + 0.5 * dice_loss(probs, gt)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    return mean(abs_(sub(a, b)))


def discriminator_loss(d_params: ParamSet, kind: DiscriminatorKind, cond: Tensor,
                       real: Tensor, fake: Tensor) -> Tensor:
    """0.5 * [bce(D(cond, real), 1) + bce(D(cond, fake), 0)] with ``fake`` detached."""
    real_logits = discriminator_forward(cond, real, d_params, kind)
    fake_logits = discriminator_forward(cond, fake.detach(), d_params, kind)
    return 0.5 * (bce_with_logits(real_logits, 1.0) + bce_with_logits(fake_logits, 0.0))


def adversarial_loss(d_params: ParamSet, kind: DiscriminatorKind, cond: Tensor, fake: Tensor) -> Tensor:
    """Non-saturating generator objective: bce(D(cond, fake), 1)."""
    return bce_with_logits(discriminator_forward(cond, fake, d_params, kind), 1.0)


@dataclass
class GanNets:
    g: ParamSet
    d: ParamSet
    gcfg: GeneratorConfig
    kind: DiscriminatorKind


def gan_losses(nets: GanNets, image: Tensor, gt_mask: Tensor, lambda_seg: float):
    """Return (loss_D, loss_G, prediction) for one paired batch."""
    pred = generator_forward(image, nets.g, nets.gcfg)
    loss_d = discriminator_loss(nets.d, nets.kind, image, gt_mask, pred)
    loss_g = adversarial_loss(nets.d, nets.kind, image, pred)
    if lambda_seg:
        loss_g = loss_g + lambda_seg * supervised_loss(pred, gt_mask)
    return loss_d, loss_g, pred


@dataclass
class CycleNets:
    g1: ParamSet  # image -> mask
    g2: ParamSet  # mask -> image
    d1: ParamSet  # judges masks, conditioned on the image
    d2: ParamSet  # judges images, conditioned on the mask
    gcfg: GeneratorConfig
    kind: DiscriminatorKind


@dataclass
class CycleLosses:
    loss_d1: Tensor
    loss_d2: Tensor
    adv_g1: Tensor
    adv_g2: Tensor
    cycle: Tensor
    supervised: Tensor

    @property
    def loss_g1(self) -> Tensor:
        return self.adv_g1 + self.supervised

    @property
    def generator_total(self) -> Tensor:
        return self.adv_g1 + self.adv_g2 + self.cycle + self.supervised


def cyclegan_losses(nets: CycleNets, image: Tensor, gt_mask: Tensor,
                    lambda_seg: float, lambda_cyc: float) -> CycleLosses:
    """Loss bundle for the twin-generator loop.

    ``cycle`` and ``supervised`` are already multiplied by their weights.  The
    mask discriminator sees (image, mask) pairs and the image discriminator
    sees (mask, image) pairs, so with zero weights the bundle is exactly two
    independent conditional GAN objectives.
    """
    fake_mask = generator_forward(image, nets.g1, nets.gcfg)
    fake_image = generator_forward(gt_mask, nets.g2, nets.gcfg)
    loss_d1 = discriminator_loss(nets.d1, nets.kind, image, gt_mask, fake_mask)
    loss_d2 = discriminator_loss(nets.d2, nets.kind, gt_mask, image, fake_image)
    adv_g1 = adversarial_loss(nets.d1, nets.kind, image, fake_mask)
    adv_g2 = adversarial_loss(nets.d2, nets.kind, gt_mask, fake_image)
    zero = Tensor(0.0)
    if lambda_cyc:
        rec_image = generator_forward(fake_mask, nets.g2, nets.gcfg)
        rec_mask = generator_forward(fake_image, nets.g1, nets.gcfg)
        cycle = lambda_cyc * (l1_loss(rec_image, image) + l1_loss(rec_mask, gt_mask))
    else:
        cycle = zero
    supervised = lambda_seg * supervised_loss(fake_mask, gt_mask) if lambda_seg else zero
    return CycleLosses(loss_d1, loss_d2, adv_g1, adv_g2, cycle, supervised)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update of every parameter in ``params``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=DTYPE)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=DTYPE)
            state.v[name] = np.zeros(p.shape, dtype=DTYPE)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class Adam:
    def __init__(self, params: ParamSet, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState()

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.cfg)


# ---------------------------------------------------------------------------
# training log


class TrainLog:
    def __init__(self, loop: str):
        if loop not in LOOP_KINDS:
            raise ValueError(f"unknown loop kind {loop!r}")
        self.loop = loop
        self.records: list[dict] = []

    @property
    def columns(self) -> list[str]:
        cols = ["iteration", "loss_G", "loss_D"]
        if self.loop == "cyclegan":
            cols += ["loss_cycle", "loss_G2", "loss_D2"]
        return cols + ["seconds"]

    def append(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("iterations must be strictly increasing")
        self.records.append(record)

    def truncate(self, iteration: int) -> None:
        self.records = [r for r in self.records if r["iteration"] <= iteration]

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.records:
                w.writerow([_fmt(r.get(c)) for c in self.columns])

    @classmethod
    def from_csv(cls, path, loop: str) -> "TrainLog":
        log_ = cls(loop)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {"iteration": int(row["iteration"])}
                for k, v in row.items():
                    if k != "iteration":
                        rec[k] = float(v) if v != "" else None
                log_.append(rec)
        return log_


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"STGAN1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass


@dataclass
class CheckpointBundle:
    tensors: dict[str, np.ndarray]
    iteration: int
    config: dict
    adam_steps: dict[str, int]


def checkpoint_save(path, tensors: dict[str, np.ndarray], iteration: int, config: dict,
                    adam_steps: dict[str, int] | None = None) -> None:
    """Write tensors as: magic, u64 header length, JSON header, raw little-endian float64."""
    manifest, offset = [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=DTYPE)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "version": FORMAT_VERSION,
        "iteration": int(iteration),
        "config": config,
        "adam_steps": dict(sorted((adam_steps or {}).items())),
        "tensors": manifest,
        "payload_bytes": offset,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(tensors):
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    tmp.replace(path)


def checkpoint_load(path) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC[:5]:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    if raw[:6] != MAGIC:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {raw[5:6]!r}")
    if len(raw) < 14:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[6:14])
    if len(raw) < 14 + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(raw[14 : 14 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: header version {header.get('version')} != {FORMAT_VERSION}")
    payload = raw[14 + hlen :]
    if len(payload) < header["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} bytes, manifest needs {header['payload_bytes']}"
        )
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(DTYPE).reshape(entry["shape"])
    return CheckpointBundle(tensors, int(header["iteration"]), header["config"],
                            {k: int(v) for k, v in header["adam_steps"].items()})


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the networks, optimisers and log for one run.

    ``loop`` is ``none`` (generator with supervised loss only), ``gan``
    (one generator, one discriminator) or ``cyclegan`` (two of each).
    Each iteration updates the discriminator(s) first, then the generator(s).
    """

    def __init__(self, loop: str, gcfg: GeneratorConfig, kind: DiscriminatorKind, cfg: TrainConfig,
                 run_config: dict | None = None):
        if loop not in LOOP_KINDS:
            raise ValueError(f"unknown loop kind {loop!r}")
        self.loop, self.gcfg, self.kind, self.cfg = loop, gcfg, kind, cfg
        self.run_config = run_config or {}
        root = Rng(cfg.seed)
        self.nets: dict[str, ParamSet] = {"G": build_generator(gcfg, root.derive(1))}
        if loop in ("gan", "cyclegan"):
            self.nets["D"] = build_discriminator(kind, root.derive(2))
        if loop == "cyclegan":
            self.nets["G2"] = build_generator(gcfg, root.derive(3))
            self.nets["D2"] = build_discriminator(kind, root.derive(4))
        self.optim = {name: Adam(p, cfg) for name, p in self.nets.items()}
        self.iteration = 0
        self.log = TrainLog(loop)

    # -- checkpoint glue ---------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for net, params in self.nets.items():
            for name, t in params.items():
                out[f"param/{net}/{name}"] = t.data
            st = self.optim[net].state
            for name in params:
                if name in st.m:
                    out[f"adam/{net}/m/{name}"] = st.m[name]
                    out[f"adam/{net}/v/{name}"] = st.v[name]
        return out

    def save(self, path) -> None:
        checkpoint_save(path, self.state_tensors(), self.iteration, self.run_config,
                        {net: opt.state.t for net, opt in self.optim.items()})

    def restore(self, bundle: CheckpointBundle) -> None:
        """Load parameters and optimiser moments; nothing is modified on a name mismatch."""
        expected = {f"param/{net}/{name}" for net, p in self.nets.items() for name in p}
        stored = {k for k in bundle.tensors if k.startswith("param/")}
        if expected != stored:
            raise CheckpointNameError(
                f"parameter names differ: missing={sorted(expected - stored)[:5]} "
                f"unexpected={sorted(stored - expected)[:5]}"
            )
        for key in expected:
            net, name = key.split("/", 2)[1:]
            if bundle.tensors[key].shape != self.nets[net][name].shape:
                raise CheckpointNameError(f"{key}: stored shape {bundle.tensors[key].shape} "
                                          f"!= {self.nets[net][name].shape}")
        for key in expected:
            net, name = key.split("/", 2)[1:]
            self.nets[net][name].data = bundle.tensors[key].copy()
        for net, opt in self.optim.items():
            opt.state = AdamState(t=bundle.adam_steps.get(net, 0))
            for name in self.nets[net]:
                mk = f"adam/{net}/m/{name}"
                if mk in bundle.tensors:
                    opt.state.m[name] = bundle.tensors[mk].copy()
                    opt.state.v[name] = bundle.tensors[f"adam/{net}/v/{name}"].copy()
        self.iteration = bundle.iteration

    # -- one iteration -----------------------------------------------------
    def _step(self, nets: Sequence[str], loss: Tensor) -> None:
        for n in self.nets:
            self.nets[n].zero_grad()
        backward(loss)
        for n in nets:
            self.optim[n].step()

    def train_step(self, image: Tensor, mask: Tensor) -> dict:
        cfg, it = self.cfg, self.iteration + 1
        rec: dict = {"iteration": it}
        G = self.nets["G"]
        if self.loop == "none":
            with _term(it, "loss_G"):
                pred = generator_forward(image, G, self.gcfg)
                loss_g = _finite(cfg.lambda_seg * supervised_loss(pred, mask))
            self._step(["G"], loss_g)
            rec.update(loss_G=loss_g.item(), loss_D=None)
        elif self.loop == "gan":
            D = self.nets["D"]
            with _term(it, "loss_G"):
                pred = generator_forward(image, G, self.gcfg)
            with _term(it, "loss_D"):
                loss_d = _finite(discriminator_loss(D, self.kind, image, mask, pred))
            self._step(["D"], loss_d)
            with _term(it, "loss_G"):
                loss_g = adversarial_loss(D, self.kind, image, pred)
                if cfg.lambda_seg:
                    loss_g = loss_g + cfg.lambda_seg * supervised_loss(pred, mask)
                _finite(loss_g)
            self._step(["G"], loss_g)
            rec.update(loss_G=loss_g.item(), loss_D=loss_d.item())
        else:
            nets = CycleNets(G, self.nets["G2"], self.nets["D"], self.nets["D2"], self.gcfg, self.kind)
            with _term(it, "loss_G"):
                fake_mask = generator_forward(image, nets.g1, self.gcfg)
            with _term(it, "loss_G2"):
                fake_image = generator_forward(mask, nets.g2, self.gcfg)
            with _term(it, "loss_D"):
                loss_d1 = _finite(discriminator_loss(nets.d1, self.kind, image, mask, fake_mask))
            with _term(it, "loss_D2"):
                loss_d2 = _finite(discriminator_loss(nets.d2, self.kind, mask, image, fake_image))
            self._step(["D", "D2"], loss_d1 + loss_d2)
            with _term(it, "loss_G"):
                adv1 = _finite(adversarial_loss(nets.d1, self.kind, image, fake_mask))
                sup = _finite(cfg.lambda_seg * supervised_loss(fake_mask, mask))
            with _term(it, "loss_G2"):
                adv2 = _finite(adversarial_loss(nets.d2, self.kind, mask, fake_image))
            with _term(it, "loss_cycle"):
                cycle = _finite(cfg.lambda_cyc * (
                    l1_loss(generator_forward(fake_mask, nets.g2, self.gcfg), image)
                    + l1_loss(generator_forward(fake_image, nets.g1, self.gcfg), mask)
                ))
            bundle = CycleLosses(loss_d1, loss_d2, adv1, adv2, cycle, sup)
            self._step(["G", "G2"], bundle.generator_total)
            rec.update(loss_G=bundle.loss_g1.item(), loss_D=loss_d1.item(), loss_cycle=cycle.item(),
                       loss_G2=adv2.item(), loss_D2=loss_d2.item())
        self.iteration = it
        return rec

    # -- the loop ----------------------------------------------------------
    def total_iterations(self, n_samples: int) -> int:
        total = self.cfg.epochs * iterations_per_epoch(n_samples, self.cfg.batch_size)
        if self.cfg.max_iterations is not None:
            total = min(total, self.cfg.max_iterations)
        return total

    def fit(self, samples: Sequence[Sample], checkpoint_dir=None, checkpoint_interval: int = 0,
            log_path=None, deterministic: bool = True, progress=None) -> TrainLog:
        if not samples:
            raise ValueError("training set is empty")
        per_epoch = iterations_per_epoch(len(samples), self.cfg.batch_size)
        total = self.total_iterations(len(samples))
        rng = Rng(self.cfg.seed)
        order, order_epoch = None, -1
        while self.iteration < total:
            epoch, pos = divmod(self.iteration, per_epoch)
            if epoch != order_epoch:
                order, order_epoch = epoch_order(len(samples), rng, epoch), epoch
            idx = order[pos * self.cfg.batch_size : (pos + 1) * self.cfg.batch_size]
            image, mask = make_batch([samples[i] for i in idx])
            t0 = time.perf_counter()
            rec = self.train_step(image, mask)
            rec["seconds"] = 0.0 if deterministic else time.perf_counter() - t0
            self.log.append(rec)
            if progress is not None:
                progress(rec)
            if checkpoint_dir is not None and checkpoint_interval and self.iteration % checkpoint_interval == 0:
                self.save(Path(checkpoint_dir) / f"iter_{self.iteration:06d}.ckpt")
            if log_path is not None and (self.iteration % 50 == 0 or self.iteration == total):
                self.log.to_csv(log_path)
        if checkpoint_dir is not None:
            self.save(Path(checkpoint_dir) / "final.ckpt")
        if log_path is not None:
            self.log.to_csv(log_path)
        return self.log


def _finite(loss: Tensor) -> Tensor:
    if not math.isfinite(float(loss.data)):
        raise NonFiniteError(f"value {float(loss.data)}")
    return loss


@contextmanager
def _term(iteration: int, term: str):
    """Tag any non-finite failure with the iteration and loss term being computed."""
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"iteration {iteration}: {term} is non-finite ({exc})") from exc


def train(loop: str, samples: Sequence[Sample], gcfg: GeneratorConfig | None = None,
          kind: DiscriminatorKind | None = None, cfg: TrainConfig | None = None, **fit_kw):
    """Train from scratch; returns (networks by name, TrainLog)."""
    trainer = Trainer(loop, gcfg or GeneratorConfig(), kind or DiscriminatorKind(), cfg or TrainConfig())
    log_ = trainer.fit(samples, **fit_kw)
    return trainer.nets, log_


def config_dict(gcfg: GeneratorConfig, kind: DiscriminatorKind, cfg: TrainConfig, loop: str) -> dict:
    return {"loop": loop, "generator": asdict(gcfg), "discriminator": asdict(kind), "train": asdict(cfg)}
