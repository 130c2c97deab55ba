"""ADAM optimization and the adversarial training loop.

Each step trains the discriminator on a fresh batch; every ``n_critic``-th
step additionally updates the generator on that batch with two passes
(edited output for the adversarial/attribute terms, zero-difference output
for the reconstruction term).  Everything random flows from one seeded
generator, so a (config, seed) pair fully reproduces a run, and resuming a
checkpoint continues the exact same stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, diff_vector, sample_targets
from .errors import ConfigError, TrainingAborted
from .losses import LossWeights, total_d_loss, total_g_loss
from .networks import Discriminator, Generator, GeneratorConfig, build_models
from .nn import load_state, state_dict
from .tensor import Parameter


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------

def adam_step(data: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float, beta2: float, eps: float) -> None:
    """One in-place bias-corrected ADAM update for a single tensor."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    data -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: List[Parameter], beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        for p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if grad.shape != p.data.shape:
                raise ConfigError(f"gradient shape mismatch for {p.name}")
            adam_step(p.data, grad, self.m[p.name], self.v[p.name],
                      self.t, lr, self.beta1, self.beta2, self.eps)

    def state_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, prefix: str, tensors: Dict[str, np.ndarray],
                           t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name] = tensors[f"{prefix}/m/{name}"].astype(
                self.m[name].dtype, copy=True)
            self.v[name] = tensors[f"{prefix}/v/{name}"].astype(
                self.v[name].dtype, copy=True)


# ---------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    net: GeneratorConfig = field(default_factory=GeneratorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr_initial: float = 2e-4
    lr_finetune: float = 2e-5
    lr_decay_epoch: Optional[int] = None  # default: halfway through the run
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_critic: int = 5
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    target_policy: str = "permutation"
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only

    def validate(self) -> "TrainConfig":
        self.net.validate()
        self.weights.validate()
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_initial <= 0 or self.lr_finetune <= 0:
            raise ConfigError("learning rates must be positive")
        return self

    def decay_epoch(self) -> int:
        return self.lr_decay_epoch if self.lr_decay_epoch is not None \
            else max(1, self.epochs // 2)

    def lr_at(self, epoch: int) -> float:
        return self.lr_finetune if epoch >= self.decay_epoch() else self.lr_initial

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("net", "weights")}
        d["net"] = self.net.to_dict()
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = GeneratorConfig.from_dict(d.pop("net", {}))
        weights = LossWeights.from_dict(d.pop("weights", {}))
        return cls(net=net, weights=weights, **d).validate()


@dataclass
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    checkpoints: List[str]
    epochs_run: int
    steps: int


# ---------------------------------------------------------------------
# conditioning helpers (difference vs target attribute input)
# ---------------------------------------------------------------------

def edit_vector(cfg: GeneratorConfig, att_s: np.ndarray, att_t: np.ndarray) -> np.ndarray:
    """The vector handed to the generator for an edit request."""
    if cfg.conditioning == "diff":
        return diff_vector(att_t, att_s).astype(np.float32)
    return np.asarray(att_t, dtype=np.float32)


def recon_vector(cfg: GeneratorConfig, att_s: np.ndarray) -> np.ndarray:
    """The vector that requests an identity reconstruction."""
    if cfg.conditioning == "diff":
        return np.zeros_like(np.asarray(att_s, dtype=np.float32))
    return np.asarray(att_s, dtype=np.float32)


# ---------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------

def _save_train_checkpoint(path, cfg: TrainConfig, gen: Generator,
                           disc: Discriminator, adam_g: Adam, adam_d: Adam,
                           rng: np.random.Generator, epoch: int, step: int,
                           attr_names) -> str:
    tensors = {}
    tensors.update(state_dict(gen.parameters()))
    tensors.update(state_dict(disc.parameters()))
    tensors.update(adam_g.state_tensors("optim/g"))
    tensors.update(adam_d.state_tensors("optim/d"))
    meta = {"attr_names": list(attr_names),
            "progress": {"epoch": epoch, "step": step},
            "adam": {"g_t": adam_g.t, "d_t": adam_d.t},
            "rng_state": rng.bit_generator.state}
    return save_checkpoint(path, "stgan", cfg.to_dict(), meta, tensors)


def models_from_checkpoint(ckpt: Checkpoint) -> Tuple[TrainConfig, Generator, Discriminator]:
    if ckpt.kind != "stgan":
        raise ConfigError(f"expected an stgan checkpoint, got {ckpt.kind!r}")
    cfg = TrainConfig.from_dict(ckpt.config)
    gen, disc = build_models(cfg.net, seed=cfg.seed)
    gparams = {k: v for k, v in ckpt.tensors.items() if k.startswith("generator/")}
    dparams = {k: v for k, v in ckpt.tensors.items() if k.startswith("discriminator/")}
    load_state(gen.parameters(), gparams)
    load_state(disc.parameters(), dparams)
    return cfg, gen, disc


def load_models(path) -> Tuple[TrainConfig, Generator, Discriminator, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg, gen, disc = models_from_checkpoint(ckpt)
    return cfg, gen, disc, ckpt


# ---------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------

def train(cfg: TrainConfig, data: Dict[str, Dataset], out_dir,
          resume_from: Optional[str] = None,
          progress: Optional[callable] = None) -> TrainResult:
    """Run the full adversarial loop; returns checkpoint/metrics paths.

    ``data`` must contain a ``train`` split whose image size and attribute
    count match the network configuration.  A non-finite loss aborts with
    the last good checkpoint retained on disk.
    """
    cfg.validate()
    train_ds = data["train"] if isinstance(data, dict) else data
    if train_ds.image_size != cfg.net.image_size:
        raise ConfigError(f"dataset is {train_ds.image_size}px, config wants "
                          f"{cfg.net.image_size}px")
    if train_ds.attr_count != cfg.net.attr_count:
        raise ConfigError(f"dataset has {train_ds.attr_count} attributes, config "
                          f"wants {cfg.net.attr_count}")
    if len(train_ds) < cfg.batch_size:
        raise ConfigError("training split smaller than one batch")

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    start_epoch = 0
    step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        loaded_cfg, gen, disc = models_from_checkpoint(ckpt)
        # run-length fields may differ (extending a run); everything that
        # shapes the model or the random stream must match exactly
        extendable = ("epochs", "checkpoint_every", "lr_decay_epoch")
        a = {k: v for k, v in loaded_cfg.to_dict().items() if k not in extendable}
        b = {k: v for k, v in cfg.to_dict().items() if k not in extendable}
        if a != b:
            raise ConfigError("resume config does not match checkpoint config")
        adam_g = Adam(gen.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
        adam_d = Adam(disc.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
        adam_g.load_state_tensors("optim/g", ckpt.tensors, ckpt.meta["adam"]["g_t"])
        adam_d.load_state_tensors("optim/d", ckpt.tensors, ckpt.meta["adam"]["d_t"])
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.meta["rng_state"]
        start_epoch = ckpt.meta["progress"]["epoch"]
        step = ckpt.meta["progress"]["step"]
        log_mode = "a"
    else:
        gen, disc = build_models(cfg.net, seed=cfg.seed)
        adam_g = Adam(gen.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
        adam_d = Adam(disc.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7e41]))
        log_mode = "w"

    checkpoints: List[str] = []
    last_good: Optional[str] = resume_from if resume_from else None

    def write_ckpt(epoch: int) -> str:
        path = ckpt_dir / f"epoch-{epoch:04d}.ckpt"
        _save_train_checkpoint(path, cfg, gen, disc, adam_g, adam_d, rng,
                               epoch, step, train_ds.attr_names)
        checkpoints.append(str(path))
        return str(path)

    n = len(train_ds)
    batches_per_epoch = n // cfg.batch_size

    with open(metrics_path, log_mode) as log:
        for epoch in range(start_epoch, cfg.epochs):
            lr = cfg.lr_at(epoch)
            order = rng.permutation(n)
            for b in range(batches_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x = T.tensor(train_ds.images[idx])
                att_s = train_ds.labels[idx]
                att_t = sample_targets(att_s, rng, cfg.target_policy)
                ev = edit_vector(cfg.net, att_s, att_t)

                with T.no_grad():
                    fake = gen.generate(x, ev).detach()
                d_loss, record = total_d_loss(disc, x, att_s, fake,
                                              cfg.weights, rng)
                if not np.isfinite(record["d_total"]):
                    raise TrainingAborted(
                        f"non-finite discriminator loss at step {step}; "
                        f"last good checkpoint: {last_good}")
                T.zero_grad(disc.parameters())
                T.backward(d_loss)
                adam_d.step(lr)

                if (step + 1) % cfg.n_critic == 0:
                    T.set_requires_grad(disc.parameters(), False)
                    try:
                        y_hat = gen.generate(x, ev)
                        x_rec = gen.generate(x, recon_vector(cfg.net, att_s))
                        g_loss, g_record = total_g_loss(disc, y_hat, att_t, x,
                                                        x_rec, cfg.weights)
                        if not np.isfinite(g_record["g_total"]):
                            raise TrainingAborted(
                                f"non-finite generator loss at step {step}; "
                                f"last good checkpoint: {last_good}")
                        T.zero_grad(gen.parameters())
                        T.backward(g_loss)
                        adam_g.step(lr)
                    finally:
                        T.set_requires_grad(disc.parameters(), True)
                    record.update(g_record)

                record.update({"step": step, "epoch": epoch, "lr": lr})
                log.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            log.flush()
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                last_good = write_ckpt(epoch + 1)
            if progress is not None:
                progress(epoch + 1, cfg.epochs, step)

        if not checkpoints or checkpoints[-1] != str(ckpt_dir / f"epoch-{cfg.epochs:04d}.ckpt"):
            last_good = write_ckpt(cfg.epochs)

    return TrainResult(final_checkpoint=checkpoints[-1],
                       metrics_path=str(metrics_path),
                       checkpoints=checkpoints,
                       epochs_run=cfg.epochs - start_epoch,
                       steps=step)
