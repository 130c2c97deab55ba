"""Quantitative evaluation: attribute generation accuracy judged by an
independently trained classifier, reconstruction PSNR/SSIM, and the
ablation harness comparing architecture variants under one budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset
from .errors import ConfigError, ContractError, EvalGateError
from .losses import bce_attributes
from .networks import Generator
from .nn import Conv2d, Linear, load_state, param_checksum, state_dict
from .training import (Adam, TrainConfig, edit_vector, load_models,
                       recon_vector, train)

PSNR_CAP = 99.0
_SSIM_K1, _SSIM_K2, _SSIM_L = 0.01, 0.03, 255.0


# ---------------------------------------------------------------------
# image quality metrics (0..255 scale)
# ---------------------------------------------------------------------

def to_255(img: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] float image to the 0..255 scale (no quantization)."""
    return (np.asarray(img, dtype=np.float64) + 1.0) * 127.5

def psnr(a255: np.ndarray, b255: np.ndarray, cap: float = PSNR_CAP) -> float:
    mse = float(np.mean((np.asarray(a255, np.float64) -
                         np.asarray(b255, np.float64)) ** 2))
    if mse <= _SSIM_L ** 2 * 10.0 ** (-cap / 10.0):
        return cap
    return 10.0 * np.log10(_SSIM_L ** 2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    view = sliding_window_view(img, (k, k))
    return np.einsum("hwij,ij->hw", view, win, optimize=True)


def ssim(a255: np.ndarray, b255: np.ndarray, size: int = 11,
         sigma: float = 1.5) -> float:
    """Structural similarity with the standard 11x11 Gaussian window,
    k1=0.01 / k2=0.03 / L=255, averaged over channels."""
    a = np.asarray(a255, np.float64)
    b = np.asarray(b255, np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    win = _gaussian_window(size, sigma)
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        var_x = _filter_valid(x * x, win) - mu_x ** 2
        var_y = _filter_valid(y * y, win) - mu_y ** 2
        cov = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------
# judge classifier
# ---------------------------------------------------------------------

class AttributeClassifier:
    """Small conv net; the independent judge for generation accuracy."""

    WIDTHS = (16, 32, 64)

    def __init__(self, image_size: int, attr_count: int,
                 rng: np.random.Generator, dtype=np.float32):
        if image_size % 8 != 0:
            raise ConfigError("classifier needs image_size divisible by 8")
        self.image_size = image_size
        self.attr_count = attr_count
        self.convs: List[Conv2d] = []
        in_ch = 3
        for i, out_ch in enumerate(self.WIDTHS):
            self.convs.append(Conv2d(f"classifier/conv/{i}", in_ch, out_ch,
                                     kernel=4, stride=2, padding=1, rng=rng,
                                     dtype=dtype))
            in_ch = out_ch
        side = image_size // 8
        self.fc1 = Linear("classifier/fc/0", self.WIDTHS[-1] * side * side, 64,
                          rng, dtype=dtype)
        self.fc2 = Linear("classifier/fc/1", 64, attr_count, rng, dtype=dtype)

    def parameters(self):
        out = []
        for conv in self.convs:
            out.extend(conv.params())
        out.extend(self.fc1.params())
        out.extend(self.fc2.params())
        return out

    def logits(self, x):
        h = x
        for conv in self.convs:
            h = T.leaky_relu(conv(h), 0.2)
        h = T.leaky_relu(self.fc1(T.reshape(h, (x.shape[0], -1))), 0.2)
        return self.fc2(h)

    def probs(self, x):
        return T.sigmoid(self.logits(x))

    def predict(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Binary verdicts for a (N, 3, H, W) float array."""
        out = np.zeros((images.shape[0], self.attr_count), np.uint8)
        with T.no_grad():
            for i in range(0, images.shape[0], batch):
                p = self.probs(T.tensor(images[i:i + batch]))
                out[i:i + batch] = (p.data >= 0.5).astype(np.uint8)
        return out


def classifier_accuracy(clf: AttributeClassifier, ds: Dataset) -> float:
    preds = clf.predict(ds.images)
    return float(np.mean(preds == ds.labels))


def train_attribute_classifier(train_ds: Dataset, test_ds: Dataset,
                               seed: int = 0, epochs: int = 5,
                               batch_size: int = 64,
                               lr: float = 1e-3) -> Tuple[AttributeClassifier, float]:
    """Train the judge on the train split; returns it with its test accuracy."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1F]))
    clf = AttributeClassifier(train_ds.image_size, train_ds.attr_count, rng)
    opt = Adam(clf.parameters(), beta1=0.9, beta2=0.999)
    n = len(train_ds)
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(n // batch_size):
            idx = order[b * batch_size:(b + 1) * batch_size]
            x = T.tensor(train_ds.images[idx])
            loss = bce_attributes(clf.probs(x), train_ds.labels[idx])
            T.zero_grad(clf.parameters())
            T.backward(loss)
            opt.step(lr)
    return clf, classifier_accuracy(clf, test_ds)


def save_classifier(path, clf: AttributeClassifier, accuracy: float,
                    attr_names: Sequence[str]) -> str:
    return save_checkpoint(path, "classifier",
                           {"image_size": clf.image_size,
                            "attr_count": clf.attr_count},
                           {"accuracy": accuracy, "attr_names": list(attr_names)},
                           state_dict(clf.parameters()))


def load_classifier(path) -> Tuple[AttributeClassifier, float]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "classifier":
        raise ConfigError(f"expected a classifier checkpoint, got {ckpt.kind!r}")
    rng = np.random.default_rng(0)
    clf = AttributeClassifier(ckpt.config["image_size"], ckpt.config["attr_count"], rng)
    load_state(clf.parameters(), ckpt.tensors)
    return clf, float(ckpt.meta["accuracy"])


# ---------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------

@dataclass
class EvalReport:
    per_attribute: Dict[str, float]
    mean_accuracy: float
    psnr: float
    ssim: float
    meta: dict = field(default_factory=dict)

    def validate(self) -> "EvalReport":
        for name, acc in self.per_attribute.items():
            if not (0.0 <= acc <= 1.0):
                raise ContractError(f"accuracy for {name} out of [0,1]: {acc}")
        if not np.isfinite(self.psnr):
            raise ContractError("PSNR must be finite (cap sentinel applies)")
        return self

    def to_dict(self) -> dict:
        return {"per_attribute": self.per_attribute,
                "mean_accuracy": self.mean_accuracy,
                "psnr": self.psnr, "ssim": self.ssim, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(per_attribute=dict(d["per_attribute"]),
                   mean_accuracy=d["mean_accuracy"], psnr=d["psnr"],
                   ssim=d["ssim"], meta=d.get("meta", {})).validate()


def _generate_batched(gen: Generator, images: np.ndarray, vectors: np.ndarray,
                      batch: int) -> np.ndarray:
    out = np.zeros_like(images)
    with T.no_grad():
        for i in range(0, images.shape[0], batch):
            out[i:i + batch] = gen.generate(
                T.tensor(images[i:i + batch]),
                vectors[i:i + batch].astype(np.float32)).data
    return out


def attribute_generation_accuracy(gen: Generator, clf: AttributeClassifier,
                                  clf_accuracy: float, test_ds: Dataset,
                                  floor: float = 0.97, batch: int = 64,
                                  edit_fn: Optional[Callable] = None
                                  ) -> Dict[str, float]:
    """Flip each attribute on each test image (both directions), edit, and
    score the judge's verdict on the flipped attribute only.

    ``edit_fn(images, att_s, att_t) -> edited images`` substitutes the
    generator (e.g. the renderer oracle for the harness ceiling).
    """
    if clf_accuracy < floor:
        raise EvalGateError(
            f"judge accuracy {clf_accuracy:.4f} is below the floor {floor:.2f}; "
            "refusing to evaluate with an untrusted judge")
    cfg = gen.cfg if gen is not None else None
    out: Dict[str, float] = {}
    for i, name in enumerate(test_ds.attr_names):
        att_s = test_ds.labels.astype(np.int8)
        att_t = att_s.copy()
        att_t[:, i] = 1 - att_t[:, i]
        if edit_fn is not None:
            edited = edit_fn(test_ds.images, att_s, att_t)
        else:
            vectors = edit_vector(cfg, att_s, att_t)
            edited = _generate_batched(gen, test_ds.images, vectors, batch)
        verdicts = clf.predict(edited, batch=batch)
        out[name] = float(np.mean(verdicts[:, i] == att_t[:, i]))
    return out


def reconstruction_eval(gen: Generator, test_ds: Dataset,
                        batch: int = 64) -> Tuple[float, float]:
    """PSNR/SSIM of the identity edit against the input, averaged."""
    vectors = recon_vector(gen.cfg, test_ds.labels)
    recon = _generate_batched(gen, test_ds.images, vectors, batch)
    psnrs = [psnr(to_255(test_ds.images[i]), to_255(recon[i]))
             for i in range(len(test_ds))]
    ssims = [ssim(to_255(test_ds.images[i]), to_255(recon[i]))
             for i in range(len(test_ds))]
    return float(np.mean(psnrs)), float(np.mean(ssims))


def evaluate(gen: Generator, clf: AttributeClassifier, clf_accuracy: float,
             test_ds: Dataset, floor: float = 0.97, batch: int = 64,
             meta: Optional[dict] = None) -> EvalReport:
    """Full protocol; never mutates network parameters."""
    before = param_checksum(gen.parameters())
    per_attr = attribute_generation_accuracy(gen, clf, clf_accuracy, test_ds,
                                             floor=floor, batch=batch)
    p, s = reconstruction_eval(gen, test_ds, batch=batch)
    if param_checksum(gen.parameters()) != before:
        raise ContractError("evaluation mutated generator parameters")
    report = EvalReport(per_attribute=per_attr,
                        mean_accuracy=float(np.mean(list(per_attr.values()))),
                        psnr=p, ssim=s, meta=dict(meta or {}))
    return report.validate()


def report_table(rows: List[Tuple[str, EvalReport]]) -> str:
    """One comparison table over named reports (ablation output)."""
    if not rows:
        return "(no results)"
    attr_names = list(rows[0][1].per_attribute)
    header = ["variant"] + attr_names + ["mean_acc", "psnr_db", "ssim"]
    table = [header]
    for name, rep in rows:
        table.append([name]
                     + [f"{rep.per_attribute[a]:.3f}" for a in attr_names]
                     + [f"{rep.mean_accuracy:.3f}", f"{rep.psnr:.2f}",
                        f"{rep.ssim:.4f}"])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------

VARIANT_SETTINGS: Dict[str, Dict[str, str]] = {
    "standard":     {"skip_mode": "stu", "stu_variant": "standard", "conditioning": "diff"},
    "dst":          {"skip_mode": "stu", "stu_variant": "standard", "conditioning": "target"},
    "conv":         {"skip_mode": "stu", "stu_variant": "conv", "conditioning": "diff"},
    "conv_res":     {"skip_mode": "stu", "stu_variant": "conv_res", "conditioning": "diff"},
    "gru_output":   {"skip_mode": "stu", "stu_variant": "gru_output", "conditioning": "diff"},
    "res":          {"skip_mode": "stu", "stu_variant": "res", "conditioning": "diff"},
    "skip_none":    {"skip_mode": "none", "stu_variant": "standard", "conditioning": "diff"},
    "skip_raw1":    {"skip_mode": "raw1", "stu_variant": "standard", "conditioning": "diff"},
    "skip_raw2":    {"skip_mode": "raw2", "stu_variant": "standard", "conditioning": "diff"},
    "skip_raw_all": {"skip_mode": "raw_all", "stu_variant": "standard", "conditioning": "diff"},
}


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANT_SETTINGS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of "
                          f"{sorted(VARIANT_SETTINGS)}")
    d = base.to_dict()
    d["net"] = dict(d["net"])
    d["net"].update(VARIANT_SETTINGS[variant])
    return TrainConfig.from_dict(d)


def ablation_run(base_cfg: TrainConfig, variants: Sequence[str],
                 data: Dict[str, Dataset], out_dir,
                 clf: Optional[AttributeClassifier] = None,
                 clf_accuracy: Optional[float] = None, floor: float = 0.97,
                 progress: Optional[Callable] = None) -> dict:
    """Train and evaluate each variant under identical seed and budget.

    A failing run is recorded and the remaining variants proceed.  The
    judge classifier is trained once and shared, so the comparison is
    scored by one referee.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if clf is None:
        clf, clf_accuracy = train_attribute_classifier(
            data["train"], data["test"], seed=base_cfg.seed)
    rows: List[Tuple[str, EvalReport]] = []
    failures: Dict[str, str] = {}
    results = {}
    for variant in variants:
        run_dir = out_dir / variant
        try:
            cfg = variant_config(base_cfg, variant)
            result = train(cfg, data, run_dir)
            _, gen, _, ckpt = load_models(result.final_checkpoint)
            report = evaluate(gen, clf, clf_accuracy, data["test"], floor=floor,
                              meta={"variant": variant,
                                    "checkpoint_id": ckpt.checkpoint_id,
                                    "checkpoint": result.final_checkpoint})
            rows.append((variant, report))
            results[variant] = report
        except Exception as e:  # record, keep going
            failures[variant] = f"{type(e).__name__}: {e}"
        if progress is not None:
            progress(variant, failures.get(variant))
    table = report_table(rows)
    payload = {"table": table,
               "reports": {name: rep.to_dict() for name, rep in rows},
               "failures": failures,
               "judge_accuracy": clf_accuracy}
    (out_dir / "ablation.json").write_text(json.dumps(payload, indent=2,
                                                      sort_keys=True))
    (out_dir / "ablation.txt").write_text(table + "\n")
    return payload
