"""Attribute-labeled image sources.

Two paths deliver identical tensors: a procedural synthetic renderer
(written to disk as PNG + CSV manifest) and a loader for any externally
prepared corpus in the same manifest format.  The renderer is fully
deterministic given (seed, split, index), and it can re-render any sample
with edited attributes, which gives evaluation a ground-truth editing
oracle no learned model can beat.

Synthetic attributes (one global, one shape-level, three local/structural):

* ``cool_tint`` - background is cool blue instead of warm orange
* ``square``    - the figure is a square instead of a circle
* ``border``    - dark outline ring around the figure
* ``dot``       - small bright dot on the figure
* ``large``     - figure drawn at the large radius
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DimensionError, ManifestError

ATTRIBUTES = ("cool_tint", "square", "border", "dot", "large")
SPLITS = ("train", "val", "test")
_SPLIT_IDS = {"train": 1, "val": 2, "test": 3}

_BG_WARM = np.array([235.0, 205.0, 170.0])
_BG_COOL = np.array([165.0, 190.0, 225.0])
_SHAPE_COLORS = np.array([
    [140.0, 45.0, 55.0],    # brick red
    [40.0, 110.0, 75.0],    # green
    [45.0, 70.0, 150.0],    # blue
    [120.0, 50.0, 130.0],   # plum
])
_BORDER_COLOR = np.array([25.0, 25.0, 30.0])
_DOT_COLOR = np.array([245.0, 225.0, 90.0])


# ---------------------------------------------------------------------
# attribute vectors
# ---------------------------------------------------------------------

def diff_vector(att_t, att_s) -> np.ndarray:
    """Componentwise target-minus-source difference in {-1, 0, +1}."""
    t = np.asarray(att_t)
    s = np.asarray(att_s)
    if t.shape != s.shape:
        raise DimensionError(f"attribute length mismatch: {t.shape} vs {s.shape}")
    for arr, name in ((t, "target"), (s, "source")):
        if not np.all(np.isin(arr, (0, 1))):
            raise ContractError(f"{name} attributes must be binary")
    return (t.astype(np.int8) - s.astype(np.int8))


def sample_targets(att_s: np.ndarray, rng: np.random.Generator,
                   policy: str = "permutation") -> np.ndarray:
    """Draw target vectors for a batch of source vectors.

    ``permutation`` reshuffles the batch's own rows, so every target is a
    combination that actually occurs; ``single_flip`` toggles exactly one
    uniformly chosen attribute per sample.
    """
    att_s = np.asarray(att_s)
    if att_s.ndim != 2:
        raise DimensionError("att_s must be (batch, c)")
    if policy == "permutation":
        return att_s[rng.permutation(att_s.shape[0])].copy()
    if policy == "single_flip":
        out = att_s.copy()
        flips = rng.integers(0, att_s.shape[1], size=att_s.shape[0])
        rows = np.arange(att_s.shape[0])
        out[rows, flips] = 1 - out[rows, flips]
        return out
    raise ConfigError(f"unknown target policy {policy!r}")


# ---------------------------------------------------------------------
# synthetic renderer
# ---------------------------------------------------------------------

@dataclass
class SynthSpec:
    image_size: int = 64
    seed: int = 0
    train: int = 1024
    val: int = 128
    test: int = 256
    attributes: Tuple[str, ...] = ATTRIBUTES

    def validate(self) -> "SynthSpec":
        if self.image_size < 32:
            raise ConfigError("synthetic images need image_size >= 32")
        if tuple(self.attributes) != ATTRIBUTES:
            raise ConfigError(f"renderer implements exactly {ATTRIBUTES}")
        if min(self.train, self.val, self.test) < 0:
            raise ConfigError("split sizes must be >= 0")
        return self

    def counts(self) -> Dict[str, int]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "seed": self.seed,
                "train": self.train, "val": self.val, "test": self.test,
                "attributes": list(self.attributes)}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "attributes" in d:
            d["attributes"] = tuple(d["attributes"])
        return cls(**d).validate()


def sample_params(spec: SynthSpec, split: str, index: int):
    """Deterministic (attributes, nuisance) for one sample id."""
    if split not in _SPLIT_IDS:
        raise ConfigError(f"unknown split {split!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _SPLIT_IDS[split], index]))
    attrs = rng.integers(0, 2, size=len(spec.attributes)).astype(np.uint8)
    scale = spec.image_size / 64.0
    nuisance = {
        "cx": spec.image_size / 2.0 + rng.uniform(-4.0, 4.0) * scale,
        "cy": spec.image_size / 2.0 + rng.uniform(-4.0, 4.0) * scale,
        "radius_jitter": rng.uniform(-0.8, 0.8) * scale,
        "color_index": int(rng.integers(0, len(_SHAPE_COLORS))),
        "bg_jitter": rng.uniform(-10.0, 10.0),
    }
    return attrs, nuisance


def _radius(spec: SynthSpec, attrs, nuisance) -> float:
    scale = spec.image_size / 64.0
    base = 16.0 if attrs[4] else 10.0
    return base * scale + nuisance["radius_jitter"]


def _coverage(dist: np.ndarray) -> np.ndarray:
    # 1px soft edge: full inside, zero a pixel outside
    return np.clip(0.5 - dist, 0.0, 1.0)


def render(spec: SynthSpec, attrs: Sequence[int], nuisance: dict) -> np.ndarray:
    """Render one sample to a (3, H, W) uint8 image."""
    s = spec.image_size
    scale = s / 64.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    cx, cy = nuisance["cx"], nuisance["cy"]
    r = _radius(spec, attrs, nuisance)

    bg = (_BG_COOL if attrs[0] else _BG_WARM) + nuisance["bg_jitter"]
    img = np.broadcast_to(bg[:, None, None], (3, s, s)).copy()

    if attrs[1]:  # square: Chebyshev distance, half-side == radius
        dist = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - r
    else:
        dist = np.hypot(xx - cx, yy - cy) - r
    shape_color = _SHAPE_COLORS[nuisance["color_index"]]
    cov = _coverage(dist)
    img = img * (1 - cov) + shape_color[:, None, None] * cov

    if attrs[2]:  # border ring centered on the outline
        ring = _coverage(np.abs(dist) - 1.6 * scale)
        img = img * (1 - ring) + _BORDER_COLOR[:, None, None] * ring

    if attrs[3]:  # dot sits on the figure, above center
        dot_cx, dot_cy = cx, cy - 0.45 * r
        ddist = np.hypot(xx - dot_cx, yy - dot_cy) - 3.4 * scale
        dcov = _coverage(ddist)
        img = img * (1 - dcov) + _DOT_COLOR[:, None, None] * dcov

    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def dot_region(spec: SynthSpec, attrs, nuisance) -> np.ndarray:
    """Boolean (H, W) mask of pixels the dot can touch."""
    s = spec.image_size
    scale = s / 64.0
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    r = _radius(spec, attrs, nuisance)
    dot_cx, dot_cy = nuisance["cx"], nuisance["cy"] - 0.45 * r
    return np.hypot(xx - dot_cx, yy - dot_cy) - 3.4 * scale < 1.0


def render_edited(spec: SynthSpec, split: str, index: int,
                  attrs: Sequence[int]) -> np.ndarray:
    """Ground-truth edit: re-render a sample id with replaced attributes."""
    _, nuisance = sample_params(spec, split, index)
    return render(spec, np.asarray(attrs, dtype=np.uint8), nuisance)


def rules_classify(spec: SynthSpec, image: np.ndarray, nuisance: dict) -> np.ndarray:
    """Recover attributes from a rendered image by the rendering rules.

    The renderer is the labeler, literally: with the sample's nuisance
    parameters known, every attribute combination is rendered and the one
    matching the image is returned.  Exact on clean renders.
    """
    from itertools import product
    img = image.astype(np.int16)
    best_bits, best_err = None, None
    for bits in product((0, 1), repeat=len(spec.attributes)):
        cand = render(spec, np.array(bits, np.uint8), nuisance).astype(np.int16)
        err = int(np.abs(cand - img).sum())
        if best_err is None or err < best_err:
            best_bits, best_err = bits, err
            if err == 0:
                break
    return np.array(best_bits, dtype=np.uint8)


# ---------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray            # (N, 3, H, W) float32 in [-1, 1]
    labels: np.ndarray            # (N, c) uint8
    ids: List[str]
    attr_names: Tuple[str, ...]
    spec: Optional[SynthSpec] = None   # set for synthetic data (re-render oracle)
    split: Optional[str] = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def attr_count(self) -> int:
        return len(self.attr_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx],
                       [self.ids[i] for i in idx], self.attr_names,
                       spec=self.spec, split=self.split)


def to_float(img_u8: np.ndarray) -> np.ndarray:
    return (img_u8.astype(np.float32) / 127.5) - 1.0


def to_uint8(img_f: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img_f + 1.0) * 127.5), 0, 255).astype(np.uint8)


def synth_dataset(spec: SynthSpec) -> Dict[str, Dataset]:
    """Render all splits in memory (identical to the on-disk pipeline,
    since the renderer quantizes to uint8 before the float mapping)."""
    spec.validate()
    out = {}
    for split, count in spec.counts().items():
        images = np.zeros((count, 3, spec.image_size, spec.image_size), np.float32)
        labels = np.zeros((count, len(spec.attributes)), np.uint8)
        ids = []
        for i in range(count):
            attrs, nuisance = sample_params(spec, split, i)
            images[i] = to_float(render(spec, attrs, nuisance))
            labels[i] = attrs
            ids.append(f"{split}-{i:05d}")
        out[split] = Dataset(images, labels, ids, tuple(spec.attributes),
                             spec=spec, split=split)
    return out


# ---------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------

def write_dataset(datasets: Dict[str, Dataset], root) -> Path:
    """Emit PNG images plus one CSV manifest per split.

    Layout: ``root/images/<id>.png``, ``root/<split>.csv`` with header
    ``filename,<attr...>``, and ``root/dataset.json`` metadata.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    attr_names = None
    for split, ds in datasets.items():
        attr_names = ds.attr_names
        with open(root / f"{split}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename"] + list(ds.attr_names))
            for i in range(len(ds)):
                fname = f"{ds.ids[i]}.png"
                Image.fromarray(to_uint8(ds.images[i]).transpose(1, 2, 0)).save(
                    root / "images" / fname)
                writer.writerow([fname] + [int(v) for v in ds.labels[i]])
    meta = {"attributes": list(attr_names or ()),
            "splits": {k: len(v) for k, v in datasets.items()}}
    spec = next((ds.spec for ds in datasets.values() if ds.spec is not None), None)
    if spec is not None:
        meta["synth_spec"] = spec.to_dict()
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def _load_image(path: Path, image_size: Optional[int]) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if image_size is not None and img.size != (image_size, image_size):
        # center-crop to square, then bicubic to target size
        w, h = img.size
        side = min(w, h)
        left = (w - side) // 2
        top = (h - side) // 2
        img = img.crop((left, top, left + side, top + side))
        img = img.resize((image_size, image_size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.uint8).transpose(2, 0, 1)
    return to_float(arr)


def load_manifest(root, image_size: Optional[int] = None,
                  splits: Sequence[str] = SPLITS) -> Dict[str, Dataset]:
    """Load PNG+CSV datasets; every malformed row is reported, itemized."""
    root = Path(root)
    spec = None
    meta_path = root / "dataset.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if "synth_spec" in meta:
            spec = SynthSpec.from_dict(meta["synth_spec"])
    out = {}
    for split in splits:
        csv_path = root / f"{split}.csv"
        if not csv_path.exists():
            continue
        errors: List[str] = []
        rows: List[Tuple[str, np.ndarray]] = []
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                warnings.warn(f"{csv_path} is empty; producing an empty split")
                out[split] = Dataset(np.zeros((0, 3, image_size or 64, image_size or 64),
                                              np.float32),
                                     np.zeros((0, 0), np.uint8), [], ())
                continue
            if not header or header[0] != "filename" or len(header) < 2:
                raise ManifestError(f"{csv_path}: header must be filename,<attrs...>")
            attr_names = tuple(header[1:])
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    errors.append(f"{csv_path}:{lineno}: expected {len(header)} columns")
                    continue
                try:
                    vals = np.array([float(v) for v in row[1:]])
                except ValueError:
                    errors.append(f"{csv_path}:{lineno}: non-numeric label")
                    continue
                if np.all(np.isin(vals, (-1, 1))):
                    vals = (vals + 1) / 2  # {-1,1} convention
                if not np.all(np.isin(vals, (0, 1))):
                    errors.append(f"{csv_path}:{lineno}: labels must be binary")
                    continue
                path = root / "images" / row[0]
                if not path.exists():
                    errors.append(f"{csv_path}:{lineno}: missing file {row[0]}")
                    continue
                rows.append((row[0], vals.astype(np.uint8)))
        if errors:
            raise ManifestError(
                f"{len(errors)} invalid rows in {csv_path}", items=errors)
        if not rows:
            warnings.warn(f"{csv_path} lists no samples; producing an empty split")
            out[split] = Dataset(np.zeros((0, 3, image_size or 64, image_size or 64),
                                          np.float32),
                                 np.zeros((0, len(attr_names)), np.uint8), [],
                                 attr_names)
            continue
        images = []
        labels = np.zeros((len(rows), len(attr_names)), np.uint8)
        ids = []
        for i, (fname, vals) in enumerate(rows):
            images.append(_load_image(root / "images" / fname, image_size))
            labels[i] = vals
            ids.append(Path(fname).stem)
        out[split] = Dataset(np.stack(images), labels, ids, attr_names,
                             spec=spec, split=split)
    if not out:
        raise ManifestError(f"no split manifests found under {root}")
    return out
