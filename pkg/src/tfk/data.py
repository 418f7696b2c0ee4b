"""Manifest loading, meta encoding, paired augmentation and the synthetic generator.

Images are held as ``uint8`` arrays ``[N, H, W, 3]`` and converted to
floats in ``[0, 1]`` when a batch is assembled.
"""

from __future__ import annotations

import csv
import itertools
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core.rng import Rng
from .schema import DERM7PT, DERM7PT_META, LabelSchema, MetaSchema, SchemaError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
OFFICIAL_SPLIT = {"train": 413, "val": 203, "test": 395}
MANIFEST_BASE = ("case_id", "derm_path", "cli_path", "split")


class DataError(ValueError):
    """Raised for unusable datasets: empty splits, unreadable manifests."""


class SpecError(ValueError):
    """Raised for an inconsistent synthetic specification."""


# -- cases and datasets -------------------------------------------------------

@dataclass
class Case:
    case_id: str
    derm_image: np.ndarray  # [H, W, 3] floats in [0, 1]
    cli_image: np.ndarray
    meta: np.ndarray  # [meta_len] binary
    labels: np.ndarray  # [num_labels] class indices
    split: str


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def to_float(images: np.ndarray, dtype=np.float64) -> np.ndarray:
    return images.astype(dtype) / 255.0


@dataclass
class Dataset:
    case_ids: list[str]
    derm: np.ndarray  # uint8 [N, H, W, 3]
    cli: np.ndarray
    meta: np.ndarray  # [N, meta_len]
    labels: np.ndarray  # int [N, num_labels]
    split: np.ndarray  # str [N]
    schema: LabelSchema = DERM7PT
    meta_schema: MetaSchema = DERM7PT_META
    # latent factors of synthetic cases, kept for diagnostics
    latents: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.case_ids)

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.derm.shape[1:3])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        if idx.size == 0:
            raise DataError(f"split {split!r} is empty")
        return self.take(idx)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            [self.case_ids[i] for i in idx], self.derm[idx], self.cli[idx], self.meta[idx],
            self.labels[idx], self.split[idx], self.schema, self.meta_schema,
            None if self.latents is None else self.latents[idx],
        )

    def case(self, i: int) -> Case:
        return Case(self.case_ids[i], to_float(self.derm[i]), to_float(self.cli[i]),
                    self.meta[i].copy(), self.labels[i].copy(), str(self.split[i]))

    def find(self, case_id: str) -> int:
        try:
            return self.case_ids.index(case_id)
        except ValueError:
            raise DataError(f"case {case_id!r} not in dataset") from None

    def split_counts(self) -> dict[str, int]:
        return {s: int((self.split == s).sum()) for s in SPLITS}

    @classmethod
    def from_cases(cls, cases: list[Case], schema: LabelSchema = DERM7PT,
                   meta_schema: MetaSchema = DERM7PT_META) -> "Dataset":
        if not cases:
            raise DataError("no cases")
        return cls(
            [c.case_id for c in cases],
            to_uint8(np.stack([c.derm_image for c in cases])),
            to_uint8(np.stack([c.cli_image for c in cases])),
            np.stack([c.meta for c in cases]).astype(np.float64),
            np.stack([c.labels for c in cases]).astype(np.int64),
            np.array([c.split for c in cases]),
            schema, meta_schema,
        )


# -- meta encoding ------------------------------------------------------------

def encode_meta(fields: dict[str, str], schema: MetaSchema = DERM7PT_META) -> np.ndarray:
    """Concatenated one-hot segments, one per schema field."""
    out = np.zeros(schema.length)
    for name, vocab, off in zip(schema.fields, schema.vocab, schema.offsets()):
        if name not in fields:
            raise SchemaError(f"meta field {name!r} missing")
        value = str(fields[name]).strip().lower()
        lowered = [v.lower() for v in vocab]
        if value not in lowered:
            raise SchemaError(f"meta field {name}: {fields[name]!r} not in {list(vocab)}")
        out[off + lowered.index(value)] = 1.0
    return out


def decode_meta(onehot, schema: MetaSchema = DERM7PT_META) -> dict[str, str]:
    """Segment-wise argmax inverse of :func:`encode_meta`."""
    onehot = np.asarray(onehot)
    return {
        name: vocab[int(np.argmax(onehot[off:off + len(vocab)]))]
        for name, vocab, off in zip(schema.fields, schema.vocab, schema.offsets())
    }


def check_meta(meta: np.ndarray) -> None:
    """Warn (not fail) on non-binary meta vectors; soft inputs are allowed."""
    if not np.isin(meta, (0.0, 1.0)).all():
        log.warning("meta vector has non-binary entries")


# -- manifest -----------------------------------------------------------------

def _read_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_manifest(path, image_size: tuple[int, int] = (64, 64), schema: LabelSchema = DERM7PT,
                  meta_schema: MetaSchema = DERM7PT_META) -> list[Case]:
    """Read a manifest CSV; image paths are relative to the manifest's folder.

    Columns: ``case_id, derm_path, cli_path, split``, one column per label
    (class abbreviations or indices) and one per meta field.
    """
    path = Path(path)
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        need = list(MANIFEST_BASE) + list(schema.names) + list(meta_schema.fields)
        missing = [c for c in need if c not in header]
        if missing:
            raise DataError(f"manifest {path} lacks columns {missing}")
        cases = []
        for row_no, row in enumerate(reader, start=2):
            split = row["split"].strip().lower()
            if split not in SPLITS:
                raise DataError(f"{path}:{row_no}: split {row['split']!r} not in {SPLITS}")
            labels = []
            for name in schema.names:
                try:
                    labels.append(schema.index(name, row[name]))
                except SchemaError as exc:
                    raise SchemaError(f"{path}:{row_no}: cell {name}={row[name]!r}: {exc}") from None
            meta = encode_meta({f: row[f] for f in meta_schema.fields}, meta_schema)
            cases.append(Case(
                row["case_id"], _read_image(root / row["derm_path"], image_size),
                _read_image(root / row["cli_path"], image_size), meta, np.array(labels), split,
            ))
    counts = {s: sum(c.split == s for c in cases) for s in SPLITS}
    log.info("loaded %d cases from %s: %s", len(cases), path, counts)
    return cases


def is_official_split(counts: dict[str, int]) -> bool:
    """True when split counts equal the official Derm7pt 413/203/395 division."""
    return {s: counts.get(s, 0) for s in SPLITS} == OFFICIAL_SPLIT


def write_manifest(dataset: Dataset, out_dir) -> Path:
    """Write PNG images and a manifest CSV that :func:`load_manifest` reads back."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    schema, meta_schema = dataset.schema, dataset.meta_schema
    path = out / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(MANIFEST_BASE) + list(schema.names) + list(meta_schema.fields))
        for i, cid in enumerate(dataset.case_ids):
            dp, cp = f"images/{cid}_derm.png", f"images/{cid}_cli.png"
            Image.fromarray(dataset.derm[i]).save(out / dp)
            Image.fromarray(dataset.cli[i]).save(out / cp)
            labels = [schema.classes[j][k] for j, k in enumerate(dataset.labels[i])]
            meta = decode_meta(dataset.meta[i], meta_schema)
            w.writerow([cid, dp, cp, dataset.split[i]] + labels + [meta[f] for f in meta_schema.fields])
    return path


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class GeometricDraw:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0
    shift: tuple[int, int] = (0, 0)

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.rot90 % 4 or any(self.shift))


def draw_transform(rng: Rng, max_shift: int = 4) -> GeometricDraw:
    flips = rng.integers(0, 2, size=2)
    rot = int(rng.integers(0, 4))
    shift = rng.integers(-max_shift, max_shift + 1, size=2) if max_shift > 0 else (0, 0)
    return GeometricDraw(bool(flips[0]), bool(flips[1]), rot, (int(shift[0]), int(shift[1])))


def apply_transform(image: np.ndarray, draw: GeometricDraw) -> np.ndarray:
    """Flip, rotate (square images) and cyclically shift an ``[H, W, C]`` image."""
    out = image
    if draw.hflip:
        out = out[:, ::-1]
    if draw.vflip:
        out = out[::-1]
    if draw.rot90 % 4:
        if out.shape[0] != out.shape[1]:
            raise ValueError("rot90 augmentation needs square images")
        out = np.rot90(out, draw.rot90)
    if any(draw.shift):
        out = np.roll(out, draw.shift, axis=(0, 1))
    return np.ascontiguousarray(out)


def augment(case: Case, rng: Rng, max_shift: int = 4) -> Case:
    """Apply one geometric draw to both images of a training case."""
    if case.split != "train":
        raise DataError(f"augmentation is for the train split, case {case.case_id} is {case.split!r}")
    draw = draw_transform(rng, max_shift)
    return Case(case.case_id, apply_transform(case.derm_image, draw), apply_transform(case.cli_image, draw),
                case.meta.copy(), case.labels.copy(), case.split)


def augment_pair(derm: np.ndarray, cli: np.ndarray, rng: Rng, max_shift: int = 4):
    """Batched form of :func:`augment`: each case gets its own draw, shared by both images."""
    d_out, c_out = np.empty_like(derm), np.empty_like(cli)
    for i in range(derm.shape[0]):
        draw = draw_transform(rng.split(str(i)), max_shift)
        d_out[i] = apply_transform(derm[i], draw)
        c_out[i] = apply_transform(cli[i], draw)
    return d_out, c_out


# -- synthetic data -----------------------------------------------------------

# Latent cells in (derm, cli, meta) bit order 000, 001, ..., 111.
DEFAULT_TABLE = (0, 0, 2, 3, 1, 1, 4, 2)
SUBSETS = {
    "none": (), "derm": (0,), "cli": (1,), "meta": (2,),
    "derm+cli": (0, 1), "derm+meta": (0, 2), "cli+meta": (1, 2), "fused": (0, 1, 2),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Paired-modality cases driven by three binary latent factors.

    ``derm`` sets a fine checkerboard texture inside the dermoscopic lesion,
    ``cli`` sets the lesion extent in the clinical image (large vs small),
    ``meta`` sets the sex field. DIAG is ``table[4*derm + 2*cli + meta]``,
    replaced by a uniformly random class with probability ``noise``. The
    seven checklist labels are fixed functions of the latents. Latent cells
    and splits are assigned by exact quota rather than independent draws.
    """

    num_cases: int = 2000
    image_size: tuple[int, int] = (64, 64)
    priors: tuple[float, float, float] = (0.25, 0.25, 0.4)
    table: tuple[int, ...] = DEFAULT_TABLE
    noise: float = 0.0
    split_fractions: tuple[float, float, float] = (0.5, 0.15, 0.35)
    texture_period: int = 2
    texture_contrast: float = 0.6
    seed: int = 0
    schema: LabelSchema = field(default=DERM7PT, repr=False)
    meta_schema: MetaSchema = field(default=DERM7PT_META, repr=False)

    def validate(self) -> None:
        k = self.schema.class_counts[0]
        if len(self.table) != 8 or any(not (0 <= int(t) < k) for t in self.table):
            raise SpecError(f"dependency table needs 8 DIAG classes in [0, {k}), got {self.table}")
        if not all(0.0 <= p <= 1.0 for p in self.priors) or len(self.priors) != 3:
            raise SpecError(f"priors must be three probabilities, got {self.priors}")
        if not 0.0 <= self.noise <= 1.0:
            raise SpecError(f"noise must lie in [0, 1], got {self.noise}")
        if self.num_cases < 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise SpecError("need at least 3 cases and split fractions summing to 1")
        h, w = self.image_size
        if min(h, w) < 16:
            raise SpecError(f"image size {self.image_size} too small for the lesion renderer")
        if "sex" not in self.meta_schema.fields:
            raise SpecError("synthetic meta signal needs a 'sex' field")

    def to_dict(self) -> dict:
        return {
            "num_cases": self.num_cases, "image_size": list(self.image_size), "priors": list(self.priors),
            "table": list(self.table), "noise": self.noise, "split_fractions": list(self.split_fractions),
            "texture_period": self.texture_period, "texture_contrast": self.texture_contrast,
            "seed": self.seed,
        }


def apportion(weights, n: int) -> np.ndarray:
    """Integer counts summing to ``n`` proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=np.float64)
    exact = w / w.sum() * n
    counts = np.floor(exact).astype(np.int64)
    rest = exact - counts
    # stable sort: equal remainders go to the earlier entry
    for i in np.argsort(-rest, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def cell_probabilities(spec: SyntheticSpec) -> np.ndarray:
    """``P(derm, cli, meta)`` as a ``[2, 2, 2]`` array."""
    p = np.array(spec.priors)
    bern = np.stack([1 - p, p], axis=1)  # [3, 2]
    return bern[0][:, None, None] * bern[1][None, :, None] * bern[2][None, None, :]


def diag_joint(spec: SyntheticSpec) -> np.ndarray:
    """``P(derm, cli, meta, DIAG)`` as a ``[2, 2, 2, K]`` array."""
    k = spec.schema.class_counts[0]
    cells = cell_probabilities(spec)
    joint = np.zeros((2, 2, 2, k))
    for d, c, m in itertools.product((0, 1), repeat=3):
        cond = np.full(k, spec.noise / k)
        cond[spec.table[4 * d + 2 * c + m]] += 1.0 - spec.noise
        joint[d, c, m] = cells[d, c, m] * cond
    return joint


def bayes_accuracy(spec: SyntheticSpec, observed: tuple[int, ...]) -> float:
    """Optimal DIAG accuracy given only the latents in ``observed``.

    Exhaustive: marginalise hidden latents, take the best class per
    observed cell, sum the winning probabilities.
    """
    joint = diag_joint(spec)
    hidden = tuple(a for a in range(3) if a not in observed)
    marg = joint.sum(axis=hidden) if hidden else joint
    return float(marg.reshape(-1, marg.shape[-1]).max(axis=-1).sum())


def bayes_report(spec: SyntheticSpec) -> dict[str, float]:
    spec.validate()
    return {name: bayes_accuracy(spec, obs) for name, obs in SUBSETS.items()}


def bayes_predict(spec: SyntheticSpec, latents: np.ndarray, observed: tuple[int, ...]) -> np.ndarray:
    """Bayes-rule DIAG decision for each row of ``latents`` ``[N, 3]``."""
    joint = diag_joint(spec)
    hidden = tuple(a for a in range(3) if a not in observed)
    marg = joint.sum(axis=hidden) if hidden else joint
    best = marg.argmax(axis=-1)
    return best[tuple(latents[:, a] for a in observed)] if observed else np.full(len(latents), int(best))


def checklist_labels(d: np.ndarray, c: np.ndarray, m: np.ndarray) -> np.ndarray:
    """PN, BWV, VS, PIG, STR, DaG, RS as fixed functions of the latent bits."""
    return np.stack([d + c, c, m, d, c + m, d + m, d ^ c], axis=1)


def _disk(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= r * r


def _skin(rng: Rng, h: int, w: int, jitter: float = 0.08) -> np.ndarray:
    base = np.array([0.85, 0.65, 0.55]) + rng.uniform(-jitter, jitter, size=3)
    return base + rng.normal(0.0, 0.02, size=(h, w, 3))


def render_derm(rng: Rng, h: int, w: int, textured: int, period: int, contrast: float = 0.6) -> np.ndarray:
    img = _skin(rng, h, w)
    cy, cx = h / 2 + rng.uniform(-h / 16, h / 16), w / 2 + rng.uniform(-w / 16, w / 16)
    r = rng.uniform(0.25, 0.38) * min(h, w)
    lesion = _disk(h, w, cy, cx, r)
    color = np.array([0.45, 0.30, 0.22]) + rng.uniform(-0.06, 0.06, size=3)
    if textured:
        yy, xx = np.mgrid[0:h, 0:w]
        checker = ((yy // period + xx // period) % 2)[..., None]
        fill = color + (checker - 0.5) * contrast
    else:
        fill = np.broadcast_to(color, (h, w, 3))
    img = np.where(lesion[..., None], fill + rng.normal(0.0, 0.02, size=(h, w, 3)), img)
    return np.clip(img, 0.0, 1.0)


def render_cli(rng: Rng, h: int, w: int, large: int) -> np.ndarray:
    # dark lesion on a steady skin tone: extent dominates the image's mean intensity
    img = _skin(rng, h, w, jitter=0.03)
    cy, cx = h / 2 + rng.uniform(-h / 10, h / 10), w / 2 + rng.uniform(-w / 10, w / 10)
    frac = rng.uniform(0.30, 0.40) if large else rng.uniform(0.10, 0.18)
    lesion = _disk(h, w, cy, cx, frac * min(h, w))
    color = np.array([0.25, 0.15, 0.12]) + rng.uniform(-0.04, 0.04, size=3)
    img = np.where(lesion[..., None], color + rng.normal(0.0, 0.02, size=(h, w, 3)), img)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec | None = None) -> tuple[Dataset, dict[str, float]]:
    """Draw a synthetic dataset and its exact Bayes report."""
    spec = spec or SyntheticSpec()
    spec.validate()
    rng = Rng(spec.seed).split("synthetic")
    n, (h, w) = spec.num_cases, spec.image_size
    # exact quotas per (latent cell, split), so every split's empirical
    # Bayes accuracy matches the closed-form report up to rounding
    joint = cell_probabilities(spec).reshape(-1)[:, None] * np.array(spec.split_fractions)[None, :]
    quota = apportion(joint.reshape(-1), n)
    cell_of, split_of = np.divmod(np.repeat(np.arange(joint.size), quota), len(SPLITS))
    order = rng.split("order").permutation(n)
    cell_of, split_of = cell_of[order], split_of[order]
    latents = np.stack([(cell_of >> 2) & 1, (cell_of >> 1) & 1, cell_of & 1], axis=1).astype(np.int64)
    d, c, m = latents.T
    k = spec.schema.class_counts[0]
    diag = np.array(spec.table)[4 * d + 2 * c + m]
    noise_rng = rng.split("noise")
    flip = noise_rng.random(n) < spec.noise
    diag = np.where(flip, noise_rng.integers(0, k, size=n), diag)
    labels = np.concatenate([diag[:, None], checklist_labels(d, c, m)], axis=1)
    spec.schema.validate(labels)

    ms = spec.meta_schema
    meta = np.zeros((n, ms.length))
    meta_rng = rng.split("meta")
    for name, vocab, off in zip(ms.fields, ms.vocab, ms.offsets()):
        if name == "sex":
            choice = m  # vocab ("female", "male"): male carries the signal bit
        else:
            choice = meta_rng.split(name).integers(0, len(vocab), size=n)
        meta[np.arange(n), off + choice] = 1.0

    derm = np.empty((n, h, w, 3), dtype=np.uint8)
    cli = np.empty((n, h, w, 3), dtype=np.uint8)
    img_rng = rng.split("images")
    for i in range(n):
        r = img_rng.split(str(i))
        derm[i] = to_uint8(render_derm(r.split("derm"), h, w, d[i], spec.texture_period,
                                              spec.texture_contrast))
        cli[i] = to_uint8(render_cli(r.split("cli"), h, w, c[i]))

    split = np.array(SPLITS)[split_of]
    ds = Dataset([f"syn{i:05d}" for i in range(n)], derm, cli, meta, labels.astype(np.int64),
                 split, spec.schema, ms, latents)
    return ds, bayes_report(spec)


def dataset_from_source(source: str | os.PathLike | SyntheticSpec, image_size=(64, 64)) -> Dataset:
    if isinstance(source, SyntheticSpec):
        return generate_synthetic(source)[0]
    return Dataset.from_cases(load_manifest(source, image_size))
