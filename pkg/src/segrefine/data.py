"""Synthetic abdominal phantoms, weak-label corruption, corpus splits and I/O.

Label classes: 0 background, 1 muscle analog (two lateral lobes),
2 subcutaneous-fat analog (outer annulus), 3 visceral-fat analog (inner
blobs). Weak labels are produced from the ground truth by dropping a muscle
lobe, relabelling an angular sector of the annulus as visceral fat, and
jittering boundaries.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

NUM_CLASSES = 4
CLASS_NAMES = ("background", "muscle", "subcutaneous", "visceral")
CLASS_MEANS = (0.3, 0.5, 0.7, 0.6)
CLASS_SIGMA = 0.08
MIN_CLASS_FRACTION = 0.01

SPLITS = ("strong-train", "weak-train", "validation")
PROVENANCES = ("ground-truth", "strong", "weak-initial", "weak-refined")

# 4-connectivity for components and morphology
CROSS = ndimage.generate_binary_structure(2, 1)

SEGD_MAGIC = b"SEGD"
SEGD_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
MANIFEST_SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Malformed on-disk data; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


def sample_seed(base_seed: int, key) -> np.random.SeedSequence:
    """Per-sample seed stream derived from the base seed and a sample key."""
    if isinstance(key, str):
        key = int.from_bytes(key.encode(), "little")
    return np.random.SeedSequence([int(base_seed), int(key)])


# ---------------------------------------------------------------------------
# phantom generation


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _draw_anatomy(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    s = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-0.05, 0.05) * h
    cx = w / 2 + rng.uniform(-0.05, 0.05) * w
    ay = h * rng.uniform(0.30, 0.37)
    ax = w * rng.uniform(0.38, 0.44)
    thick = s * rng.uniform(0.07, 0.10)
    iy, ix = ay - thick, ax - thick

    label = np.zeros((h, w), np.uint8)
    label[_ellipse(yy, xx, cy, cx, ay, ax)] = 2
    inner = _ellipse(yy, xx, cy, cx, iy, ix)
    label[inner] = 0

    # visceral blobs, kept clear of the lateral strips where muscle goes
    n_blobs = int(rng.integers(2, 5))
    for _ in range(n_blobs):
        for _try in range(20):
            r = s * rng.uniform(0.07, 0.11)
            by = cy + rng.uniform(-0.5, 0.5) * iy
            bx = cx + rng.uniform(-0.45, 0.45) * ix
            blob = _ellipse(yy, xx, by, bx, r * rng.uniform(0.8, 1.2), r)
            if not np.any(blob & ~inner):
                label[blob] = 3
                break

    # two lateral muscle lobes hugging the inner wall
    dy = rng.uniform(-0.15, 0.25) * iy
    for side in (-1, 1):
        rx = s * rng.uniform(0.055, 0.08)
        ry = s * rng.uniform(0.11, 0.16)
        mx = cx + side * (ix - rx - rng.uniform(0.5, 2.0))
        my = cy + dy + rng.uniform(-0.05, 0.05) * iy
        lobe = _ellipse(yy, xx, my, mx, ry, rx) & inner
        label[lobe] = 1
    return label


def _anatomy_ok(label: np.ndarray) -> bool:
    counts = np.bincount(label.ravel(), minlength=NUM_CLASSES)
    if np.any(counts < MIN_CLASS_FRACTION * label.size):
        return False
    _, n_muscle = ndimage.label(label == 1, structure=CROSS)
    return n_muscle == 2


def generate_phantom(seed, h: int = 64, w: int = 64, max_tries: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image (1, H, W) float32 in [0, 1], label (H, W) uint8)``.

    The anatomy is resampled until every class covers at least 1% of the
    pixels and the muscle class has exactly two components.
    """
    if h < 32 or w < 32:
        raise ValueError(f"phantom needs at least 32x32 pixels, got {h}x{w}")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        label = _draw_anatomy(rng, h, w)
        if _anatomy_ok(label):
            break
    else:
        raise RuntimeError(f"could not draw a valid phantom in {max_tries} tries")
    means = np.asarray(CLASS_MEANS)[label]
    image = means + CLASS_SIGMA * rng.standard_normal((h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image[None], label


# ---------------------------------------------------------------------------
# weak-label corruption


@dataclass
class CorruptionConfig:
    p_drop: float = 0.5
    swap_fraction: float = 0.25
    boundary_noise_px: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("p_drop", "swap_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.boundary_noise_px < 0:
            raise ValueError(f"boundary_noise_px must be >= 0, got {self.boundary_noise_px}")


def _drop_component(label, cls, rng):
    comps, n = ndimage.label(label == cls, structure=CROSS)
    if n == 0:
        return
    pick = int(rng.integers(1, n + 1))
    label[comps == pick] = 0


def _swap_sector(label, src, dst, fraction, rng):
    ys, xs = np.nonzero(label == src)
    k = int(round(fraction * ys.size))
    if k == 0:
        return
    cy, cx = ys.mean(), xs.mean()
    start = rng.uniform(0, 2 * np.pi)
    ang = np.mod(np.arctan2(ys - cy, xs - cx) - start, 2 * np.pi)
    order = np.argsort(ang, kind="stable")[:k]
    label[ys[order], xs[order]] = dst


def _jitter_boundaries(label, radius, rng):
    for cls in range(1, NUM_CLASSES):
        r = int(rng.integers(0, radius + 1))
        op = rng.integers(0, 2)
        if r == 0:
            continue
        mask = label == cls
        if not mask.any():
            continue
        if op == 0:
            grown = ndimage.binary_dilation(mask, structure=CROSS, iterations=r)
            label[grown & ~mask] = cls
        else:
            shrunk = ndimage.binary_erosion(mask, structure=CROSS, iterations=r, border_value=1)
            label[mask & ~shrunk] = 0


def corrupt_label(gt: np.ndarray, cfg: CorruptionConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Simulate an automatically generated weak label from ``gt``.

    Missing muscle: with probability ``p_drop`` one 4-connected muscle
    component becomes background. Fat confusion: a contiguous angular
    sector holding ``swap_fraction`` of the subcutaneous pixels is relabelled
    visceral. Boundary jitter: each foreground class is dilated or eroded by
    up to ``boundary_noise_px`` pixels.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    weak = np.array(gt, dtype=np.uint8, copy=True)
    # independent child streams: one operator's draws never shift another's
    drop = rng.random() < cfg.p_drop
    drop_rng, swap_rng, jitter_rng = rng.spawn(3)
    if drop:
        _drop_component(weak, 1, drop_rng)
    if cfg.swap_fraction > 0:
        _swap_sector(weak, 2, 3, cfg.swap_fraction, swap_rng)
    if cfg.boundary_noise_px > 0:
        _jitter_boundaries(weak, cfg.boundary_noise_px, jitter_rng)
    return weak


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: np.ndarray
    provenance: str
    split: str
    ground_truth: np.ndarray | None = None
    initial_label: np.ndarray | None = None

    @property
    def hidden_truth(self) -> np.ndarray:
        return self.ground_truth if self.ground_truth is not None else self.label


@dataclass
class Corpus:
    samples: list[Sample]
    num_classes: int = NUM_CLASSES
    height: int = 64
    width: int = 64
    meta: dict = field(default_factory=dict)

    def pool(self, split: str) -> list[Sample]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.samples if s.split == split]

    @property
    def strong(self) -> list[Sample]:
        return self.pool("strong-train")

    @property
    def weak(self) -> list[Sample]:
        return self.pool("weak-train")

    @property
    def validation(self) -> list[Sample]:
        return self.pool("validation")

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def copy(self) -> "Corpus":
        samples = [
            Sample(
                s.id,
                s.image,
                s.label.copy(),
                s.provenance,
                s.split,
                None if s.ground_truth is None else s.ground_truth.copy(),
                None if s.initial_label is None else s.initial_label.copy(),
            )
            for s in self.samples
        ]
        return Corpus(samples, self.num_classes, self.height, self.width, dict(self.meta))


def generate_samples(n: int, h: int = 64, w: int = 64, seed: int = 0) -> list[tuple[str, np.ndarray, np.ndarray]]:
    out = []
    for i in range(n):
        sid = f"s{i:04d}"
        image, label = generate_phantom(sample_seed(seed, i), h, w)
        out.append((sid, image, label))
    return out


def split_corpus(
    samples,
    n_strong: int,
    n_validation: int,
    seed: int,
    corruption: CorruptionConfig | None = None,
    num_classes: int = NUM_CLASSES,
) -> Corpus:
    """Assign ``(id, image, ground_truth)`` triples to the three pools.

    Strong and validation samples keep their ground truth as label; every
    other sample gets a corrupted label and keeps the truth hidden.
    """
    samples = list(samples)
    if n_strong < 0 or n_validation < 0 or n_strong + n_validation > len(samples):
        raise ValueError(
            f"cannot draw {n_strong} strong + {n_validation} validation samples from {len(samples)}"
        )
    corruption = corruption or CorruptionConfig()
    order = np.random.default_rng(seed).permutation(len(samples))
    split_of = {}
    for rank, idx in enumerate(order):
        if rank < n_strong:
            split_of[idx] = "strong-train"
        elif rank < n_strong + n_validation:
            split_of[idx] = "validation"
        else:
            split_of[idx] = "weak-train"

    out = []
    for idx, (sid, image, gt) in enumerate(samples):
        split = split_of[idx]
        gt = np.asarray(gt, dtype=np.uint8)
        if split == "weak-train":
            rng = np.random.default_rng(sample_seed(corruption.seed, sid))
            weak = corrupt_label(gt, corruption, rng)
            out.append(Sample(sid, image, weak, "weak-initial", split, gt.copy(), weak.copy()))
        else:
            prov = "strong" if split == "strong-train" else "ground-truth"
            out.append(Sample(sid, image, gt.copy(), prov, split))
    h, w = out[0].label.shape if out else (0, 0)
    return Corpus(out, num_classes, h, w, {"split_seed": int(seed), "corruption": asdict(corruption)})


def make_corpus(
    n_samples: int = 260,
    n_strong: int = 20,
    n_validation: int = 40,
    size: int = 64,
    seed: int = 0,
    corruption: CorruptionConfig | None = None,
) -> Corpus:
    corpus = split_corpus(generate_samples(n_samples, size, size, seed), n_strong, n_validation, seed, corruption)
    corpus.meta["generator_seed"] = int(seed)
    return corpus


# ---------------------------------------------------------------------------
# SEGD arrays


def encode_segd(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 1
    elif arr.dtype == np.uint8:
        code = 2
    else:
        raise TypeError(f"SEGD stores float32 images or uint8 labels, got {arr.dtype}")
    header = SEGD_MAGIC + struct.pack("<HBB", SEGD_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_segd(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError("truncated SEGD header", len(buf), path)
    if buf[:4] != SEGD_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {SEGD_MAGIC!r}", 0, path)
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != SEGD_VERSION:
        raise FormatError(f"unsupported SEGD version {version}", 4, path)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", 6, path)
    end_dims = 8 + 4 * ndim
    if len(buf) < end_dims:
        raise FormatError("truncated SEGD dims", len(buf), path)
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < end_dims + nbytes:
        raise FormatError(f"truncated SEGD payload: need {nbytes} bytes, have {len(buf) - end_dims}", len(buf), path)
    if len(buf) > end_dims + nbytes:
        raise FormatError("trailing bytes after SEGD payload", end_dims + nbytes, path)
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=end_dims).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_segd(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_segd(arr))


def read_segd(path) -> np.ndarray:
    return decode_segd(Path(path).read_bytes(), path)


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_dataset(corpus: Corpus, directory) -> None:
    """Write a manifest plus one SEGD file per array.

    Weak samples store their initial weak label as ``label`` and the truth
    under ``ground_truth``; strong and validation samples store the truth
    as ``label``.
    """
    d = Path(directory)
    (d / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for s in corpus.samples:
        rec = {
            "id": s.id,
            "split": s.split,
            "provenance": s.provenance,
            "image": f"samples/{s.id}.image.segd",
            "label": f"samples/{s.id}.label.segd",
            "ground_truth": None,
        }
        write_segd(d / rec["image"], np.asarray(s.image, np.float32))
        write_segd(d / rec["label"], np.asarray(s.label, np.uint8))
        if s.ground_truth is not None:
            rec["ground_truth"] = f"samples/{s.id}.gt.segd"
            write_segd(d / rec["ground_truth"], np.asarray(s.ground_truth, np.uint8))
        records.append(rec)
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "num_classes": corpus.num_classes,
        "height": corpus.height,
        "width": corpus.width,
        "meta": corpus.meta,
        "samples": records,
    }
    _dump_json(d / "manifest.json", manifest)


def _load_manifest(d: Path) -> dict:
    path = d / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError("missing manifest.json", path=d) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", exc.pos, path) from None
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise FormatError(f"unsupported manifest schema_version {manifest.get('schema_version')!r}", path=path)
    return manifest


def read_dataset(directory) -> Corpus:
    d = Path(directory)
    manifest = _load_manifest(d)
    c, h, w = manifest["num_classes"], manifest["height"], manifest["width"]
    samples = []
    for rec in manifest["samples"]:
        if rec["split"] not in SPLITS or rec["provenance"] not in PROVENANCES:
            raise FormatError(f"sample {rec['id']}: bad split/provenance {rec['split']!r}/{rec['provenance']!r}")
        image = read_segd(d / rec["image"])
        label = read_segd(d / rec["label"])
        gt = read_segd(d / rec["ground_truth"]) if rec.get("ground_truth") else None
        if image.shape != (1, h, w) or label.shape != (h, w):
            raise FormatError(f"sample {rec['id']}: shapes {image.shape}/{label.shape} do not match {h}x{w}")
        if label.max(initial=0) >= c:
            raise FormatError(f"sample {rec['id']}: label value >= num_classes {c}")
        initial = label.copy() if rec["split"] == "weak-train" else None
        samples.append(Sample(rec["id"], image, label, rec["provenance"], rec["split"], gt, initial))
    return Corpus(samples, c, h, w, manifest.get("meta", {}))


def verify_dataset(directory) -> dict:
    """Check that the manifest and the payload files agree; returns counts."""
    d = Path(directory)
    manifest = _load_manifest(d)
    referenced = set()
    for rec in manifest["samples"]:
        for key in ("image", "label", "ground_truth"):
            if rec.get(key):
                referenced.add(rec[key])
    on_disk = {os.path.relpath(p, d).replace(os.sep, "/") for p in (d / "samples").glob("*.segd")}
    missing = sorted(referenced - on_disk)
    extra = sorted(on_disk - referenced)
    if missing or extra:
        raise FormatError(f"manifest/payload mismatch: missing={missing[:5]} unreferenced={extra[:5]}", path=d)
    n_images = sum(1 for p in on_disk if p.endswith(".image.segd"))
    return {"samples": len(manifest["samples"]), "image_files": n_images, "payload_files": len(on_disk)}


# ---------------------------------------------------------------------------
# label overlays (refined labels written next to a dataset)


def write_overlay(directory, labels: dict[str, np.ndarray], provenance: str, num_classes: int, meta=None) -> None:
    d = Path(directory)
    (d / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    for sid in sorted(labels):
        rel = f"labels/{sid}.label.segd"
        write_segd(d / rel, np.asarray(labels[sid], np.uint8))
        records.append({"id": sid, "label": rel, "provenance": provenance})
    _dump_json(
        d / "overlay.json",
        {"schema_version": MANIFEST_SCHEMA_VERSION, "num_classes": num_classes, "meta": meta or {}, "labels": records},
    )


def read_overlay(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    try:
        doc = json.loads((d / "overlay.json").read_text())
    except FileNotFoundError:
        raise FormatError("missing overlay.json", path=d) from None
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise FormatError(f"unsupported overlay schema_version {doc.get('schema_version')!r}", path=d)
    labels = {rec["id"]: read_segd(d / rec["label"]) for rec in doc["labels"]}
    return labels, doc
