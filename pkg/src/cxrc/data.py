"""Synthetic desk-scale chest dataset: procedural grayscale images with
elliptical lung fields, exact ground-truth lung masks, programmatic
findings, templated reports, and on-disk PGM + manifest formats.

Rendering geometry is deliberate: lung-related findings (volume, effusion,
pneumothorax, calcification) only touch pixels inside the lung mask, while
heart and bone findings only touch pixels outside it. Masking an image
therefore removes exactly the extra-lung finding signal.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .validation import InputError

IMAGE_SIZE = 64

LUNG_VOLUMES = ("low", "normal", "hyperexpanded")
SIDES = ("left", "right")
HEART_SIZES = ("normal", "enlarged")

KEYWORDS = ("bone", "calcification", "effusion", "heart", "pneumothorax", "volume")
LUNG_KEYWORDS = ("pneumothorax", "volume", "effusion", "calcification")

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DatasetError(RuntimeError):
    """Missing or corrupt on-disk dataset content."""


@dataclass(frozen=True)
class FindingSet:
    """Programmatic findings for one synthetic study."""

    lung_volume: str = "normal"
    effusion_side: str | None = None
    pneumothorax_side: str | None = None
    calcification_count: int = 0
    heart_size: str = "normal"
    bone_abnormality: bool = False

    def __post_init__(self):
        if self.lung_volume not in LUNG_VOLUMES:
            raise InputError(f"lung_volume must be one of {LUNG_VOLUMES}")
        for name, side in (("effusion_side", self.effusion_side),
                           ("pneumothorax_side", self.pneumothorax_side)):
            if side is not None and side not in SIDES:
                raise InputError(f"{name} must be None or one of {SIDES}")
        if not 0 <= self.calcification_count <= 3:
            raise InputError("calcification_count must be in 0..3")
        if self.heart_size not in HEART_SIZES:
            raise InputError(f"heart_size must be one of {HEART_SIZES}")

    def tags(self) -> tuple[str, ...]:
        out = []
        if self.lung_volume != "normal":
            out.append("volume")
        if self.effusion_side is not None:
            out.append("effusion")
        if self.pneumothorax_side is not None:
            out.append("pneumothorax")
        if self.calcification_count > 0:
            out.append("calcification")
        if self.heart_size == "enlarged":
            out.append("heart")
        if self.bone_abnormality:
            out.append("bone")
        return tuple(sorted(out))


@dataclass(frozen=True)
class RenderParams:
    """Per-sample nuisance parameters, drawn independently of the findings
    so a finding can be toggled while re-rendering everything else
    identically."""

    center_jitter: tuple[float, float, float, float]  # dcy_l, dcx_l, dcy_r, dcx_r
    lung_half_width: float
    lung_brightness: float
    background: np.ndarray        # (H, W) in [0.05, 0.12]
    lung_texture: np.ndarray      # (H, W) in [-0.04, 0.04]
    heart_jitter: float
    calc_points: tuple[tuple[float, float, int], ...]  # (angle, radius frac, size)


def sample_findings(rng: np.random.Generator) -> FindingSet:
    volume = LUNG_VOLUMES[int(rng.choice(3, p=[0.2, 0.6, 0.2]))]
    effusion = SIDES[int(rng.integers(2))] if rng.uniform() < 0.25 else None
    pneumo = SIDES[int(rng.integers(2))] if rng.uniform() < 0.15 else None
    calc = int(rng.integers(1, 4)) if rng.uniform() < 0.3 else 0
    heart = "enlarged" if rng.uniform() < 0.3 else "normal"
    bone = bool(rng.uniform() < 0.2)
    return FindingSet(volume, effusion, pneumo, calc, heart, bone)


def _smooth_field(rng: np.random.Generator, cells: int = 8) -> np.ndarray:
    """Low-frequency [0,1] field: coarse noise bilinearly upsampled.

    Keeping the nuisance texture smooth matters: per-pixel noise would give
    contrastive pretraining a fingerprint-matching shortcut between crops,
    whereas structure-scale variation forces it to encode geometry."""
    coarse = rng.random((cells, cells))
    from .augment import resize_bilinear
    return resize_bilinear(coarse, (IMAGE_SIZE, IMAGE_SIZE))


def sample_render_params(rng: np.random.Generator) -> RenderParams:
    jitter = tuple(float(v) for v in rng.uniform(-1.0, 1.0, size=4))
    half_width = float(rng.uniform(8.5, 10.0))
    brightness = float(rng.uniform(0.62, 0.68))
    background = 0.06 + 0.05 * _smooth_field(rng)
    texture = 0.04 * (2.0 * _smooth_field(rng) - 1.0)
    heart_jitter = float(rng.uniform(-1.0, 1.0))
    calcs = tuple(
        (float(rng.uniform(0.0, 2.0 * np.pi)), float(rng.uniform(0.0, 0.7)),
         int(rng.integers(1, 3)))
        for _ in range(3))
    return RenderParams(jitter, half_width, brightness, background,
                        texture, heart_jitter, calcs)


_VOLUME_HALF_HEIGHT = {"low": 11.0, "normal": 15.0, "hyperexpanded": 19.0}


def _lung_geometry(findings: FindingSet, params: RenderParams):
    """Centers and semi-axes for the (viewer-left, viewer-right) ellipses.

    Anatomical left lung sits on the viewer's right, matching radiographs.
    """
    b = _VOLUME_HALF_HEIGHT[findings.lung_volume]
    a = params.lung_half_width
    dy_l, dx_l, dy_r, dx_r = params.center_jitter
    right_lung = (34.0 + dy_l, 20.0 + dx_l, a, b)   # anatomical right
    left_lung = (34.0 + dy_r, 44.0 + dx_r, a, b)    # anatomical left
    return {"right": right_lung, "left": left_lung}


def _ellipse_field(cy, cx, a, b):
    ys = np.arange(IMAGE_SIZE)[:, None]
    xs = np.arange(IMAGE_SIZE)[None, :]
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2


def render_sample(findings: FindingSet,
                  params: RenderParams) -> tuple[np.ndarray, np.ndarray]:
    """Render (image, lung mask) for the given findings and nuisances.

    Pixel ranges: background < 0.15, unmodified lung field > 0.55, heart
    silhouette ~0.32 (below the 0.4 segmentation threshold), effusion 0.85,
    pneumothorax rim 0.22, calcification dots 0.95, bone streak 0.8.
    """
    img = params.background.copy()
    geo = _lung_geometry(findings, params)
    fields = {side: _ellipse_field(*geo[side]) for side in geo}
    mask = ((fields["left"] <= 1.0) | (fields["right"] <= 1.0))

    # heart: intermediate-gray silhouette strictly outside the lungs
    hw = 5.5 if findings.heart_size == "normal" else 9.5
    heart = _ellipse_field(42.0 + params.heart_jitter, 32.0, hw, 11.0) <= 1.0
    img[heart & ~mask] = 0.32

    # bone streak: short bright line above the lung apices, outside the mask
    if findings.bone_abnormality:
        img[3:5, 20:44] = 0.80

    # lung fields with mild texture
    lung_vals = params.lung_brightness + params.lung_texture
    img[mask] = lung_vals[mask]

    for side in SIDES:
        cy, cx, a, b = geo[side]
        e = fields[side]
        inside = e <= 1.0
        if findings.effusion_side == side:
            ys = np.arange(IMAGE_SIZE)[:, None]
            basal = inside & np.broadcast_to(ys >= cy + 0.45 * b, inside.shape)
            img[basal] = 0.85 + 0.02 * params.lung_texture[basal] / 0.04
        if findings.pneumothorax_side == side:
            rim = inside & (e >= 0.82)
            img[rim] = 0.22

    if findings.calcification_count > 0:
        cy, cx, a, b = geo["right"]
        for angle, rad, size in params.calc_points[:findings.calcification_count]:
            py = int(round(cy + rad * (b - 3.0) * np.sin(angle)))
            px = int(round(cx + rad * (a - 3.0) * np.cos(angle)))
            img[py:py + size, px:px + size] = 0.95

    return np.clip(img, 0.0, 1.0), mask.astype(np.float64)


def generate_sample(rng: np.random.Generator):
    """Draw findings and nuisances, render, and return (image, mask, findings)."""
    findings = sample_findings(rng)
    params = sample_render_params(rng)
    img, mask = render_sample(findings, params)
    return img, mask, findings


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_VOLUME_SENTENCE = {
    "low": "lung volume is low.",
    "normal": "the lungs are clear.",
    "hyperexpanded": "lung volume is hyperexpanded.",
}
_CALC_COUNT = {1: "a single focus of calcification",
               2: "two foci of calcification",
               3: "three foci of calcification"}


def render_report(findings: FindingSet) -> tuple[str, tuple[str, ...]]:
    """Deterministic 2-5 sentence report plus its keyword tags.

    Every abnormal finding contributes its keyword token exactly once and
    normal findings avoid all keyword tokens, so tags are recoverable from
    the text by tokenization.
    """
    sentences = [_VOLUME_SENTENCE[findings.lung_volume]]
    if findings.effusion_side is not None:
        sentences.append(
            f"there is a pleural effusion on the {findings.effusion_side}.")
    if findings.pneumothorax_side is not None:
        sentences.append(
            f"a small pneumothorax is present on the {findings.pneumothorax_side}.")
    calc = findings.calcification_count
    if calc > 0 and findings.bone_abnormality:
        sentences.append(
            f"{_CALC_COUNT[calc]} noted with an acute bone abnormality.")
    elif calc > 0:
        sentences.append(f"{_CALC_COUNT[calc]} is noted.")
    elif findings.bone_abnormality:
        sentences.append("there is an acute bone abnormality.")
    if findings.heart_size == "enlarged":
        sentences.append("the heart is mildly enlarged.")
    else:
        sentences.append("the cardiac silhouette is normal in size.")
    return " ".join(sentences), findings.tags()


# ---------------------------------------------------------------------------
# splits and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    mask_path: str
    report: str
    tags: tuple[str, ...]
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def subset(self, split: str) -> list[ManifestRecord]:
        if split not in SPLIT_NAMES:
            raise InputError(f"split must be one of {SPLIT_NAMES}, got {split!r}")
        return [r for r in self.records if r.split == split]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


def split_dataset(ids: list[str], ratios=DEFAULT_RATIOS,
                  seed: int = 0) -> dict[str, str]:
    """Shuffle by seed and partition with largest-remainder rounding."""
    if not ids:
        raise InputError("split_dataset: empty id list")
    if len(set(ids)) != len(ids):
        raise InputError("split_dataset: ids must be unique")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"ratios must be 3 values summing to 1, got {ratios}")
    n = len(ids)
    exact = [n * r for r in ratios]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    # distribute leftovers by largest remainder; ties go to train, val, test
    for _ in range(n - sum(sizes)):
        k = max(range(3), key=lambda i: (remainders[i], -i))
        sizes[k] += 1
        remainders[k] = -1.0
    order = list(ids)
    np.random.default_rng(seed).shuffle(order)
    assignment: dict[str, str] = {}
    pos = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for i in order[pos:pos + size]:
            assignment[i] = name
        pos += size
    return assignment


# ---------------------------------------------------------------------------
# PGM + manifest I/O
# ---------------------------------------------------------------------------

def write_pgm(path: str, img: np.ndarray) -> None:
    """Write a [0,1] image as binary 8-bit PGM (P5, maxval 255)."""
    arr = np.asarray(img)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM back to a [0,1] float array."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    try:
        if not blob.startswith(b"P5"):
            raise ValueError("missing P5 magic")
        fields: list[bytes] = []
        pos = 2
        while len(fields) < 3:
            while pos < len(blob) and blob[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ValueError("truncated header")
            fields.append(blob[start:pos])
        pos += 1  # single whitespace after maxval
        w, h, maxval = (int(v) for v in fields)
        if maxval != 255 or w < 1 or h < 1:
            raise ValueError(f"unsupported header w={w} h={h} maxval={maxval}")
        payload = blob[pos:pos + w * h]
        if len(payload) != w * h:
            raise ValueError(f"expected {w * h} pixel bytes, got {len(payload)}")
    except ValueError as e:
        raise DatasetError(f"corrupt PGM {path}: {e}") from e
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0


_MANIFEST_HEADER = "id\timage\tmask\treport\ttags\tsplit"


def write_dataset(root: str, samples: list[tuple[str, np.ndarray, np.ndarray,
                                                 FindingSet]],
                  assignment: dict[str, str]) -> DatasetManifest:
    """Persist samples under ``root`` and return the manifest.

    Layout: images/<id>.pgm, masks/<id>.pgm, manifest.tsv.
    """
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    records = []
    for sid, img, mask, findings in samples:
        image_path = f"images/{sid}.pgm"
        mask_path = f"masks/{sid}.pgm"
        write_pgm(os.path.join(root, image_path), img)
        write_pgm(os.path.join(root, mask_path), mask)
        report, tags = render_report(findings)
        records.append(ManifestRecord(sid, image_path, mask_path, report,
                                      tags, assignment[sid]))
    manifest = DatasetManifest(records)
    write_manifest(os.path.join(root, "manifest.tsv"), manifest)
    return manifest


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    lines = [_MANIFEST_HEADER]
    for r in manifest.records:
        tags = ",".join(r.tags)
        lines.append(f"{r.id}\t{r.image_path}\t{r.mask_path}\t{r.report}\t{tags}\t{r.split}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from e
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise DatasetError(f"corrupt manifest {path}: bad header")
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 6:
            raise DatasetError(f"corrupt manifest {path}: line {ln}")
        sid, image_path, mask_path, report, tags, split = parts
        if split not in SPLIT_NAMES:
            raise DatasetError(f"corrupt manifest {path}: record {sid}: bad split {split!r}")
        tag_tuple = tuple(t for t in tags.split(",") if t)
        records.append(ManifestRecord(sid, image_path, mask_path, report,
                                      tag_tuple, split))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"corrupt manifest {path}: duplicate ids")
    return DatasetManifest(records)


def read_dataset(root: str) -> DatasetManifest:
    return read_manifest(os.path.join(root, "manifest.tsv"))


def load_record_image(root: str, record: ManifestRecord) -> np.ndarray:
    try:
        return read_pgm(os.path.join(root, record.image_path))
    except DatasetError as e:
        raise DatasetError(f"record {record.id}: {e}") from e


def load_record_mask(root: str, record: ManifestRecord) -> np.ndarray:
    try:
        raw = read_pgm(os.path.join(root, record.mask_path))
    except DatasetError as e:
        raise DatasetError(f"record {record.id}: {e}") from e
    return (raw > 0.5).astype(np.float64)


def load_split_arrays(root: str, manifest: DatasetManifest, split: str):
    """Load one split as dense arrays: images (n,H,W), masks (n,H,W),
    reports, tag tuples, ids."""
    records = manifest.subset(split)
    images = np.stack([load_record_image(root, r) for r in records]) \
        if records else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))
    masks = np.stack([load_record_mask(root, r) for r in records]) \
        if records else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))
    reports = [r.report for r in records]
    tags = [r.tags for r in records]
    ids = [r.id for r in records]
    return images, masks, reports, tags, ids


def generate_dataset(root: str, n: int, seed: int = 0,
                     ratios=DEFAULT_RATIOS) -> DatasetManifest:
    """Generate and persist a full synthetic dataset of ``n`` samples."""
    if n < 1:
        raise InputError(f"dataset size must be >= 1, got {n}")
    streams = np.random.SeedSequence(seed).spawn(n)
    width = max(5, len(str(n - 1)))
    samples = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        img, mask, findings = generate_sample(rng)
        samples.append((f"img{i:0{width}d}", img, mask, findings))
    ids = [s[0] for s in samples]
    assignment = split_dataset(ids, ratios=ratios, seed=seed)
    return write_dataset(root, samples, assignment)


def all_finding_sets() -> list[FindingSet]:
    """Exhaustive enumeration of the finite FindingSet space (432 members)."""
    out = []
    base = FindingSet()
    for vol in LUNG_VOLUMES:
        for eff in (None, *SIDES):
            for pneu in (None, *SIDES):
                for calc in range(4):
                    for heart in HEART_SIZES:
                        for bone in (False, True):
                            out.append(replace(
                                base, lung_volume=vol, effusion_side=eff,
                                pneumothorax_side=pneu, calcification_count=calc,
                                heart_size=heart, bone_abnormality=bone))
    return out
