"""Synthetic attribute-object dataset: one textured, colored shape per image.

Tasks mirror an adjective/noun/pair labeling: the noun is the shape geometry,
the adjective is an appearance family (hue range plus a characteristic
texture; two adjectives share each hue family so texture matters), and the
pair task names the (adjective, noun) combination. Pair prediction requires
both cues, so it is the hardest task by construction.

Generation is deterministic: every sample draws from its own RNG stream
keyed by (dataset seed, pair id, index within pair), so regeneration is
bitwise identical regardless of evaluation order.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "TaskFamilySpec",
    "Dataset",
    "default_valid_pairs",
    "generate",
    "split",
    "flip_image",
    "random_flip",
    "images_to_float",
    "save_dataset",
    "load_dataset",
    "DatasetError",
    "NOUN_NAMES",
    "ADJECTIVE_NAMES",
]

MAGIC = b"XRESDATA"
VERSION = 1

NOUN_NAMES = ("circle", "ring", "square", "diamond", "triangle", "cross",
              "star", "crescent")
ADJECTIVE_NAMES = ("glossy_red", "speckled_red", "striped_green",
                   "dotted_green", "smooth_blue", "checker_blue")

# hue centers per adjective family; two adjectives share each family
_ADJ_HUES = (0.00, 0.02, 0.33, 0.30, 0.60, 0.63)

# fixed noun mixing permutation so the default pair table is not blocky
_NOUN_MIX = (3, 6, 1, 4, 7, 2, 5, 0)


class DatasetError(Exception):
    pass


def default_valid_pairs(adjectives: int = 6, nouns: int = 8, count: int = 24):
    """Deterministic bipartite pair table; every adjective gets >= 3 nouns."""
    if count < 3 * adjectives:
        raise ValueError(
            f"need >= {3 * adjectives} pairs so each of {adjectives} adjectives "
            f"keeps >= 3 nouns, got {count}"
        )
    if count > adjectives * nouns:
        raise ValueError(f"at most {adjectives * nouns} pairs possible, got {count}")
    per = [count // adjectives] * adjectives
    for i in range(count - sum(per)):
        per[i] += 1
    pairs = []
    cursor = 0
    for a in range(adjectives):
        for j in range(per[a]):
            noun = (cursor + j) % nouns
            noun = _NOUN_MIX[noun % len(_NOUN_MIX)] % nouns
            pairs.append((a, noun))
        cursor += per[a]
    return tuple(pairs)


@dataclass(frozen=True)
class TaskFamilySpec:
    """Declarative description of the task family and rendering knobs."""

    noun_classes: int = 8
    adjective_classes: int = 6
    valid_pairs: tuple = field(default_factory=lambda: default_valid_pairs())
    images_per_pair: int = 500
    image_size: int = 32
    noise: float = 0.06
    seed: int = 0
    min_images_per_pair: int = 5

    def validate(self) -> None:
        if not (1 <= self.noun_classes <= len(NOUN_NAMES)):
            raise ValueError(f"noun_classes must be in [1, {len(NOUN_NAMES)}]")
        if not (1 <= self.adjective_classes <= len(ADJECTIVE_NAMES)):
            raise ValueError(f"adjective_classes must be in [1, {len(ADJECTIVE_NAMES)}]")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.images_per_pair < self.min_images_per_pair:
            raise ValueError(
                f"images_per_pair {self.images_per_pair} below the configured "
                f"minimum {self.min_images_per_pair}"
            )
        seen = set()
        adj_nouns: dict[int, set] = {}
        for i, (a, n) in enumerate(self.valid_pairs):
            if not (0 <= a < self.adjective_classes and 0 <= n < self.noun_classes):
                raise ValueError(f"pair {i}: ({a}, {n}) out of class range")
            if (a, n) in seen:
                raise ValueError(f"pair {i}: duplicate pair ({a}, {n})")
            seen.add((a, n))
            adj_nouns.setdefault(a, set()).add(n)
        for a in range(self.adjective_classes):
            if len(adj_nouns.get(a, ())) < 3:
                raise ValueError(
                    f"adjective {a} has {len(adj_nouns.get(a, ()))} paired nouns, needs >= 3"
                )

    @property
    def pair_count(self) -> int:
        return len(self.valid_pairs)


@dataclass
class Dataset:
    spec: TaskFamilySpec
    images: np.ndarray        # [n, H, W, 3] uint8
    labels: np.ndarray        # [n, 3] uint16 columns: adjective, noun, pair
    noun_names: tuple
    adjective_names: tuple

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def pairs(self) -> tuple:
        return self.spec.valid_pairs

    def pair_id(self, adjective: int, noun: int) -> int:
        return self.spec.valid_pairs.index((adjective, noun))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Dataset)
            and self.spec == other.spec
            and self.noun_names == other.noun_names
            and self.adjective_names == other.adjective_names
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


# ---------------------------------------------------------------------------
# rendering


def _hsv_to_rgb(h, s, v):
    h = np.asarray(h) % 1.0
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    r = np.select([i == k for k in range(6)], [c[0] for c in choices])
    g = np.select([i == k for k in range(6)], [c[1] for c in choices])
    b = np.select([i == k for k in range(6)], [c[2] for c in choices])
    return np.stack([r, g, b], axis=-1)


def _shape_distance(shape_id, u, v):
    """Signed inwards distance (positive inside) in the shape's unit frame."""
    if shape_id == 0:    # circle
        return 1.0 - np.hypot(u, v)
    if shape_id == 1:    # ring
        return 0.3 - np.abs(np.hypot(u, v) - 0.7)
    if shape_id == 2:    # square
        return 0.85 - np.maximum(np.abs(u), np.abs(v))
    if shape_id == 3:    # diamond
        return 1.0 - (np.abs(u) + np.abs(v))
    if shape_id == 4:    # triangle (pointing up)
        return 0.52 - np.maximum(0.866 * np.abs(u) - 0.5 * v, v)
    if shape_id == 5:    # cross
        bar1 = np.minimum(0.32 - np.abs(u), 0.95 - np.abs(v))
        bar2 = np.minimum(0.32 - np.abs(v), 0.95 - np.abs(u))
        return np.maximum(bar1, bar2)
    if shape_id == 6:    # four-point star (astroid)
        return 1.0 - (np.abs(u) ** (2.0 / 3.0) + np.abs(v) ** (2.0 / 3.0))
    if shape_id == 7:    # crescent
        return np.minimum(1.0 - np.hypot(u, v), np.hypot(u - 0.55, v) - 0.62)
    raise ValueError(f"no shape with id {shape_id}")


def _texture(adjective_id, u, v, rng, size):
    """Per-adjective brightness modulator in [0, 1] over the shape frame."""
    if adjective_id == 0:     # glossy: one bright highlight
        hu, hv = rng.uniform(-0.4, 0.4, size=2)
        w = rng.uniform(0.35, 0.6)
        return np.exp(-((u - hu) ** 2 + (v - hv) ** 2) / (w * w))
    if adjective_id == 1:     # speckled: coarse value noise
        grid = rng.normal(size=(6, 6))
        reps = int(np.ceil(size / 6)) + 1
        big = np.kron(grid, np.ones((reps, reps)))[:u.shape[0], :u.shape[1]]
        return 1.0 / (1.0 + np.exp(-2.5 * big))
    if adjective_id == 2:     # striped
        phi = rng.uniform(0, np.pi)
        freq = rng.uniform(7.0, 12.0)
        phase = rng.uniform(0, 2 * np.pi)
        return (np.sin(freq * (u * np.cos(phi) + v * np.sin(phi)) + phase) > 0).astype(float)
    if adjective_id == 3:     # dotted
        freq = rng.uniform(7.0, 11.0)
        du, dv = rng.uniform(0, np.pi, size=2)
        return (np.sin(freq * u + du) * np.sin(freq * v + dv) > 0.35).astype(float)
    if adjective_id == 4:     # smooth gradient
        phi = rng.uniform(0, 2 * np.pi)
        return 0.5 + 0.5 * np.clip((u * np.cos(phi) + v * np.sin(phi)) / 1.2, -1, 1)
    if adjective_id == 5:     # checker
        freq = rng.uniform(4.0, 7.0)
        du, dv = rng.uniform(0, np.pi, size=2)
        return (np.sin(freq * u + du) * np.sin(freq * v + dv) > 0).astype(float)
    raise ValueError(f"no adjective with id {adjective_id}")


def _soft_mask(dist, scale, size):
    # ~1.5 px of edge softness, expressed in shape-frame units
    aa = 1.5 * (2.0 / size) / scale
    return np.clip(dist / aa + 0.5, 0.0, 1.0)


def _render(rng, size, adjective_id, noun_id, noise):
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    bg = _hsv_to_rgb(rng.uniform(0, 1),
                     rng.uniform(0.0, 0.3),
                     rng.uniform(0.15, 0.5)) * np.ones((size, size, 3))
    gphi = rng.uniform(0, 2 * np.pi)
    gstrength = rng.uniform(0.0, 0.15)
    bg += (gstrength * (xx * np.cos(gphi) + yy * np.sin(gphi)))[..., None]

    for _ in range(2):  # small off-color distractor blobs under the shape
        bx, by = rng.uniform(-0.8, 0.8, size=2)
        br = rng.uniform(0.10, 0.18)
        bcol = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.4, 0.9),
                           rng.uniform(0.3, 0.7))
        bmask = np.clip((br - np.hypot(xx - bx, yy - by)) / (2.0 / size) + 0.5, 0, 1)
        bg = bg * (1 - bmask[..., None]) + bcol * bmask[..., None]

    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    scale = rng.uniform(0.45, 0.7)
    theta = rng.uniform(0, 2 * np.pi)
    cs, sn = np.cos(theta), np.sin(theta)
    u = ((xx - cx) * cs + (yy - cy) * sn) / scale
    v = (-(xx - cx) * sn + (yy - cy) * cs) / scale
    mask = _soft_mask(_shape_distance(noun_id, u, v), scale, size)[..., None]

    hue = _ADJ_HUES[adjective_id] + rng.uniform(-0.035, 0.035)
    sat = rng.uniform(0.65, 1.0)
    val = rng.uniform(0.6, 0.95)
    tex = _texture(adjective_id, u, v, rng, size)
    vmap = val * (0.45 + 0.55 * tex)
    smap = np.full_like(vmap, sat)
    color = _hsv_to_rgb(np.full_like(vmap, hue), smap, vmap)

    img = bg * (1 - mask) + color * mask
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0).round().astype(np.uint8)


def generate(spec: TaskFamilySpec) -> Dataset:
    """Render the full family; bitwise reproducible from (spec, seed)."""
    spec.validate()
    n = spec.pair_count * spec.images_per_pair
    images = np.empty((n, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    labels = np.empty((n, 3), dtype=np.uint16)
    row = 0
    for pair_id, (a, noun) in enumerate(spec.valid_pairs):
        for k in range(spec.images_per_pair):
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([spec.seed, pair_id, k]))
            )
            images[row] = _render(rng, spec.image_size, a, noun, spec.noise)
            labels[row] = (a, noun, pair_id)
            row += 1
    return Dataset(
        spec=spec,
        images=images,
        labels=labels,
        noun_names=NOUN_NAMES[:spec.noun_classes],
        adjective_names=ADJECTIVE_NAMES[:spec.adjective_classes],
    )


# ---------------------------------------------------------------------------
# split / augmentation


def split(ds: Dataset, seed: int, test_fraction: float = 0.2):
    """Per-pair stratified split: floor(test_fraction * n) test, rest train."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    pair_col = ds.labels[:, 2]
    train_idx, test_idx = [], []
    for pair_id in range(ds.spec.pair_count):
        idx = np.flatnonzero(pair_col == pair_id)
        if idx.size < 5:
            raise ValueError(
                f"pair {pair_id} has {idx.size} samples; stratified split needs >= 5"
            )
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, 7, pair_id]))
        )
        perm = idx[rng.permutation(idx.size)]
        n_test = int(np.floor(test_fraction * idx.size))
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return _subset(ds, train_idx), _subset(ds, test_idx)


def _subset(ds: Dataset, idx: np.ndarray) -> Dataset:
    return Dataset(ds.spec, ds.images[idx].copy(), ds.labels[idx].copy(),
                   ds.noun_names, ds.adjective_names)


def flip_image(image: np.ndarray) -> np.ndarray:
    """Horizontal mirror of an H x W x 3 image; labels are unaffected."""
    return image[:, ::-1, :].copy()


def random_flip(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return flip_image(image)
    return image


def images_to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """u8 [n, H, W, 3] -> [n, 3, H, W] in [0, 1]."""
    return (images.astype(dtype) / 255.0).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# serialization


def _pack_name(name: str) -> bytes:
    nb = name.encode("utf-8")
    return struct.pack("<H", len(nb)) + nb


def save_dataset(path, ds: Dataset) -> None:
    spec = ds.spec
    chunks = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<Q", spec.seed & 0xFFFFFFFFFFFFFFFF),
        struct.pack("<HHHIHHd", spec.noun_classes, spec.adjective_classes,
                    spec.pair_count, spec.images_per_pair, spec.image_size,
                    spec.min_images_per_pair, spec.noise),
    ]
    for name in ds.noun_names:
        chunks.append(_pack_name(name))
    for name in ds.adjective_names:
        chunks.append(_pack_name(name))
    for a, n in spec.valid_pairs:
        chunks.append(struct.pack("<HH", a, n))
    chunks.append(struct.pack("<I", len(ds)))
    img_bytes = np.ascontiguousarray(ds.images).tobytes()
    lbl_bytes = np.ascontiguousarray(ds.labels.astype("<u2")).tobytes()
    chunks.append(img_bytes)
    chunks.append(lbl_bytes)
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise DatasetError(f"{path}: too short ({len(blob)} bytes) to be a dataset")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise DatasetError(f"{path}: CRC mismatch, file corrupt")
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise DatasetError(
                f"{path}: truncated, wanted {pos + n} bytes, have {len(body)}"
            )
        out = body[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise DatasetError(f"{path}: bad magic, not a dataset file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}, expected {VERSION}")
    (seed,) = struct.unpack("<Q", take(8))
    nouns, adjectives, pair_count, per_pair, size, min_images, noise = struct.unpack(
        "<HHHIHHd", take(20)
    )

    def take_name():
        (ln,) = struct.unpack("<H", take(2))
        return take(ln).decode("utf-8")

    noun_names = tuple(take_name() for _ in range(nouns))
    adjective_names = tuple(take_name() for _ in range(adjectives))
    pairs = tuple(struct.unpack("<HH", take(4)) for _ in range(pair_count))
    (count,) = struct.unpack("<I", take(4))
    img_nbytes = count * size * size * 3
    images = np.frombuffer(take(img_nbytes), dtype=np.uint8).reshape(
        count, size, size, 3).copy()
    labels = np.frombuffer(take(count * 6), dtype="<u2").reshape(count, 3).astype(np.uint16)
    if pos != len(body):
        raise DatasetError(f"{path}: {len(body) - pos} trailing bytes after samples")
    spec = TaskFamilySpec(
        noun_classes=nouns, adjective_classes=adjectives, valid_pairs=pairs,
        images_per_pair=per_pair, image_size=size, noise=noise, seed=seed,
        min_images_per_pair=min_images,
    )
    return Dataset(spec, images, labels, noun_names, adjective_names)
