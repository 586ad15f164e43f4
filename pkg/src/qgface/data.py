"""Dataset indexing, evaluation manifests and the synthetic mixed-quality faces."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import down_up, jpeg_roundtrip
from .errors import IngestionError, InvalidInputError, ProtocolError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp"}


@dataclass
class DatasetIndex:
    records: list
    identity_names: list

    @property
    def n_identities(self):
        return len(self.identity_names)

    @property
    def labels(self):
        return np.array([r[1] for r in self.records], dtype=np.int64)

    def __len__(self):
        return len(self.records)

    def load_images(self, indices=None, size=None):
        if indices is None:
            indices = range(len(self.records))
        return np.stack([load_image(self.records[i][0], size) for i in indices])


@dataclass
class EvalManifest:
    """Images plus verification pairs and a closed-set gallery/probe split.

    ``gallery`` and ``probe`` hold (image index, identity) tuples; identities
    are integers.  ``probe_tiers`` names the degradation tier of each probe.
    """

    images: list
    verification_pairs: list = field(default_factory=list)
    gallery: list = field(default_factory=list)
    probe: list = field(default_factory=list)
    probe_tiers: list = field(default_factory=list)
    identity_names: list = field(default_factory=list)

    def __post_init__(self):
        if self.probe and not self.probe_tiers:
            self.probe_tiers = ["all"] * len(self.probe)
        if len(self.probe_tiers) != len(self.probe):
            raise InvalidInputError("probe_tiers must align with probe")
        check_closed_set(self.gallery, self.probe)

    @property
    def tiers(self):
        seen = []
        for t in self.probe_tiers:
            if t not in seen:
                seen.append(t)
        return seen

    def probes_in(self, tier):
        return [p for p, t in zip(self.probe, self.probe_tiers) if t == tier]

    def load_images(self, size=None):
        return np.stack([load_image(src, size) for src in self.images])


def check_closed_set(gallery, probe):
    known = {ident for _, ident in gallery}
    missing = sorted({ident for _, ident in probe} - known)
    if missing:
        raise ProtocolError(f"probe identities absent from the gallery: {missing[:10]}")


def load_image(source, size=None):
    if isinstance(source, np.ndarray):
        img = source
    else:
        try:
            with Image.open(source) as im:
                img = np.asarray(im.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            raise IngestionError(f"cannot read image {source}: {exc}") from exc
    if size is not None and img.shape[:2] != tuple(size):
        img = np.asarray(Image.fromarray(img).resize((size[1], size[0]), Image.BILINEAR))
    return img


def load_dataset(root):
    """Index ``root/<identity>/<image>``; labels follow sorted identity names."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist or is not a directory")
    id_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not id_dirs:
        raise IngestionError(f"dataset root {root} contains no identity directories")
    records = []
    for label, d in enumerate(id_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise IngestionError(f"identity directory {d} contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
            except (OSError, UnidentifiedImageError) as exc:
                raise IngestionError(f"unreadable image {f}: {exc}") from exc
            records.append((f, label))
    return DatasetIndex(records=records, identity_names=[d.name for d in id_dirs])


def write_dataset(index, root):
    root = Path(root)
    for i, (src, label) in enumerate(index.records):
        d = root / index.identity_names[label]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(load_image(src)).save(d / f"{i:06d}.png")


# -- manifest files ----------------------------------------------------------
#
#   gallery <path> <identity>
#   probe <path> <identity> [tier]
#   <pathA> <pathB> <0|1>
#
# Paths are relative to the manifest's directory.  '#' starts a comment.


def write_manifest(manifest, path, image_dir="images"):
    path = Path(path)
    img_root = path.parent / image_dir
    img_root.mkdir(parents=True, exist_ok=True)
    rel = []
    for i, src in enumerate(manifest.images):
        if isinstance(src, np.ndarray):
            name = f"{image_dir}/{i:06d}.png"
            Image.fromarray(src).save(path.parent / name)
            rel.append(name)
        else:
            rel.append(str(Path(src).resolve().relative_to(path.parent.resolve())))
    names = manifest.identity_names or [str(i) for i in range(1 + max(
        [ident for _, ident in manifest.gallery + manifest.probe], default=0))]
    lines = []
    for idx, ident in manifest.gallery:
        lines.append(f"gallery {rel[idx]} {names[ident]}")
    for (idx, ident), tier in zip(manifest.probe, manifest.probe_tiers):
        lines.append(f"probe {rel[idx]} {names[ident]} {tier}")
    for a, b, same in manifest.verification_pairs:
        lines.append(f"{rel[a]} {rel[b]} {int(bool(same))}")
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest {path} does not exist")
    images, index_of = [], {}

    def image_index(token):
        if token not in index_of:
            full = path.parent / token
            if not full.is_file():
                raise IngestionError(f"manifest {path} references missing image {full}")
            index_of[token] = len(images)
            images.append(full)
        return index_of[token]

    gallery_raw, probe_raw, pairs, tiers = [], [], [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "gallery" and len(tok) == 3:
            gallery_raw.append((image_index(tok[1]), tok[2]))
        elif tok[0] == "probe" and len(tok) in (3, 4):
            probe_raw.append((image_index(tok[1]), tok[2]))
            tiers.append(tok[3] if len(tok) == 4 else "all")
        elif len(tok) == 3 and tok[2] in ("0", "1"):
            pairs.append((image_index(tok[0]), image_index(tok[1]), tok[2] == "1"))
        else:
            raise IngestionError(f"{path}:{lineno}: cannot parse manifest line {line!r}")
    names = sorted({n for _, n in gallery_raw + probe_raw})
    label = {n: i for i, n in enumerate(names)}
    return EvalManifest(
        images=images,
        verification_pairs=pairs,
        gallery=[(i, label[n]) for i, n in gallery_raw],
        probe=[(i, label[n]) for i, n in probe_raw],
        probe_tiers=tiers,
        identity_names=names,
    )


# -- synthetic faces ---------------------------------------------------------

SKIN_TONES = np.array([[224, 187, 160], [198, 145, 110], [150, 104, 75]], dtype=np.float64)
HAIR_TONES = np.array([[40, 30, 25], [110, 75, 40], [200, 170, 110]], dtype=np.float64)


def _identity_params(rng):
    """Per-identity geometry; colours come from small shared palettes."""
    return {
        "skin": SKIN_TONES[rng.integers(len(SKIN_TONES))],
        "hair": HAIR_TONES[rng.integers(len(HAIR_TONES))],
        "face_w": rng.uniform(0.30, 0.40),
        "face_h": rng.uniform(0.40, 0.48),
        "hairline": rng.uniform(-0.30, -0.15),
        "eye_dx": rng.uniform(0.10, 0.18),
        "eye_y": rng.uniform(-0.12, -0.02),
        "eye_r": rng.uniform(0.030, 0.060),
        "eye_dark": rng.uniform(0.0, 0.5),
        "brow_dy": rng.uniform(0.04, 0.09),
        "brow_tilt": rng.uniform(-0.5, 0.5),
        "brow_w": rng.uniform(0.008, 0.022),
        "nose_len": rng.uniform(0.06, 0.16),
        "nose_w": rng.uniform(0.015, 0.045),
        "mouth_y": rng.uniform(0.16, 0.28),
        "mouth_w": rng.uniform(0.06, 0.15),
        "mouth_curve": rng.uniform(-0.8, 0.8),
        "mouth_t": rng.uniform(0.010, 0.025),
        "mark_x": rng.uniform(-0.2, 0.2),
        "mark_y": rng.uniform(-0.05, 0.25),
        "mark_on": rng.random() < 0.5,
    }


def render_face(params, size, rng=None, jitter=True):
    """Draw a face-like image at ``size`` (H, W) with optional pose/light jitter."""
    h, w = size
    ss = 3
    H, W = h * ss, w * ss
    if rng is not None and jitter:
        angle = np.deg2rad(rng.uniform(-8, 8))
        tx, ty = rng.uniform(-0.04, 0.04, size=2)
        scale = rng.uniform(0.94, 1.06)
        light = rng.uniform(0.85, 1.15)
        bg = rng.uniform(60, 200, size=3)
        noise_sigma = 3.0
    else:
        angle, tx, ty, scale, light = 0.0, 0.0, 0.0, 1.0, 1.0
        bg = np.full(3, 128.0)
        noise_sigma = 0.0

    ys, xs = np.mgrid[0:H, 0:W]
    u = (xs + 0.5) / W - 0.5 - tx
    v = (ys + 0.5) / H - 0.5 - ty
    ca, sa = np.cos(angle), np.sin(angle)
    x = (ca * u + sa * v) / scale
    y = (-sa * u + ca * v) / scale

    p = params
    img = np.broadcast_to(bg, (H, W, 3)).copy()
    face = (x / p["face_w"]) ** 2 + (y / p["face_h"]) ** 2 <= 1.0
    img[face] = p["skin"]
    hair = face & (y < p["hairline"]) | (
        ((x / (p["face_w"] * 1.08)) ** 2 + ((y + 0.02) / (p["face_h"] * 1.06)) ** 2 <= 1.0)
        & ~face & (y < 0.0))
    img[hair] = p["hair"]

    eye_col = np.array([255, 255, 255]) * (1 - p["eye_dark"])
    for sgn in (-1, 1):
        ex = sgn * p["eye_dx"]
        white = ((x - ex) / (p["eye_r"] * 1.6)) ** 2 + ((y - p["eye_y"]) / p["eye_r"]) ** 2 <= 1.0
        img[white] = [240, 240, 240]
        pupil = (x - ex) ** 2 + (y - p["eye_y"]) ** 2 <= (0.55 * p["eye_r"]) ** 2
        img[pupil] = eye_col * 0.3
        by = p["eye_y"] - p["brow_dy"] + sgn * p["brow_tilt"] * (x - ex) * 0.5
        brow = (np.abs(y - by) < p["brow_w"]) & (np.abs(x - ex) < p["eye_r"] * 1.8)
        img[brow] = p["hair"]

    nose = (np.abs(x) < p["nose_w"] * (0.3 + (y - p["eye_y"]) / p["nose_len"])) & (
        y > p["eye_y"]) & (y < p["eye_y"] + p["nose_len"])
    img[nose] = p["skin"] * 0.75
    my = p["mouth_y"] + p["mouth_curve"] * (x / p["mouth_w"]) ** 2 * 0.03
    mouth = (np.abs(y - my) < p["mouth_t"]) & (np.abs(x) < p["mouth_w"])
    img[mouth] = [150, 40, 50]
    if p["mark_on"]:
        mark = (x - p["mark_x"]) ** 2 + (y - p["mark_y"]) ** 2 <= 0.018 ** 2
        img[mark & face] = p["skin"] * 0.45

    img = img * light
    small = img.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    if noise_sigma and rng is not None:
        small = small + rng.normal(0.0, noise_sigma, size=small.shape)
    return np.clip(np.round(small), 0, 255).astype(np.uint8)


def degrade(image, scale, jpeg_quality=None):
    out = image if scale >= 1.0 else down_up(image, scale)
    if jpeg_quality is not None:
        out = jpeg_roundtrip(out, jpeg_quality)
    return out


def _as_level(level):
    if isinstance(level, (int, float)):
        return float(level), None
    scale, quality = level
    return float(scale), (None if quality is None else int(quality))


def synth_generate(n_ids, per_id, degrade_levels=(1.0,), image_size=(112, 112), seed=0,
                   probes_per_id=2, tier_names=None):
    """Procedural face dataset: a training index and a tiered evaluation manifest.

    Every identity gets a fixed parameter vector.  Training samples and probes
    are independent jittered renders; the gallery holds one unjittered render
    per identity.  Each entry of ``degrade_levels`` is a downscale factor or a
    (factor, jpeg_quality) pair; factor 1.0 without a quality means no
    degradation.
    """
    if n_ids < 2 or per_id < 2:
        raise InvalidInputError(f"need n_ids >= 2 and per_id >= 2, got {n_ids}, {per_id}")
    if probes_per_id < 1 or not degrade_levels:
        raise InvalidInputError("need at least one probe per identity and one degradation level")
    image_size = tuple(int(v) for v in image_size)
    if len(image_size) != 2 or min(image_size) < 8:
        raise InvalidInputError(f"image_size must be (H, W) with both >= 8, got {image_size}")
    levels = [_as_level(lv) for lv in degrade_levels]
    if any(not 0.0 < s <= 1.0 for s, _ in levels):
        raise InvalidInputError("degradation factors must lie in (0, 1]")
    if tier_names is None:
        tier_names = [f"L{i}" for i in range(len(levels))]

    root = np.random.default_rng(seed)
    id_rng, train_rng, eval_rng = root.spawn(3)
    params = [_identity_params(r) for r in id_rng.spawn(n_ids)]
    width = len(str(n_ids - 1))
    names = [f"id{i:0{width}d}" for i in range(n_ids)]

    records = []
    for label, r in enumerate(train_rng.spawn(n_ids)):
        for sample_rng in r.spawn(per_id):
            records.append((render_face(params[label], image_size, sample_rng), label))
    train = DatasetIndex(records=records, identity_names=names)

    images, gallery, probe, tiers = [], [], [], []
    gallery_idx = {}
    for label in range(n_ids):
        gallery_idx[label] = len(images)
        gallery.append((len(images), label))
        images.append(render_face(params[label], image_size, None, jitter=False))
    tier_rngs = eval_rng.spawn(len(levels))
    for (scale, quality), tname, trng in zip(levels, tier_names, tier_rngs):
        for label, r in enumerate(trng.spawn(n_ids)):
            for prng in r.spawn(probes_per_id):
                clean = render_face(params[label], image_size, prng)
                probe.append((len(images), label))
                tiers.append(tname)
                images.append(degrade(clean, scale, quality))

    pair_rng = eval_rng.spawn(1)[0]
    pairs = []
    for idx, label in probe:
        pairs.append((idx, gallery_idx[label], True))
        other = int(pair_rng.integers(n_ids - 1))
        other += other >= label
        pairs.append((idx, gallery_idx[other], False))

    manifest = EvalManifest(images=images, verification_pairs=pairs, gallery=gallery,
                            probe=probe, probe_tiers=tiers, identity_names=names)
    return train, manifest
