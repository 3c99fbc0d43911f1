"""Dataset ingestion, depth normalization, protocol splits, and a
deterministic synthetic RGB-D identity generator.

The generator renders each identity as a parametric depth surface: an
ellipsoidal head dome plus identity-coded bumps for the nose, brow, cheeks,
mouth, and chin. The guidance raster is the normalized surface height (or a
thermal-like map over the same geometry); the RGB raster is a Lambertian
shading of the surface times an identity-coded albedo pattern. Variations
re-render the same surface: pose rotates the sampling grid in-plane,
expression warps the mouth/brow bump parameters, illumination scales RGB
brightness only, and occlusion pastes an opaque rectangle over both rasters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pnm
from .kvconfig import parse_bool

VARIATIONS = ("neutral", "pose", "expression", "occlusion", "illumination", "time")

DEFAULT_MIX = {
    "neutral": 0.35,
    "pose": 0.20,
    "expression": 0.15,
    "occlusion": 0.15,
    "illumination": 0.15,
}

MANIFEST_NAME = "manifest.tsv"


class DataError(ValueError):
    """Manifest or raster content violates the dataset contract."""


@dataclass
class RGBDSample:
    rgb: np.ndarray        # (H, H, 3) float32 in [0, 1]
    guidance: np.ndarray   # (H, H, 1) float32 in [0, 1]
    identity: int
    variation: str


@dataclass
class ManifestEntry:
    identity: int
    variation: str
    rgb_path: str
    guidance_path: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    header: dict[str, str] = field(default_factory=dict)
    remapped: dict[int, int] | None = None  # original id -> contiguous index


@dataclass
class ProtocolSplit:
    gallery: list[int]
    probes: dict[str, list[int]]


# ---------------------------------------------------------------------------
# depth preprocessing
# ---------------------------------------------------------------------------

def normalize_depth(raw: np.ndarray, near: float, far: float) -> np.ndarray:
    """Clip raw range values to [near, far] and map them linearly onto [0, 1].

    Values outside the clipping planes are content that is too close or too
    far to be the face; they are zeroed.
    """
    if near >= far:
        raise ValueError(f"near plane {near} must be below far plane {far}")
    arr = np.asarray(raw, dtype=np.float64)
    out = (arr - near) / (far - near)
    out[(arr < near) | (arr > far)] = 0.0
    return out


# ---------------------------------------------------------------------------
# synthetic identity generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    ids: int = 10
    per_id: int = 20
    extent: int = 64
    seed: int = 0
    mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    guidance: str = "depth"  # or "thermal"

    def __post_init__(self):
        if self.ids < 2 or self.per_id < 2:
            raise ValueError("need ids >= 2 and per_id >= 2")
        if self.guidance not in ("depth", "thermal"):
            raise ValueError(f"guidance must be depth or thermal, got {self.guidance!r}")
        unknown = set(self.mix) - set(DEFAULT_MIX)
        if unknown:
            raise ValueError(f"unknown variation(s) in mix: {sorted(unknown)}")
        if not math.isclose(sum(self.mix.values()), 1.0, abs_tol=1e-6):
            raise ValueError("variation mix ratios must sum to 1")


class _Bump:
    def __init__(self, cx, cy, sx, sy, amp):
        self.cx, self.cy, self.sx, self.sy, self.amp = cx, cy, sx, sy, amp

    def __call__(self, u, v):
        return self.amp * np.exp(-((u - self.cx) ** 2 / (2 * self.sx ** 2)
                                   + (v - self.cy) ** 2 / (2 * self.sy ** 2)))


class _Identity:
    """All person-specific surface and albedo parameters, drawn once."""

    def __init__(self, rng: np.random.Generator):
        u = rng.uniform
        self.ax = u(0.55, 0.72)
        self.ay = u(0.70, 0.85)
        self.nose = dict(cy=u(0.02, 0.18), sx=u(0.06, 0.11), sy=u(0.10, 0.18),
                         amp=u(0.30, 0.55))
        self.brow = dict(cy=u(-0.40, -0.24), sx=u(0.22, 0.34), sy=u(0.04, 0.08),
                         amp=u(0.06, 0.22))
        cheek_x = u(0.28, 0.44)
        self.cheeks = dict(cx=cheek_x, cy=u(0.06, 0.24), s=u(0.10, 0.17),
                           amp=u(0.05, 0.20))
        self.mouth = dict(cy=u(0.38, 0.52), sx=u(0.12, 0.26), sy=u(0.04, 0.09),
                          amp=u(-0.10, 0.18))
        self.chin = dict(cy=u(0.60, 0.72), s=u(0.10, 0.16), amp=u(0.04, 0.16))
        self.eye_x = u(0.20, 0.30)
        self.eye_y = u(-0.20, -0.08)
        self.eye_r = u(0.045, 0.085)
        self.eye_dark = u(0.35, 0.65)
        self.tone = u(0.45, 0.85, size=3)
        self.waves = [(u(1.5, 4.5), u(0, 2 * np.pi), u(0, np.pi), u(0.04, 0.14))
                      for _ in range(3)]
        self.height_norm = None  # filled from the canonical base render

    def bumps(self, mouth_shift=0.0, mouth_scale=1.0, brow_shift=0.0):
        n, b, c, m, ch = self.nose, self.brow, self.cheeks, self.mouth, self.chin
        out = [
            _Bump(0.0, n["cy"], n["sx"], n["sy"], n["amp"]),
            _Bump(0.0, b["cy"], b["sx"], b["sy"], b["amp"] + brow_shift),
            _Bump(+c["cx"], c["cy"], c["s"], c["s"], c["amp"]),
            _Bump(-c["cx"], c["cy"], c["s"], c["s"], c["amp"]),
            _Bump(0.0, m["cy"], m["sx"] * mouth_scale, m["sy"], m["amp"] + mouth_shift),
            _Bump(0.0, ch["cy"], ch["s"], ch["s"], ch["amp"]),
        ]
        return out


def _grid(extent: int, angle: float = 0.0):
    lin = np.linspace(-1.0, 1.0, extent)
    v, u = np.meshgrid(lin, lin, indexing="ij")
    if angle:
        c, s = math.cos(angle), math.sin(angle)
        u, v = c * u - s * v, s * u + c * v
    return u, v


def _render(ident: _Identity, extent: int, *, angle=0.0, mouth_shift=0.0,
            mouth_scale=1.0, brow_shift=0.0, guidance_kind="depth"):
    """Evaluate the parametric face on a (possibly rotated) grid."""
    u, v = _grid(extent, angle)
    r2 = (u / ident.ax) ** 2 + (v / ident.ay) ** 2
    mask = r2 <= 1.0
    dome = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    height = 0.55 * dome
    for bump in ident.bumps(mouth_shift, mouth_scale, brow_shift):
        height = height + bump(u, v)
    height *= mask

    if ident.height_norm is None:
        ident.height_norm = float(height.max())
    rel = np.clip(height / ident.height_norm, 0.0, 1.0)

    if guidance_kind == "depth":
        g = np.where(mask, 0.12 + 0.88 * rel, 0.0)
    else:  # thermal-like: warm core plus hot spots at the eyes and nostrils
        warm = 0.30 + 0.45 * rel
        for sx in (+1, -1):
            warm = warm + _Bump(sx * ident.eye_x, ident.eye_y,
                                ident.eye_r, ident.eye_r, 0.25)(u, v)
        warm = warm + _Bump(0.0, ident.nose["cy"] + 0.12, 0.05, 0.04, 0.18)(u, v)
        g = np.where(mask, np.clip(warm, 0.05, 1.0), 0.0)

    # Lambertian shading of the height field under a fixed light
    scale = extent / 3.0
    hy, hx = np.gradient(height * scale)
    norm = np.sqrt(hx ** 2 + hy ** 2 + 1.0)
    light = np.array([0.35, -0.25, 0.90])
    light = light / np.linalg.norm(light)
    shade = np.clip((-hx * light[0] - hy * light[1] + light[2]) / norm, 0.0, 1.0)

    albedo = np.ones((extent, extent, 3)) * ident.tone
    for freq, phase, theta, weight in ident.waves:
        wave = np.cos(freq * (u * math.cos(theta) + v * math.sin(theta)) * np.pi + phase)
        albedo = albedo * (1.0 + weight * wave[..., None])
    for sx in (+1, -1):
        spot = _Bump(sx * ident.eye_x, ident.eye_y, ident.eye_r, ident.eye_r, 1.0)(u, v)
        albedo = albedo * (1.0 - ident.eye_dark * spot)[..., None]

    rgb = np.clip(albedo * (0.25 + 0.75 * shade)[..., None], 0.0, 1.0) * mask[..., None]
    return rgb, g[..., None]


def _allocate_counts(mix: dict[str, float], per_id: int) -> dict[str, int]:
    """Largest-remainder allocation; at least one neutral sample."""
    order = [v for v in DEFAULT_MIX if v in mix]
    raw = {v: mix[v] * per_id for v in order}
    counts = {v: int(raw[v]) for v in order}
    rest = per_id - sum(counts.values())
    for v in sorted(order, key=lambda v: (counts[v] - raw[v], order.index(v)))[:rest]:
        counts[v] += 1
    if counts.get("neutral", 0) == 0:
        donor = max(order, key=lambda v: counts[v])
        counts[donor] -= 1
        counts["neutral"] = counts.get("neutral", 0) + 1
    return {v: c for v, c in counts.items() if c > 0}


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Render the dataset to disk; returns the manifest path.

    The same config always produces byte-identical files.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {root}: {exc}") from exc

    rng = np.random.default_rng(cfg.seed)
    idents = [_Identity(rng) for _ in range(cfg.ids)]
    counts = _allocate_counts(cfg.mix, cfg.per_id)

    lines = [
        "# synthetic rgb + guidance identity dataset",
        f"# ids = {cfg.ids}",
        f"# per_id = {cfg.per_id}",
        f"# extent = {cfg.extent}",
        f"# seed = {cfg.seed}",
        f"# guidance = {cfg.guidance}",
        "# near = 0",
        "# far = 255",
    ]

    for iid, ident in enumerate(idents):
        sub = root / f"id{iid:03d}"
        sub.mkdir(exist_ok=True)
        # canonical base render fixes the identity's height normalization
        base_rgb, base_g = _render(ident, cfg.extent, guidance_kind=cfg.guidance)
        index = 0
        for variation in counts:
            for k in range(counts[variation]):
                rgb, g = _make_variant(ident, cfg, rng, variation,
                                       first=(variation == "neutral" and k == 0),
                                       base=(base_rgb, base_g))
                rgb_name = f"id{iid:03d}/s{index:03d}_{variation}.ppm"
                g_name = f"id{iid:03d}/s{index:03d}_{variation}.pgm"
                pnm.write_ppm(root / rgb_name, _quantize(rgb))
                pnm.write_pgm(root / g_name, _quantize(g[..., 0]))
                lines.append(f"{iid}\t{variation}\t{rgb_name}\t{g_name}")
                index += 1

    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _make_variant(ident, cfg, rng, variation, *, first, base):
    kind = cfg.guidance
    if variation == "neutral":
        if first:
            return base
        angle = math.radians(rng.uniform(-5.0, 5.0))
        return _render(ident, cfg.extent, angle=angle, guidance_kind=kind)
    if variation == "pose":
        angle = math.radians(rng.uniform(8.0, 30.0)) * (1 if rng.random() < 0.5 else -1)
        return _render(ident, cfg.extent, angle=angle, guidance_kind=kind)
    if variation == "expression":
        rgb, g = _render(ident, cfg.extent,
                         mouth_shift=rng.uniform(0.06, 0.16) * (1 if rng.random() < 0.5 else -1),
                         mouth_scale=rng.uniform(0.7, 1.4),
                         brow_shift=rng.uniform(-0.06, 0.10),
                         guidance_kind=kind)
        return rgb, g
    if variation == "illumination":
        # brightness on RGB only; the guidance raster is the neutral base's
        base_rgb, base_g = base
        scale = rng.uniform(0.4, 1.3)
        return np.clip(base_rgb * scale, 0.0, 1.0), base_g
    if variation == "occlusion":
        rgb, g = base[0].copy(), base[1].copy()
        extent = cfg.extent
        frac = rng.uniform(0.10, 0.25)
        aspect = rng.uniform(0.6, 1.6)
        rw = min(extent - 1, max(1, int(round(extent * math.sqrt(frac * aspect)))))
        rh = min(extent - 1, max(1, int(round(extent * math.sqrt(frac / aspect)))))
        top = int(rng.integers(0, extent - rh))
        left = int(rng.integers(0, extent - rw))
        color = rng.uniform(0.2, 0.45, size=3)
        # an occluder (hand, glasses) sits near the face's depth plane: the
        # rectangle flattens the local relief instead of jumping off-plane
        region = g[top:top + rh, left:left + rw]
        depth_val = max(float(region.mean()), 0.15) + rng.uniform(-0.05, 0.05)
        rgb[top:top + rh, left:left + rw] = color
        g[top:top + rh, left:left + rw] = np.clip(depth_val, 0.05, 1.0)
        return rgb, g
    raise DataError(f"generator does not synthesize variation {variation!r}")


def nonbackground_mask(sample: RGBDSample, threshold: float = 0.0) -> np.ndarray:
    """Boolean (H, H) mask of scene content; background guidance is exactly 0."""
    return sample.guidance[..., 0] > threshold


# ---------------------------------------------------------------------------
# manifest loading
# ---------------------------------------------------------------------------

def load_manifest(path) -> tuple[DatasetManifest, list[RGBDSample]]:
    """Parse a manifest and decode every referenced raster pair."""
    manifest_path = Path(path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent

    header: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if "=" in body:
                key, _, value = body.partition("=")
                header[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(
                f"{manifest_path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            identity = int(parts[0])
        except ValueError:
            raise DataError(f"{manifest_path}:{lineno}: identity {parts[0]!r} is not an integer")
        if parts[1] not in VARIATIONS:
            raise DataError(f"{manifest_path}:{lineno}: unknown variation {parts[1]!r}")
        entries.append(ManifestEntry(identity, parts[1], parts[2], parts[3]))

    if not entries:
        raise DataError(f"{manifest_path}: dataset is empty")

    ids = sorted({e.identity for e in entries})
    remap = None
    if ids != list(range(len(ids))):
        remap = {orig: idx for idx, orig in enumerate(ids)}

    near = float(header.get("near", 0))
    far = float(header.get("far", 255))

    samples: list[RGBDSample] = []
    for e in entries:
        rgb_file = root / e.rgb_path
        g_file = root / e.guidance_path
        for f in (rgb_file, g_file):
            if not f.exists():
                raise DataError(f"missing raster file: {f}")
        rgb = pnm.read_ppm(rgb_file).astype(np.float32) / 255.0
        g_raw = pnm.read_pgm(g_file)
        g = normalize_depth(g_raw, near, far).astype(np.float32)[..., None]
        if rgb.shape[:2] != g.shape[:2]:
            raise DataError(f"{e.rgb_path} and {e.guidance_path} extents differ")
        identity = remap[e.identity] if remap else e.identity
        samples.append(RGBDSample(rgb=rgb, guidance=g, identity=identity,
                                  variation=e.variation))

    return DatasetManifest(root=root, entries=entries, header=header,
                           remapped=remap), samples


# ---------------------------------------------------------------------------
# protocol splitting
# ---------------------------------------------------------------------------

def split_protocol(samples: list[RGBDSample], scheme: str = "neutral-gallery",
                   *, ratio: float = 0.5, seed: int = 0) -> ProtocolSplit:
    """Partition sample indices into a gallery set and per-variation probes.

    neutral-gallery: every neutral sample enrolls in the gallery; each other
    variation present forms its own probe set. ratio: a seeded per-identity
    split, probes grouped by variation.
    """
    by_identity: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_identity.setdefault(s.identity, []).append(i)

    gallery: list[int] = []
    probes: dict[str, list[int]] = {}

    if scheme == "neutral-gallery":
        for identity, idxs in sorted(by_identity.items()):
            own = [i for i in idxs if samples[i].variation == "neutral"]
            if not own:
                raise DataError(f"identity {identity} has no neutral sample to enroll")
            gallery.extend(own)
        for i, s in enumerate(samples):
            if s.variation != "neutral":
                probes.setdefault(s.variation, []).append(i)
    elif scheme == "ratio":
        if not 0 < ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        for identity, idxs in sorted(by_identity.items()):
            order = [idxs[j] for j in rng.permutation(len(idxs))]
            take = min(max(1, int(round(ratio * len(order)))), len(order) - 1)
            gallery.extend(sorted(order[:take]))
            for i in order[take:]:
                probes.setdefault(samples[i].variation, []).append(i)
        for key in probes:
            probes[key] = sorted(probes[key])
    else:
        raise ValueError(f"unknown protocol scheme {scheme!r}")

    probe_ids = {samples[i].identity for idxs in probes.values() for i in idxs}
    missing = {samples[i].identity for i in gallery} - probe_ids
    if missing:
        raise DataError(f"gallery identities without probes: {sorted(missing)}")
    return ProtocolSplit(gallery=gallery, probes=probes)
