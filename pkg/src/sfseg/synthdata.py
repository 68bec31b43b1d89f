"""Procedural road-scene generator ("ToyScapes").

A sample is rendered from two independent factors: the class layout (sky,
building skyline, road trapezoid with flanking sidewalks, and a handful of
object instances) and the domain appearance (per-class base colors, texture
frequency/amplitude, pixel noise, illumination gain).  The layout depends
only on ``class_layout_seed`` and the sample seed, so changing
``domain_params`` recolors a scene without moving a single label.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

# label ids of the region classes; object classes follow
SKY, ROAD, SIDEWALK, BUILDING = 0, 1, 2, 3
OBJECT_KINDS = ("pole", "vehicle", "person", "sign")
CLASS_NAMES_8 = ("sky", "road", "sidewalk", "building", "pole", "vehicle", "person", "sign")
DEFAULT_GROUPS = {"BG": [0, 3], "RIG": [1, 2], "OBJ": [4, 5, 6, 7]}

# trailing scalar slots of the domain vector, after the 3*C colors
TEX_FREQ, TEX_AMP, NOISE, GAIN = range(4)
N_SCALARS = 4

_SOURCE_PALETTE = np.array([
    [0.55, 0.72, 0.92],  # sky
    [0.33, 0.33, 0.36],  # road
    [0.70, 0.58, 0.52],  # sidewalk
    [0.52, 0.40, 0.30],  # building
    [0.85, 0.80, 0.20],  # pole
    [0.15, 0.30, 0.75],  # vehicle
    [0.80, 0.25, 0.25],  # person
    [0.95, 0.55, 0.10],  # sign
])


def unknown_id(num_classes: int) -> int:
    return num_classes


def derive_seed(seed: int, index: int) -> int:
    """Child seed for the ``index``-th element of a seeded collection."""
    ss = np.random.SeedSequence([seed % 2**63, index % 2**63])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def default_domain_params(num_classes: int) -> list[float]:
    if num_classes <= len(_SOURCE_PALETTE):
        colors = _SOURCE_PALETTE[:num_classes]
    else:
        extra = np.random.default_rng(12345).uniform(0.1, 0.9, size=(num_classes - len(_SOURCE_PALETTE), 3))
        colors = np.vstack([_SOURCE_PALETTE, extra])
    scalars = [0.18, 0.06, 0.02, 1.0]
    return [float(v) for v in colors.ravel()] + scalars


def random_domain_params(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """A random but plausible appearance vector (same layout as the defaults)."""
    colors = rng.uniform(0.05, 0.95, size=3 * num_classes)
    scalars = np.array([
        rng.uniform(0.05, 0.45),   # texture frequency, cycles/pixel
        rng.uniform(0.02, 0.12),   # texture amplitude
        rng.uniform(0.01, 0.05),   # noise std
        rng.uniform(0.75, 1.25),   # illumination gain
    ])
    return np.concatenate([colors, scalars])


@dataclass(frozen=True)
class DomainSpec:
    class_layout_seed: int = 0
    domain_params: tuple = ()
    gamma: float = 1.0
    num_classes: int = 8
    resolution: tuple = (64, 128)

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if not self.domain_params:
            object.__setattr__(self, "domain_params", tuple(default_domain_params(self.num_classes)))
        else:
            object.__setattr__(self, "domain_params", tuple(float(v) for v in self.domain_params))
        self.validate()

    def validate(self):
        if int(self.num_classes) < 2:
            raise ConfigError("num_classes", f"need at least 2 classes, got {self.num_classes}")
        if len(self.resolution) != 2 or min(self.resolution) < 32:
            raise ConfigError("resolution", f"H and W must be >= 32, got {self.resolution}")
        expected = 3 * self.num_classes + N_SCALARS
        if len(self.domain_params) != expected:
            raise ConfigError("domain_params", f"expected {expected} values, got {len(self.domain_params)}")
        if not np.all(np.isfinite(self.domain_params)):
            raise ConfigError("domain_params", "non-finite value")

    @property
    def params(self) -> np.ndarray:
        return np.asarray(self.domain_params, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain_params"] = list(self.domain_params)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        allowed = {"class_layout_seed", "domain_params", "gamma", "num_classes", "resolution"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown DomainSpec field")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DomainSpec":
        return cls.from_dict(json.loads(text))


def make_shifted_domain(base: DomainSpec, gamma: float, injected_params=None,
                        shift_seed: int = 0) -> DomainSpec:
    """Domain whose appearance is ``injected + gamma * base``.

    Without explicit ``injected_params`` a random appearance ``r`` is drawn
    from ``shift_seed`` and ``(1 - gamma) * r`` is injected, so every
    gamma in [0, 1] yields a convex mix of the base and a novel domain.
    """
    base.validate()
    if injected_params is None:
        rng = np.random.default_rng([shift_seed % 2**63, 99])
        injected = (1.0 - gamma) * random_domain_params(base.num_classes, rng)
    else:
        injected = np.asarray(injected_params, dtype=np.float64)
        if injected.shape != base.params.shape:
            raise ConfigError("injected_params", f"expected shape {base.params.shape}, got {injected.shape}")
    params = injected + gamma * base.params
    return DomainSpec(class_layout_seed=base.class_layout_seed, domain_params=tuple(params),
                      gamma=float(gamma), num_classes=base.num_classes, resolution=base.resolution)


# ---------------------------------------------------------------- layout

def _layout_ranges(layout_seed: int):
    rng = np.random.default_rng([layout_seed % 2**63, 17])
    sky_lo = rng.uniform(0.25, 0.31)
    road_lo = rng.uniform(0.30, 0.36)
    return (sky_lo, sky_lo + 0.09), (road_lo, road_lo + 0.09)


def _region_ids(num_classes: int):
    """Class ids used for sky / road / sidewalk / building given C."""
    sky = SKY
    road = ROAD
    sidewalk = SIDEWALK if num_classes > 2 else ROAD
    building = BUILDING if num_classes > 3 else SKY
    return sky, road, sidewalk, building


def _fill_polygon(mask_shape, pts):
    """Boolean mask of a convex polygon given (row, col) vertices."""
    h, w = mask_shape
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.asarray(pts, dtype=np.float64)
    inside = np.ones(mask_shape, dtype=bool)
    n = len(pts)
    # orientation-agnostic: all cross products share the sign of the polygon area
    area = sum(pts[i, 1] * pts[(i + 1) % n, 0] - pts[(i + 1) % n, 1] * pts[i, 0] for i in range(n))
    sign = 1.0 if area >= 0 else -1.0
    for i in range(n):
        y0, x0 = pts[i]
        y1, x1 = pts[(i + 1) % n]
        cross = (x1 - x0) * (yy + 0.5 - y0) - (y1 - y0) * (xx + 0.5 - x0)
        inside &= sign * cross >= 0
    return inside


def _layout(spec: DomainSpec, sample_seed: int):
    """Label raster plus per-instance ids (for per-instance color jitter)."""
    h, w = spec.resolution
    c = spec.num_classes
    rng = np.random.default_rng([spec.class_layout_seed % 2**63, sample_seed % 2**63, 0])
    sky_id, road_id, side_id, bld_id = _region_ids(c)
    (sky_a, sky_b), (road_a, road_b) = _layout_ranges(spec.class_layout_seed)

    labels = np.full((h, w), bld_id, dtype=np.int64)
    inst = np.zeros((h, w), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w]

    sky_end = int(round(rng.uniform(sky_a, sky_b) * h))
    road_start = h - int(round(rng.uniform(road_a, road_b) * h))

    # skyline: building blocks poke up into the sky band
    labels[:sky_end] = sky_id
    col = 0
    while col < w:
        bw = int(rng.integers(max(3, w // 16), max(4, w // 5)))
        top = int(rng.integers(max(1, sky_end // 3), sky_end + 1))
        if rng.random() < 0.25:
            top = sky_end
        labels[top:sky_end, col:col + bw] = bld_id
        col += bw

    # road band: sidewalk everywhere, road trapezoid narrowing upward
    labels[road_start:] = side_id
    cx = w / 2 + rng.uniform(-0.1, 0.1) * w
    half_bottom = rng.uniform(0.35, 0.45) * w
    half_top = rng.uniform(0.08, 0.16) * w
    band_top = road_start + max(1, int(0.06 * h))
    road = _fill_polygon((h, w), [(band_top, cx - half_top), (band_top, cx + half_top),
                                  (h, cx + half_bottom), (h, cx - half_bottom)])
    labels[road] = road_id

    obj_ids = list(range(4, c))
    n_inst = int(rng.integers(2, 9))
    if obj_ids:
        order = list(rng.permutation(obj_ids))
        assigned = [order[k % len(order)] for k in range(n_inst)]
    else:
        assigned = []
    for k, cls in enumerate(assigned, start=1):
        kind = OBJECT_KINDS[(cls - 4) % len(OBJECT_KINDS)]
        if kind == "pole":
            pw = max(2, int(rng.uniform(0.015, 0.03) * w))
            ph = int(rng.uniform(0.25, 0.45) * h)
            x0 = int(rng.integers(0, w - pw))
            y1 = int(rng.integers(road_start, min(h, road_start + 0.1 * h) + 1))
            m = (xx >= x0) & (xx < x0 + pw) & (yy >= y1 - ph) & (yy < y1)
        elif kind == "vehicle":
            vw = int(rng.uniform(0.12, 0.25) * w)
            vh = int(rng.uniform(0.10, 0.18) * h)
            x0 = int(rng.integers(0, max(1, w - vw)))
            y1 = int(rng.integers(road_start + vh // 2, h + 1))
            m = (xx >= x0) & (xx < x0 + vw) & (yy >= y1 - vh) & (yy < y1)
        elif kind == "person":
            rx = rng.uniform(0.02, 0.035) * w
            ry = rng.uniform(0.08, 0.14) * h
            ex = rng.uniform(rx, w - rx)
            ey = rng.uniform(road_start - ry * 0.5, h - ry)
            m = ((xx + 0.5 - ex) / rx) ** 2 + ((yy + 0.5 - ey) / ry) ** 2 <= 1.0
        else:  # sign: upward triangle above the road band
            s = rng.uniform(0.10, 0.18) * h
            tx = rng.uniform(s, w - s)
            ty = rng.uniform(s, max(s + 1, road_start - s * 0.2))
            m = _fill_polygon((h, w), [(ty - s, tx), (ty, tx + 0.6 * s), (ty, tx - 0.6 * s)])
        labels[m] = cls
        inst[m] = k
    return labels, inst


def _render(spec: DomainSpec, labels, inst, sample_seed: int):
    h, w = spec.resolution
    c = spec.num_classes
    p = spec.params
    colors = p[:3 * c].reshape(c, 3)
    freq, amp, noise, gain = p[3 * c:]
    rng = np.random.default_rng([spec.class_layout_seed % 2**63, sample_seed % 2**63, 1])
    theta = rng.uniform(0, np.pi, size=c)
    phase = rng.uniform(0, 2 * np.pi, size=c)
    jitter = rng.uniform(-0.04, 0.04, size=(int(inst.max()) + 1, 3))
    jitter[0] = 0.0
    noise_field = rng.standard_normal((h, w, 3))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    tex = np.sin(2 * np.pi * freq * proj + phase[:, None, None])  # (C, H, W)
    tex_px = np.take_along_axis(tex, labels[None], axis=0)[0]

    img = colors[labels] + jitter[inst] + amp * tex_px[..., None]
    img = gain * img + noise * noise_field
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_sample(spec: DomainSpec, sample_seed: int):
    """Render one (image, segmap) pair; image is HxWx3 float32 in [0, 1]."""
    spec.validate()
    labels, inst = _layout(spec, sample_seed)
    return _render(spec, labels, inst, sample_seed), labels


def generate_dataset(spec: DomainSpec, n: int, seed: int):
    if n <= 0:
        raise ConfigError("n", f"dataset size must be positive, got {n}")
    return [generate_sample(spec, derive_seed(seed, i)) for i in range(n)]


@dataclass
class Dataset:
    """Stacked images (N,H,W,3) and optional labels (N,H,W)."""
    images: np.ndarray
    labels: np.ndarray | None
    spec: DomainSpec | None = None
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @classmethod
    def generate(cls, spec: DomainSpec, n: int, seed: int) -> "Dataset":
        pairs = generate_dataset(spec, n, seed)
        return cls(images=np.stack([p[0] for p in pairs]), labels=np.stack([p[1] for p in pairs]),
                   spec=spec, seeds=[derive_seed(seed, i) for i in range(n)])

    def without_labels(self) -> "Dataset":
        return Dataset(self.images, None, self.spec, list(self.seeds))


def save_dataset(root, data: Dataset, seed: int | None = None, with_labels: bool = True, extra: dict | None = None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(data)):
        entry = {"image": f"{i:05d}_image.npy"}
        np.save(root / entry["image"], data.images[i])
        if with_labels and data.labels is not None:
            entry["label"] = f"{i:05d}_label.npy"
            np.save(root / entry["label"], data.labels[i])
        if data.seeds:
            entry["seed"] = int(data.seeds[i])
        entries.append(entry)
    manifest = {
        "format": "sfseg-dataset/1",
        "spec": data.spec.to_dict() if data.spec is not None else None,
        "seed": seed,
        "n": len(data),
        "labeled": bool(with_labels and data.labels is not None),
        "samples": entries,
    }
    if extra:
        manifest.update(extra)
    (root / "index.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_dataset(root, labels: bool = True) -> Dataset:
    root = Path(root)
    index = root / "index.json"
    if not index.exists():
        raise FileNotFoundError(f"no dataset manifest at {index}")
    manifest = json.loads(index.read_text())
    images = np.stack([np.load(root / e["image"]) for e in manifest["samples"]])
    lab = None
    if labels and manifest.get("labeled"):
        lab = np.stack([np.load(root / e["label"]) for e in manifest["samples"]])
    spec = DomainSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    seeds = [e.get("seed") for e in manifest["samples"]]
    return Dataset(images, lab, spec, seeds)
