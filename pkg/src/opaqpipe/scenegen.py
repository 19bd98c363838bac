"""Procedural paired transparent/opaque scenes with ground-truth depth.

A scene is a textured floor receding from the camera (far at the top of the
frame, near at the bottom) with one to three objects resting on it.  Both
renderings share geometry and lighting; only the object material differs:

* opaque: Lambertian, fixed albedo #E7A034, shaded from analytic normals;
* transparent: the background seen through a refraction offset, attenuated
  by a transmittance factor, plus a Blinn-Phong highlight.

Depth stores the first surface: the object inside its mask, the floor
elsewhere.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import storage

ALBEDO = np.array([0xE7, 0xA0, 0x34], dtype=np.float64) / 255.0
SHAPES = ("disc", "rounded_rect", "annulus")
DEFORM_MODES = ("x", "y", "xy")
DEFORM_MAGNITUDES = (0.8, 0.9, 1.1, 1.25, 1.4)
LIGHT_MODES = ("overhead", "random")
SPLITS = {"train": 0, "val": 1, "test": 2}

TRANSMITTANCE = 0.85
MAX_REFRACTION_PX = 3.0
FALLOFF_REF_MM = 1000.0
FALLOFF_POWER = 0.75
CONTACT_GAP_MM = 40.0
RELIEF_MM = 160.0
MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    cy: float
    cx: float
    radius: float
    deform_mode: str
    deform_mag: float


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    objects: tuple[ObjectSpec, ...] = ()
    depth_far: float = 3000.0
    depth_near: float = 1000.0
    texture: tuple[tuple[float, ...], ...] = ()    # (fy, fx, phase, r, g, b amplitudes)
    base_color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    light_mode: str = "overhead"
    light_dir: tuple[float, float] = (-1.0, 0.0)    # unit 2-vector (dy, dx)
    light_elevation: float = 60.0                   # degrees above the image plane
    seed: int = 0


@dataclass
class ScenePair:
    I_tr: np.ndarray          # 3×H×W in [0, 1]
    I_op: np.ndarray
    depth: np.ndarray         # H×W, mm
    masks: list[np.ndarray]   # per object, H×W in {0, 1}
    manifest: dict = field(default_factory=dict)
    # background as seen through the objects (refraction offsets applied); not stored on disk
    refracted: np.ndarray | None = None

    @property
    def union_mask(self) -> np.ndarray:
        if not self.masks:
            return np.zeros(self.depth.shape)
        return np.clip(np.sum(self.masks, axis=0), 0, 1)


def _deform_scale(mode: str, mag: float) -> tuple[float, float]:
    """(sy, sx) anisotropic scale for a deformation mode."""
    return {"x": (1.0, mag), "y": (mag, 1.0), "xy": (mag, mag)}[mode]


def _extent(obj: ObjectSpec) -> tuple[float, float]:
    sy, sx = _deform_scale(obj.deform_mode, obj.deform_mag)
    return obj.radius * sy, obj.radius * sx


def sample_spec(seed: int, height: int = 64, width: int = 64, n_objects: int | None = None
                ) -> SceneSpec:
    """Draw a scene description from ``seed``.  ``n_objects=0`` gives an empty floor."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4)) if n_objects is None else n_objects
    if not 0 <= k <= 3:
        raise ValueError(f"object count must be in 0..3, got {k}")
    depth_far = float(rng.uniform(2900.0, 3100.0))
    depth_near = float(rng.uniform(950.0, 1050.0))
    texture = tuple(
        (float(rng.uniform(0.15, 0.6)), float(rng.uniform(0.15, 0.6)),
         float(rng.uniform(0, 2 * math.pi)), *map(float, rng.uniform(0.05, 0.15, size=3)))
        for _ in range(2))
    base_color = tuple(float(c) for c in rng.uniform(0.35, 0.6, size=3))
    light_mode = LIGHT_MODES[int(rng.integers(2))]
    if light_mode == "overhead":
        light_dir, elevation = (-1.0, 0.0), 60.0
    else:
        az = rng.uniform(0, 2 * math.pi)
        light_dir, elevation = (math.sin(az), math.cos(az)), float(rng.uniform(40.0, 75.0))

    objects: list[ObjectSpec] = []
    tries = 0
    while len(objects) < k:
        tries += 1
        if tries > MAX_PLACEMENT_TRIES:
            raise RuntimeError(f"seed {seed}: could not place {k} objects without overlap")
        cand = ObjectSpec(
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            cy=0.0, cx=0.0,
            radius=float(rng.uniform(6.0, 11.0)),
            deform_mode=DEFORM_MODES[int(rng.integers(len(DEFORM_MODES)))],
            deform_mag=float(DEFORM_MAGNITUDES[int(rng.integers(len(DEFORM_MAGNITUDES)))]),
        )
        ey, ex = _extent(cand)
        if 2 * ey + 4 > height or 2 * ex + 4 > width:
            continue    # too large for the frame at this deformation; redraw
        cy = float(rng.uniform(ey + 1, height - 2 - ey))
        cx = float(rng.uniform(ex + 1, width - 2 - ex))
        cand = ObjectSpec(cand.shape, cy, cx, cand.radius, cand.deform_mode, cand.deform_mag)
        # bounding ellipses (plus a 2 px gap) must not intersect
        if all(_separated(cand, o) for o in objects):
            objects.append(cand)
    return SceneSpec(height, width, tuple(objects), depth_far, depth_near, texture, base_color,
                     light_mode, tuple(map(float, light_dir)), float(elevation), seed)


def _separated(a: ObjectSpec, b: ObjectSpec) -> bool:
    ay, ax = _extent(a)
    by, bx = _extent(b)
    return abs(a.cy - b.cy) > ay + by + 2 or abs(a.cx - b.cx) > ax + bx + 2


def floor_depth(spec: SceneSpec) -> np.ndarray:
    """Linear ramp from depth_far (row 0) to depth_near (last row)."""
    f = np.arange(spec.height, dtype=np.float64) / (spec.height - 1)
    col = spec.depth_far + f * (spec.depth_near - spec.depth_far)
    return np.repeat(col[:, None], spec.width, axis=1)


def falloff(depth: np.ndarray) -> np.ndarray:
    return (FALLOFF_REF_MM / depth) ** FALLOFF_POWER


def background_image(spec: SceneSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    img = np.empty((3, spec.height, spec.width))
    for c in range(3):
        img[c] = spec.base_color[c]
        for fy, fx, phase, *amp in spec.texture:
            img[c] += amp[c] * np.sin(fy * yy + fx * xx + phase + c)
    img *= falloff(floor_depth(spec))[None]
    return np.clip(img, 0.0, 1.0)


def height_profile(obj: ObjectSpec, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """(mask, h) with h in [0, 1] the relief of the object, zero outside."""
    sy, sx = _deform_scale(obj.deform_mode, obj.deform_mag)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (xx - obj.cx) / (obj.radius * sx)
    v = (yy - obj.cy) / (obj.radius * sy)
    if obj.shape == "disc":
        rho = np.hypot(u, v)
        inside = rho <= 1.0
        h = np.sqrt(np.clip(1.0 - rho ** 2, 0.0, None))
    elif obj.shape == "rounded_rect":
        rho = (u ** 4 + v ** 4) ** 0.25
        inside = rho <= 1.0
        h = np.sqrt(np.clip(1.0 - rho ** 2, 0.0, None))
    elif obj.shape == "annulus":
        rho = np.hypot(u, v)
        inside = (rho >= 0.45) & (rho <= 1.0)
        q = (rho - 0.725) / 0.275
        h = np.sqrt(np.clip(1.0 - q ** 2, 0.0, None))
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    mask = inside.astype(np.float64)
    return mask, h * mask


def _normals(h: np.ndarray, scale: float) -> np.ndarray:
    gy, gx = np.gradient(h * scale)
    n = np.stack([-gy, -gx, np.ones_like(h)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def _sample_bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    y = np.clip(y, 0, h - 1)
    x = np.clip(x, 0, w - 1)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    return (img[:, y0, x0] * (1 - fy) * (1 - fx) + img[:, y0, x1] * (1 - fy) * fx
            + img[:, y1, x0] * fy * (1 - fx) + img[:, y1, x1] * fy * fx)


def render_pair(spec: SceneSpec) -> ScenePair:
    H, W = spec.height, spec.width
    floor = floor_depth(spec)
    bg = background_image(spec)
    I_tr = bg.copy()
    I_op = bg.copy()
    through = bg.copy()
    depth = floor.copy()

    el = math.radians(spec.light_elevation)
    light = np.array([spec.light_dir[0] * math.cos(el), spec.light_dir[1] * math.cos(el),
                      math.sin(el)])
    half = light + np.array([0.0, 0.0, 1.0])
    half /= np.linalg.norm(half)

    masks = []
    for obj in spec.objects:
        mask, h = height_profile(obj, H, W)
        inside = mask > 0
        if not inside.any():
            raise RuntimeError(f"seed {spec.seed}: object at ({obj.cy}, {obj.cx}) is off-frame")
        rows = np.nonzero(inside.any(axis=1))[0]
        y_bottom = int(rows[-1])
        d_obj = floor[y_bottom, 0] - CONTACT_GAP_MM - RELIEF_MM * h
        depth[inside] = d_obj[inside]

        n = _normals(h, obj.radius)
        lambert = np.clip(np.tensordot(light, n, axes=1), 0.0, None)
        shade = falloff(d_obj)
        I_op[:, inside] = (ALBEDO[:, None] * (lambert * shade)[inside][None])

        # refraction: displace the lookup along the relief gradient, capped at 3 px
        gy, gx = np.gradient(h * obj.radius)
        g = np.hypot(gy, gx)
        k = MAX_REFRACTION_PX / np.sqrt(1.0 + g ** 2)
        yy, xx = np.nonzero(inside)
        seen = _sample_bilinear(bg, yy + k[inside] * gy[inside], xx + k[inside] * gx[inside])
        spec_hl = 0.6 * np.clip(np.tensordot(half, n, axes=1), 0.0, None) ** 40
        I_tr[:, inside] = TRANSMITTANCE * seen + spec_hl[inside][None]
        through[:, inside] = seen
        masks.append(mask)

    I_tr = np.clip(I_tr, 0.0, 1.0)
    I_op = np.clip(I_op, 0.0, 1.0)
    manifest = {"seed": spec.seed, "spec": spec_to_dict(spec)}
    return ScenePair(I_tr, I_op, depth, masks, manifest, through)


def spec_to_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["objects"] = [asdict(o) for o in spec.objects]
    return d


def scene_seed(base_seed: int, split: str, index: int) -> int:
    """Disjoint seed ranges: base*10^7 + split_id*10^6 + index."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    if not 0 <= index < 10 ** 6:
        raise ValueError(f"index {index} outside 0..999999")
    return base_seed * 10 ** 7 + SPLITS[split] * 10 ** 6 + index


def make_scene(base_seed: int, split: str, index: int, size: int = 64,
               n_objects: int | None = None) -> ScenePair:
    return render_pair(sample_spec(scene_seed(base_seed, split, index), size, size, n_objects))


def generate_dataset(n: int, base_seed: int, split: str, out_dir=None, size: int = 64,
                     n_objects: int | None = None) -> list[ScenePair]:
    """Render ``n`` scenes; with ``out_dir`` also write files and ``manifest.json``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pairs = [make_scene(base_seed, split, i, size, n_objects) for i in range(n)]
    if out_dir is not None:
        write_dataset(pairs, split, out_dir)
    return pairs


def write_dataset(pairs: list[ScenePair], split: str, out_dir) -> list[storage.SampleRecord]:
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i, p in enumerate(pairs):
        sid = f"{split}_{i:05d}"
        names = {"I_tr": f"{sid}_tr.ppm", "I_op": f"{sid}_op.ppm", "depth": f"{sid}_depth.pfm"}
        storage.write_ppm(os.path.join(out_dir, names["I_tr"]), p.I_tr)
        storage.write_ppm(os.path.join(out_dir, names["I_op"]), p.I_op)
        storage.write_pfm(os.path.join(out_dir, names["depth"]), p.depth)
        mask_names = []
        for k, m in enumerate(p.masks):
            mask_names.append(f"{sid}_mask{k}.pgm")
            storage.write_pgm(os.path.join(out_dir, mask_names[-1]), m)
        spec = p.manifest["spec"]
        meta = {"shapes": [o["shape"] for o in spec["objects"]],
                "deform_modes": [o["deform_mode"] for o in spec["objects"]],
                "deform_mags": [o["deform_mag"] for o in spec["objects"]],
                "light_mode": spec["light_mode"]}
        records.append(storage.SampleRecord(sid, names["I_tr"], names["I_op"], names["depth"],
                                            mask_names, p.manifest["seed"], split, meta))
    storage.write_manifest(os.path.join(out_dir, "manifest.json"), split, records)
    return records


def load_dataset(out_dir) -> list[ScenePair]:
    """Read back a split written by ``write_dataset`` (images are 8-bit quantized)."""
    split, records = storage.read_manifest(os.path.join(out_dir, "manifest.json"))
    def join(name):
        return os.path.join(out_dir, name)

    pairs = []
    for r in records:
        pairs.append(ScenePair(
            storage.read_ppm(join(r.I_tr)), storage.read_ppm(join(r.I_op)),
            storage.read_pfm(join(r.depth)).astype(np.float64),
            [storage.read_pgm(join(m)) for m in r.masks],
            {"seed": r.seed, "id": r.id, "split": split, **r.meta}))
    return pairs
