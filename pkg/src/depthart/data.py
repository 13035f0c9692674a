"""Synthetic scenes with exact depth, plus dataset persistence.

Scenes are ray-cast at a fixed resolution: a floor plane and up to three
boxes/spheres, Lambertian-shaded from one directional light. Depth is
z-depth (distance along the optical axis), which makes back-projection
with the pinhole intrinsics exact. Planar regions (floor, visible box
faces) are annotated with their camera-frame plane equations for the
planarity metrics.

File formats (all integers little-endian):
  image   binary PPM (P6, 8-bit)
  depth   "DPTH" magic, u32 width, u32 height, f32 payload
  mask    "MASK" magic, u32 width, u32 height, u8 payload
  planes  UTF-8; per plane a line "nx ny nz d" (camera frame) followed by
          one line of run-length counts over the row-major mask,
          alternating zero-runs and one-runs, starting with zeros
  manifest  UTF-8 lines "split<TAB>image<TAB>depth<TAB>mask<TAB>planes"
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

RESOLUTION = 32
FX = FY = 32.0
CX = CY = 15.5
EPS_NORM = 1e-6          # epsilon in the depth normalization
PERCENTILE = 98.0
AMBIENT = 0.18
MIN_PLANE_PIXELS = 16
MIN_VALID_FRACTION = 0.55


class DataError(ValueError):
    """Dataset files or generation parameters are invalid."""


@dataclass
class PlaneAnnotation:
    mask: np.ndarray          # bool [H, W]
    normal: np.ndarray        # unit, camera frame
    offset: float             # n . p + offset == 0 on the plane


@dataclass
class DepthSample:
    image: np.ndarray         # float32 [3, H, W] in [0, 1]
    depth: np.ndarray         # float32 [H, W], meters; 0 where invalid
    mask: np.ndarray          # bool [H, W]
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy
    planes: list[PlaneAnnotation] = field(default_factory=list)


@dataclass(frozen=True)
class SceneSpec:
    """Everything the renderer needs; a pure function of the seed."""

    seed: int
    n_primitives: int
    objects: tuple          # tuples ("sphere", center, radius, albedo) or
    #                         ("box", lo, hi, albedo)
    floor_albedo: tuple[float, float, float]
    eye: tuple[float, float, float]
    target: tuple[float, float, float]
    light: tuple[float, float, float]

    @classmethod
    def from_seed(cls, seed: int) -> "SceneSpec":
        rng = np.random.default_rng(np.random.SeedSequence([77, seed]))
        n_objects = int(rng.integers(0, 4))  # plus the floor: 1..4 primitives
        objects = []
        for _ in range(n_objects):
            pos = np.array([rng.uniform(-1.4, 1.4), 0.0, rng.uniform(-1.2, 1.2)])
            albedo = tuple(rng.uniform(0.25, 0.95, size=3).round(6))
            if rng.random() < 0.5:
                r = rng.uniform(0.25, 0.7)
                center = (pos[0], r, pos[2])
                objects.append(("sphere", center, float(r), albedo))
            else:
                half = rng.uniform(0.2, 0.6, size=3)
                lo = (pos[0] - half[0], 0.0, pos[2] - half[2])
                hi = (pos[0] + half[0], 2 * half[1], pos[2] + half[2])
                objects.append(("box", lo, hi, albedo))
        yaw = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(3.2, 4.8)
        height = rng.uniform(1.4, 2.4)
        eye = (dist * np.sin(yaw), height, dist * np.cos(yaw))
        target = (rng.uniform(-0.4, 0.4), rng.uniform(0.0, 0.5),
                  rng.uniform(-0.4, 0.4))
        lv = np.array([rng.uniform(-1, 1), rng.uniform(0.6, 1.6), rng.uniform(-1, 1)])
        lv /= np.linalg.norm(lv)
        return cls(seed=seed, n_primitives=n_objects + 1,
                   objects=tuple(objects),
                   floor_albedo=tuple(rng.uniform(0.35, 0.85, size=3).round(6)),
                   eye=eye, target=target, light=tuple(lv))


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def _camera_rays(eye, target):
    """World-frame ray directions whose camera-z component is 1, so the
    hit parameter t is the z-depth directly."""
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    up_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up_world)
    nr = np.linalg.norm(right)
    if nr < 1e-8:  # looking straight down; pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    down = np.cross(fwd, right)
    u, v = np.meshgrid(np.arange(RESOLUTION), np.arange(RESOLUTION), indexing="xy")
    dx = (u - CX) / FX
    dy = (v - CY) / FY
    dirs = dx[..., None] * right + dy[..., None] * down + fwd
    rot = np.stack([right, down, fwd], axis=0)  # world -> camera
    return eye, dirs, rot


def _intersect_plane(eye, dirs):
    t = np.full(dirs.shape[:2], np.inf)
    denom = dirs[..., 1]
    hit = np.abs(denom) > 1e-9
    tt = -eye[1] / np.where(hit, denom, 1.0)
    ok = hit & (tt > 0.05)
    t[ok] = tt[ok]
    return t


def _intersect_sphere(eye, dirs, center, radius):
    oc = eye - np.asarray(center, float)
    a = (dirs * dirs).sum(-1)
    b = 2.0 * (dirs @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(dirs.shape[:2], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    tt = np.where(t0 > 0.05, t0, t1)
    good = ok & (tt > 0.05)
    t[good] = tt[good]
    return t


def _intersect_box(eye, dirs, lo, hi):
    """Slab method; also reports which axis/face the entry hit lies on."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    inv = 1.0 / np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
    t_lo = (lo - eye) * inv
    t_hi = (hi - eye) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    t_near = t1.max(-1)
    t_far = t2.min(-1)
    axis = t1.argmax(-1)
    ok = (t_near <= t_far) & (t_near > 0.05)
    t = np.where(ok, t_near, np.inf)
    # face sign: entering from the low side if direction along axis > 0
    enter_dir = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0]
    face_sign = np.where(enter_dir > 0, -1, 1)  # -1: lo face, +1: hi face
    return t, axis, face_sign


def render_scene(spec: SceneSpec, max_retries: int = 8) -> DepthSample:
    """Ray-cast the scene; regenerates with a perturbed seed if the view is
    degenerate (almost nothing visible)."""
    for attempt in range(max_retries):
        use = spec if attempt == 0 else SceneSpec.from_seed(
            spec.seed + 1_000_003 * attempt)
        sample = _render_once(use)
        valid_frac = sample.mask.mean()
        has_plane = any(p.mask.sum() >= MIN_PLANE_PIXELS for p in sample.planes)
        if valid_frac >= MIN_VALID_FRACTION and has_plane:
            return sample
    raise DataError(f"seed {spec.seed}: no usable view after {max_retries} tries")


def _render_once(spec: SceneSpec) -> DepthSample:
    eye, dirs, rot = _camera_rays(spec.eye, spec.target)
    h = w = RESOLUTION
    best_t = _intersect_plane(eye, dirs)
    best_id = np.where(np.isfinite(best_t), 0, -1)
    box_faces = {}  # prim id -> (axis, face_sign) arrays
    normals_world = np.zeros((h, w, 3))
    normals_world[best_id == 0] = [0.0, 1.0, 0.0]
    albedos = {0: np.asarray(spec.floor_albedo)}

    for i, obj in enumerate(spec.objects, start=1):
        kind = obj[0]
        if kind == "sphere":
            t = _intersect_sphere(eye, dirs, obj[1], obj[2])
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_id = np.where(closer, i, best_id)
            if closer.any():
                pts = eye + dirs[closer] * t[closer][:, None]
                n = pts - np.asarray(obj[1], float)
                n /= np.linalg.norm(n, axis=-1, keepdims=True)
                normals_world[closer] = n
        else:
            t, axis, sign = _intersect_box(eye, dirs, obj[1], obj[2])
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_id = np.where(closer, i, best_id)
            box_faces[i] = (axis, sign)
            if closer.any():
                n = np.zeros((h, w, 3))
                for ax in range(3):
                    selax = closer & (axis == ax)
                    n[selax, ax] = sign[selax]
                normals_world[closer] = n[closer]
        albedos[i] = np.asarray(obj[3], float)

    valid = np.isfinite(best_t)
    depth = np.where(valid, best_t, 0.0)

    light = np.asarray(spec.light, float)
    lambert = np.clip(normals_world @ light, 0.0, None)
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    image = np.zeros((h, w, 3))
    for pid, alb in albedos.items():
        sel = best_id == pid
        image[sel] = alb * shade[sel, None]
    image = np.clip(image, 0.0, 1.0)

    planes = _annotate_planes(spec, rot, eye, best_id, box_faces, valid)
    return DepthSample(
        image=np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32),
        depth=depth.astype(np.float32),
        mask=valid,
        intrinsics=(FX, FY, CX, CY),
        planes=planes,
    )


def _annotate_planes(spec, rot, eye, best_id, box_faces, valid):
    """Camera-frame plane equations for the floor and visible box faces."""
    planes: list[PlaneAnnotation] = []

    def to_camera(n_world, d_world):
        n_cam = rot @ n_world
        d_cam = float(n_world @ eye + d_world)
        return n_cam, d_cam

    floor_mask = (best_id == 0) & valid
    if floor_mask.sum() >= MIN_PLANE_PIXELS:
        n_cam, d_cam = to_camera(np.array([0.0, 1.0, 0.0]), 0.0)
        planes.append(PlaneAnnotation(floor_mask, n_cam, d_cam))

    for i, obj in enumerate(spec.objects, start=1):
        if obj[0] != "box" or i not in box_faces:
            continue
        axis, sign = box_faces[i]
        lo, hi = np.asarray(obj[1], float), np.asarray(obj[2], float)
        hit = (best_id == i) & valid
        for ax in range(3):
            for s, bound in ((-1, lo[ax]), (1, hi[ax])):
                m = hit & (axis == ax) & (sign == s)
                if m.sum() < MIN_PLANE_PIXELS:
                    continue
                n_world = np.zeros(3)
                n_world[ax] = s
                # plane: n . p - s*bound = 0 (n points outward)
                n_cam, d_cam = to_camera(n_world, -s * bound)
                planes.append(PlaneAnnotation(m, n_cam, d_cam))
    return planes


def backproject(depth: np.ndarray, intrinsics) -> np.ndarray:
    """z-depth raster -> camera-frame points [H, W, 3]."""
    fx, fy, cx, cy = intrinsics
    h, w = depth.shape
    u, v = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    x = (u - cx) / fx * depth
    y = (v - cy) / fy * depth
    return np.stack([x, y, depth], axis=-1)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def percentile_nearest_rank(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values).reshape(-1))
    if v.size == 0:
        raise DataError("percentile of empty set")
    rank = int(np.ceil(pct / 100.0 * v.size))
    rank = min(max(rank, 1), v.size)
    return float(v[rank - 1])


def normalize_depth(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Map depth to roughly [-1, 1] by its own 98th-percentile: the raster
    is divided by (D98 + eps), doubled, and shifted so zero maps to -1."""
    if not np.asarray(mask).any():
        raise DataError("normalize_depth: empty mask")
    d98 = percentile_nearest_rank(depth[mask], PERCENTILE)
    return (depth / (d98 + EPS_NORM) * 2.0 - 1.0).astype(np.float32)


def denormalize_depth(norm: np.ndarray, d98: float) -> np.ndarray:
    return ((norm + 1.0) * 0.5 * (d98 + EPS_NORM)).astype(np.float32)


def depth_p98(depth: np.ndarray, mask: np.ndarray) -> float:
    return percentile_nearest_rank(depth[mask], PERCENTILE)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def write_ppm(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    u8 = np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pix = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    img = pix.reshape(h, w, 3).astype(np.float32) / 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_depth(path: str, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(b"DPTH" + struct.pack("<II", w, h))
        f.write(np.asarray(depth, dtype="<f4").tobytes())


def read_depth(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != b"DPTH":
        raise DataError(f"{path}: bad depth magic")
    w, h = struct.unpack_from("<II", raw, 4)
    return np.frombuffer(raw, dtype="<f4", count=h * w, offset=12).reshape(h, w).copy()


def write_mask(path: str, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"MASK" + struct.pack("<II", w, h))
        f.write(np.asarray(mask, dtype=np.uint8).tobytes())


def read_mask(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != b"MASK":
        raise DataError(f"{path}: bad mask magic")
    w, h = struct.unpack_from("<II", raw, 4)
    return np.frombuffer(raw, dtype=np.uint8, count=h * w,
                         offset=12).reshape(h, w).astype(bool)


def rle_encode(mask: np.ndarray) -> str:
    """Alternating zero/one run lengths over the flattened mask, starting
    with a (possibly zero-length) zero run."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    runs = []
    current, count = 0, 0
    for bit in flat:
        if bit == current:
            count += 1
        else:
            runs.append(count)
            current, count = bit, 1
    runs.append(count)
    return " ".join(str(r) for r in runs)


def rle_decode(text: str, shape: tuple[int, int]) -> np.ndarray:
    runs = [int(x) for x in text.split()] if text.strip() else [shape[0] * shape[1]]
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos, bit = 0, False
    for r in runs:
        if bit:
            flat[pos:pos + r] = True
        pos += r
        bit = not bit
    if pos != flat.size:
        raise DataError("RLE length does not match raster size")
    return flat.reshape(shape)


def write_planes(path: str, planes: list[PlaneAnnotation]) -> None:
    lines = []
    for p in planes:
        n = [float(x) for x in p.normal]
        lines.append(f"{n[0]!r} {n[1]!r} {n[2]!r} {float(p.offset)!r}")
        lines.append(rle_encode(p.mask))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_planes(path: str, shape: tuple[int, int]) -> list[PlaneAnnotation]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if len(lines) % 2:
        raise DataError(f"{path}: dangling plane header")
    planes = []
    for i in range(0, len(lines), 2):
        nx, ny, nz, d = (float(x) for x in lines[i].split())
        planes.append(PlaneAnnotation(
            mask=rle_decode(lines[i + 1], shape),
            normal=np.array([nx, ny, nz]), offset=d))
    return planes


def save_sample(out_dir: str, stem: str, sample: DepthSample) -> dict[str, str]:
    rel = {
        "image": f"{stem}.ppm",
        "depth": f"{stem}.dpth",
        "mask": f"{stem}.mask",
        "planes": f"{stem}.planes.txt",
    }
    write_ppm(os.path.join(out_dir, rel["image"]), sample.image)
    write_depth(os.path.join(out_dir, rel["depth"]), sample.depth)
    write_mask(os.path.join(out_dir, rel["mask"]), sample.mask)
    write_planes(os.path.join(out_dir, rel["planes"]), sample.planes)
    return rel


def load_sample(base_dir: str, rel: dict[str, str]) -> DepthSample:
    depth = read_depth(os.path.join(base_dir, rel["depth"]))
    return DepthSample(
        image=read_ppm(os.path.join(base_dir, rel["image"])),
        depth=depth,
        mask=read_mask(os.path.join(base_dir, rel["mask"])),
        intrinsics=(FX, FY, CX, CY),
        planes=read_planes(os.path.join(base_dir, rel["planes"]), depth.shape),
    )


EVAL_SEED_OFFSET = 500_000


def make_dataset(n_train: int, n_eval: int, seed: int, out_dir: str) -> str:
    """Render and persist train/eval splits with disjoint seed ranges.

    Returns the manifest path. Train sample i uses seed ``seed + i``; eval
    sample j uses ``seed + EVAL_SEED_OFFSET + j``.
    """
    if n_train <= 0 or n_eval <= 0:
        raise DataError("make_dataset: counts must be positive")
    if n_train >= EVAL_SEED_OFFSET:
        raise DataError("make_dataset: train split too large for seed layout")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split, count, base in (("train", n_train, seed),
                               ("eval", n_eval, seed + EVAL_SEED_OFFSET)):
        for i in range(count):
            sample = render_scene(SceneSpec.from_seed(base + i))
            rel = save_sample(out_dir, f"{split}_{i:05d}", sample)
            rows.append("\t".join([split, rel["image"], rel["depth"],
                                   rel["mask"], rel["planes"]]))
    manifest = os.path.join(out_dir, "manifest.tsv")
    tmp = manifest + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    os.replace(tmp, manifest)
    return manifest


def load_manifest(data_dir: str, split: str | None = None) -> list[DepthSample]:
    manifest = os.path.join(data_dir, "manifest.tsv")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.tsv in {data_dir}")
    samples = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise DataError(f"malformed manifest line: {line!r}")
            if split is not None and parts[0] != split:
                continue
            samples.append(load_sample(data_dir, {
                "image": parts[1], "depth": parts[2],
                "mask": parts[3], "planes": parts[4]}))
    if split is not None and not samples:
        raise DataError(f"no samples for split {split!r} in {data_dir}")
    return samples
