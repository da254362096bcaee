"""Procedural scenes, a pinhole ray caster and the on-disk dataset format.

World frame: x crossrange, y downrange, z up; the ground is the plane z = 0.
Yaw is measured counter-clockwise from +x.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetIntegrityError, ImageFormatError, InvalidConfigError

DATASET_VERSION = 1


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: tuple[float, float, float] = (0.6, 0.6, 0.6)

    def __post_init__(self):
        if min(self.size) <= 0:
            raise InvalidConfigError(f"box extents must be positive, got {self.size}")

    @property
    def lo(self):
        return np.subtract(self.center, np.multiply(self.size, 0.5))

    @property
    def hi(self):
        return np.add(self.center, np.multiply(self.size, 0.5))

    @classmethod
    def on_ground(cls, x, y, sx, sy, height, albedo=(0.6, 0.6, 0.6)):
        return cls((x, y, height / 2), (sx, sy, height), albedo)

    def footprint_distance(self, x, y):
        """2-D distance from (x, y) to the box footprint (0 inside)."""
        lo, hi = self.lo, self.hi
        dx = max(lo[0] - x, 0.0, x - hi[0])
        dy = max(lo[1] - y, 0.0, y - hi[1])
        return math.hypot(dx, dy)


@dataclass
class Scene:
    boxes: list[Box] = field(default_factory=list)
    ground_height: float = 0.0
    ground_color: tuple[float, float, float] = (0.45, 0.42, 0.36)
    sky_color: tuple[float, float, float] = (0.55, 0.7, 0.9)
    light: tuple[float, float, float] = (0.4, -0.3, 0.85)
    ambient: float = 0.35
    max_range: float = 50.0

    def __post_init__(self):
        if self.max_range <= 0:
            raise InvalidConfigError("max_range must be positive")

    def with_box(self, box):
        return replace(self, boxes=[*self.boxes, box])

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["boxes"] = [Box(tuple(b["center"]), tuple(b["size"]), tuple(b["albedo"])) for b in d["boxes"]]
        for k in ("ground_color", "sky_color", "light"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class CameraPose:
    x: float
    y: float
    z: float = 3.0
    yaw: float = math.pi / 2
    pitch: float = 0.0
    fov: float = math.pi / 2
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise InvalidConfigError("horizontal field of view must lie in (0, pi)")
        if self.height % 16 or self.width % 16 or self.height < 16 or self.width < 16:
            raise InvalidConfigError("image size must be a positive multiple of 16")

    def basis(self):
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        fwd = np.array([cp * cy, cp * sy, sp])
        right = np.array([sy, -cy, 0.0])
        up = np.cross(right, fwd)
        return fwd, right, up

    @property
    def focal(self):
        return (self.width / 2) / math.tan(self.fov / 2)

    def ray_directions(self):
        """(H*W, 3) directions with unit forward component, so hit distance t is planar depth."""
        fwd, right, up = self.basis()
        f = self.focal
        u = (np.arange(self.width) + 0.5 - self.width / 2) / f
        v = (np.arange(self.height) + 0.5 - self.height / 2) / f
        uu, vv = np.meshgrid(u, v)
        d = fwd[None] + uu.reshape(-1, 1) * right[None] - vv.reshape(-1, 1) * up[None]
        return d

    def pixel_direction(self, row, col):
        fwd, right, up = self.basis()
        f = self.focal
        return fwd + (col + 0.5 - self.width / 2) / f * right - (row + 0.5 - self.height / 2) / f * up

    @property
    def origin(self):
        return np.array([self.x, self.y, self.z])


def _ray_box(origin, dirs, lo, hi):
    """Slab test. Returns (t_hit, face_axis); t_hit = inf where the ray misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    parallel = dirs == 0
    inside_slab = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (near <= far) & (far > 0)
    t = np.where(hit, np.maximum(near, 0.0), np.inf)
    return t, axis


def render_frame(scene: Scene, pose: CameraPose):
    """Ray-cast one view. Returns (rgb uint8 3 x H x W, planar depth in metres H x W).

    Sky pixels get depth ``scene.max_range``; hits are not clipped here.
    """
    origin = pose.origin
    dirs = pose.ray_directions()
    n = dirs.shape[0]
    depth = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.tile(np.asarray(scene.sky_color, dtype=float), (n, 1))
    lit = np.zeros(n, dtype=bool)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dz < 0, (scene.ground_height - origin[2]) / dz, np.inf)
    ground = np.isfinite(tg) & (tg > 0)
    depth[ground] = tg[ground]
    normal[ground] = (0.0, 0.0, 1.0)
    albedo[ground] = scene.ground_color
    lit |= ground

    for box in scene.boxes:
        t, axis = _ray_box(origin, dirs, box.lo, box.hi)
        closer = t < depth
        if not closer.any():
            continue
        depth[closer] = t[closer]
        nrm = np.zeros((closer.sum(), 3))
        ax = axis[closer]
        nrm[np.arange(len(ax)), ax] = -np.sign(dirs[closer, ax])
        normal[closer] = nrm
        albedo[closer] = box.albedo
        lit |= closer

    light = np.asarray(scene.light, dtype=float)
    light = light / np.linalg.norm(light)
    shade = np.where(lit, scene.ambient + (1 - scene.ambient) * np.clip(normal @ light, 0, None), 1.0)
    rgb = np.clip(albedo * shade[:, None], 0, 1)
    rgb8 = np.floor(rgb * 255 + 0.5).astype(np.uint8)
    depth = np.where(np.isfinite(depth), depth, scene.max_range)
    h, w = pose.height, pose.width
    return rgb8.T.reshape(3, h, w).copy(), depth.reshape(h, w)


def quantize_depth(z, max_range=50.0):
    """Planar depth in metres -> 8-bit code round(255 * min(z, R) / R), halves rounded up."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0) or np.any(np.isnan(z)):
        raise InvalidConfigError("depth must be non-negative")
    q = np.floor(255.0 * np.minimum(z, max_range) / max_range + 0.5).astype(np.uint8)
    return q if q.ndim else int(q)


def single_ray_depth(scene: Scene, pose: CameraPose, row, col):
    """Depth of one pixel, computed ray by ray without the vectorized path (test oracle)."""
    o = pose.origin
    d = pose.pixel_direction(row, col)
    best = (scene.ground_height - o[2]) / d[2] if d[2] < 0 else math.inf
    for box in scene.boxes:
        lo, hi = box.lo, box.hi
        tn, tf = -math.inf, math.inf
        ok = True
        for a in range(3):
            if d[a] == 0:
                if not lo[a] <= o[a] <= hi[a]:
                    ok = False
                continue
            t1, t2 = (lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]
            tn, tf = max(tn, min(t1, t2)), min(tf, max(t1, t2))
        if ok and tn <= tf and tf > 0:
            best = min(best, max(tn, 0.0))
    return scene.max_range if math.isinf(best) else best


# -- episodes -------------------------------------------------------------------

@dataclass
class Episode:
    frames: np.ndarray  # T x 3 x H x W uint8
    depths: np.ndarray  # T x H x W uint8
    poses: list[CameraPose]
    episode_id: int = 0
    scene: Scene | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.depths) or len(self.frames) != len(self.poses):
            raise DatasetIntegrityError("frames, depths and poses must be index-aligned")
        if self.frames.shape[2:] != self.depths.shape[1:]:
            raise DatasetIntegrityError("frame and depth sizes differ")

    def __len__(self):
        return len(self.frames)


def generate_episode(scene: Scene, trajectory, rng=None, episode_id=0) -> Episode:
    """Render every pose of ``trajectory``."""
    if len(trajectory) < 1:
        raise InvalidConfigError("trajectory needs at least one pose")
    frames, depths = [], []
    for pose in trajectory:
        rgb, z = render_frame(scene, pose)
        frames.append(rgb)
        depths.append(quantize_depth(z, scene.max_range))
    return Episode(np.stack(frames), np.stack(depths), list(trajectory), episode_id, scene)


@dataclass
class CameraRig:
    """Camera intrinsics and mounting shared by the generator and the simulator."""
    altitude: float = 3.0
    fov: float = math.pi / 2
    height: int = 32
    width: int = 32
    step: float = 0.5  # metres per frame

    def pose(self, x, y, yaw):
        return CameraPose(x, y, self.altitude, yaw, 0.0, self.fov, self.height, self.width)


def straight_trajectory(rig, x, y, yaw, n):
    return [rig.pose(x + i * rig.step * math.cos(yaw), y + i * rig.step * math.sin(yaw), yaw)
            for i in range(n)]


def arc_trajectory(rig, x, y, yaw, n, yaw_rate):
    poses = []
    for _ in range(n):
        poses.append(rig.pose(x, y, yaw))
        x += rig.step * math.cos(yaw)
        y += rig.step * math.sin(yaw)
        yaw += yaw_rate
    return poses


def yaw_walk_trajectory(rig, x, y, yaw, n, rng, max_rate=0.12, jitter=0.03):
    poses, rate = [], 0.0
    for _ in range(n):
        poses.append(rig.pose(x, y, yaw))
        x += rig.step * math.cos(yaw)
        y += rig.step * math.sin(yaw)
        rate = float(np.clip(rate + rng.normal(0, jitter), -max_rate, max_rate))
        yaw += rate
    return poses


def approach_turn_trajectory(rig, x, y, yaw, n, rng, turn_step=math.radians(15)):
    """Forward runs broken by in-place turns, like an avoidance manoeuvre."""
    poses = []
    while len(poses) < n:
        for _ in range(int(rng.integers(8, 20))):
            poses.append(rig.pose(x, y, yaw))
            x += rig.step * math.cos(yaw)
            y += rig.step * math.sin(yaw)
        sign = 1 if rng.random() < 0.5 else -1
        for _ in range(int(rng.integers(2, 6))):
            poses.append(rig.pose(x, y, yaw))
            yaw += sign * turn_step
    return poses[:n]


TRAJECTORY_KINDS = ("straight", "arc", "yaw_walk", "approach_turn")


def random_trajectory(rig, rng, n, kind=None):
    kind = kind or TRAJECTORY_KINDS[int(rng.integers(len(TRAJECTORY_KINDS)))]
    yaw = float(rng.uniform(0, 2 * math.pi))
    if kind == "straight":
        return kind, straight_trajectory(rig, 0.0, 0.0, yaw, n)
    if kind == "arc":
        return kind, arc_trajectory(rig, 0.0, 0.0, yaw, n, float(rng.uniform(-0.06, 0.06)))
    if kind == "yaw_walk":
        return kind, yaw_walk_trajectory(rig, 0.0, 0.0, yaw, n, rng)
    if kind == "approach_turn":
        return kind, approach_turn_trajectory(rig, 0.0, 0.0, yaw, n, rng)
    raise InvalidConfigError(f"unknown trajectory kind {kind!r}")


def random_box_field(rng, trajectory, n_boxes=40, clearance=1.0, spread=14.0,
                     min_side=0.6, max_side=3.0, max_height=5.0, max_range=50.0):
    """Scatter boxes around a trajectory, keeping ``clearance`` metres free along the path.

    Footprint sides stay below ``max_side`` so no box is car-shaped.
    """
    xs = np.array([p.x for p in trajectory])
    ys = np.array([p.y for p in trajectory])
    boxes = []
    tries = 0
    while len(boxes) < n_boxes and tries < n_boxes * 20:
        tries += 1
        k = int(rng.integers(len(trajectory)))
        # place boxes ahead of the path as well as beside it
        ahead = float(rng.uniform(0, 12))
        yaw = trajectory[k].yaw
        cx = xs[k] + ahead * math.cos(yaw) + float(rng.normal(0, spread / 3))
        cy = ys[k] + ahead * math.sin(yaw) + float(rng.normal(0, spread / 3))
        sx, sy = rng.uniform(min_side, max_side, size=2)
        h = float(rng.uniform(0.5, max_height))
        albedo = tuple(float(c) for c in rng.uniform(0.15, 0.95, size=3))
        box = Box.on_ground(float(cx), float(cy), float(sx), float(sy), h, albedo)
        if min(box.footprint_distance(px, py) for px, py in zip(xs, ys)) < clearance:
            continue
        boxes.append(box)
    return Scene(boxes=boxes, max_range=max_range)


@dataclass
class GeneratorConfig:
    n_train: int = 24
    n_test: int = 6
    frames: int = 96
    height: int = 32
    width: int = 32
    altitude: float = 3.0
    fov_deg: float = 90.0
    max_range: float = 50.0
    n_boxes: int = 40
    val_fraction: float = 0.2
    seed: int = 0

    def rig(self):
        return CameraRig(self.altitude, math.radians(self.fov_deg), self.height, self.width)


def make_episode(cfg: GeneratorConfig, episode_id, kind=None):
    """Deterministic in (cfg.seed, episode_id)."""
    rng = np.random.default_rng([cfg.seed, episode_id])
    rig = cfg.rig()
    kind, traj = random_trajectory(rig, rng, cfg.frames, kind)
    scene = random_box_field(rng, traj, cfg.n_boxes, max_range=cfg.max_range)
    ep = generate_episode(scene, traj, rng, episode_id)
    return ep, kind


def generate_dataset(cfg: GeneratorConfig):
    """Episodes plus split labels: the first ``n_train`` form the training pool
    (split train/val at episode level), the rest are the held-out test set."""
    episodes, splits, kinds = [], [], []
    n_val = int(round(cfg.n_train * cfg.val_fraction))
    for i in range(cfg.n_train + cfg.n_test):
        ep, kind = make_episode(cfg, i)
        episodes.append(ep)
        kinds.append(kind)
        if i >= cfg.n_train:
            splits.append("test")
        elif i >= cfg.n_train - n_val:
            splits.append("val")
        else:
            splits.append("train")
    return episodes, splits, kinds


# -- PPM / PGM ---------------------------------------------------------------------

def write_pnm(path, img):
    """Binary P6 for 3 x H x W uint8, P5 for H x W uint8 (maxval 255)."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError("only 8-bit images are supported")
    if img.ndim == 3 and img.shape[0] == 3:
        magic, h, w = b"P6", img.shape[1], img.shape[2]
        body = np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes()
    elif img.ndim == 2:
        magic, (h, w) = b"P5", img.shape
        body = img.tobytes()
    else:
        raise ImageFormatError(f"cannot write image of shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h) + body)


def _tokens(data, count, pos):
    out = []
    while len(out) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pnm(path):
    """Read a binary P6/P5 file written with maxval 255."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic number {magic!r}")
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported")
    ch = 3 if magic == b"P6" else 1
    body = data[pos:]
    if len(body) < w * h * ch:
        raise ImageFormatError(f"{path}: pixel data truncated")
    arr = np.frombuffer(body, dtype=np.uint8, count=w * h * ch)
    if ch == 3:
        return arr.reshape(h, w, 3).transpose(2, 0, 1).copy()
    return arr.reshape(h, w).copy()


# -- dataset on disk -------------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    manifest: dict
    episodes: list[Episode]

    def split(self, name):
        return [ep for ep, e in zip(self.episodes, self.manifest["episodes"]) if e["split"] == name]


def _pose_dict(p: CameraPose):
    return asdict(p)


def write_dataset(episodes, path, splits=None, extra=None):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    splits = splits or ["train"] * len(episodes)
    h, w = episodes[0].frames.shape[2:]
    entries = []
    for ep, split in zip(episodes, splits):
        d = root / f"episode_{ep.episode_id:04d}"
        d.mkdir(exist_ok=True)
        for i, (rgb, depth) in enumerate(zip(ep.frames, ep.depths)):
            write_pnm(d / f"frame_{i:05d}.ppm", rgb)
            write_pnm(d / f"depth_{i:05d}.pgm", depth)
        (d / "poses.json").write_text(json.dumps([_pose_dict(p) for p in ep.poses]))
        entries.append({"id": ep.episode_id, "dir": d.name, "frames": len(ep), "split": split})
    max_range = episodes[0].scene.max_range if episodes[0].scene else 50.0
    manifest = {"format_version": DATASET_VERSION, "height": int(h), "width": int(w),
                "max_range": max_range, "layout": "channels-first", "episodes": entries}
    if extra:
        manifest["generator"] = extra
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetIntegrityError(f"{root}: missing manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise DatasetIntegrityError(f"{root}: unsupported dataset version {manifest.get('format_version')}")
    h, w = manifest["height"], manifest["width"]
    episodes = []
    for entry in manifest["episodes"]:
        d = root / entry["dir"]
        n = entry["frames"]
        on_disk = len(list(d.glob("frame_*.ppm")))
        if on_disk != n or len(list(d.glob("depth_*.pgm"))) != n:
            raise DatasetIntegrityError(f"{d}: manifest lists {n} frames, found {on_disk} on disk")
        frames, depths = [], []
        for i in range(n):
            rgb = read_pnm(d / f"frame_{i:05d}.ppm")
            dep = read_pnm(d / f"depth_{i:05d}.pgm")
            if rgb.shape != (3, h, w) or dep.shape != (h, w):
                raise DatasetIntegrityError(f"{d} frame {i}: size differs from manifest {h}x{w}")
            frames.append(rgb)
            depths.append(dep)
        poses = [CameraPose(**p) for p in json.loads((d / "poses.json").read_text())]
        episodes.append(Episode(np.stack(frames), np.stack(depths), poses, entry["id"]))
    return Dataset(root, manifest, episodes)
