"""Synthetic RGB-D scenes: raycast cuboid rooms with Lambertian shading.

World frame is y-up; the camera sits inside an axis-aligned room and rays are
parameterized so the intersection parameter equals camera-forward z-depth,
which keeps generated depth maps consistent with pinhole backprojection.
Furniture cuboids are placed either in world coordinates (with seeded jitter)
or camera-relative as thin "facing" slabs; the latter mode can scale world
size proportionally to depth so the on-screen size distribution carries no
depth information. That is what makes the color-twin task honest: two classes
share an albedo and a screen-size distribution and differ only in depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import RgbdSample
from .hha import DepthImage, default_intrinsics

log = logging.getLogger(__name__)

_EPS = 1e-6


@dataclass
class Cuboid:
    class_name: str
    albedo: tuple
    mode: str = "world"              # "world" | "facing"
    center: tuple = (0.0, 0.0, 0.0)  # world mode; y ignored when on_floor
    center_jitter: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.5, 0.5, 0.5)
    size_jitter: tuple = (0.0, 0.0, 0.0)
    on_floor: bool = True
    depth_range: tuple = (1.5, 2.5)  # facing mode: camera-z placement
    lateral_frac: float = 0.45       # fraction of the frustum half-extent
    vertical_frac: float = 0.18
    vertical_bias: float = 0.0       # frustum fraction above the optical axis
    depth_scaled: bool = False       # world size grows with depth
    depth_ref: float = 2.0
    thickness: float = 0.06
    alt_group: str = ""              # cuboids sharing a group: one appears per scene


@dataclass
class SyntheticSceneSpec:
    name: str
    image_size: int
    classes: list
    room: tuple                      # (width, height, length), meters
    wall_albedo: tuple
    floor_albedo: tuple
    ceiling_albedo: tuple
    furniture: list = field(default_factory=list)
    light_dir: tuple = (0.4, 0.8, -0.45)  # unit-ish direction toward the light
    ambient: float = 0.35
    diffuse: float = 0.65
    noise_depth: float = 0.0
    noise_rgb: float = 0.0
    fov_deg: float = 60.0
    cam_height: float = 1.4
    cam_height_jitter: float = 0.1
    cam_yaw_deg: float = 0.0
    cam_yaw_jitter_deg: float = 0.0
    cam_pitch_deg: float = 0.0
    cam_pitch_jitter_deg: float = 0.0
    cam_xz: tuple | None = None      # default: centered in x, 0.5 m from the front
    cam_xz_jitter: tuple = (0.25, 0.25)

    def validate(self):
        w, h, l = self.room
        if min(w, h, l) <= 0.5:
            raise ValueError(f"room {self.room} too small to hold a camera")
        x, z = self.cam_xz if self.cam_xz else (w / 2.0, 0.5)
        if not (0 < x < w and 0 < z < l and 0 < self.cam_height < h):
            raise ValueError("camera base position lies outside the room")
        for c in self.furniture:
            if c.class_name not in self.classes:
                raise ValueError(f"furniture class {c.class_name!r} not in class list")
        for name in ("wall", "floor", "ceiling"):
            if name not in self.classes:
                raise ValueError(f"class list must contain {name!r}")


def _camera_basis(yaw_deg, pitch_deg):
    yaw, pitch = np.radians(yaw_deg), np.radians(pitch_deg)
    forward = np.array([np.sin(yaw) * np.cos(pitch), -np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    right = np.array([np.cos(yaw), 0.0, -np.sin(yaw)])
    down = np.cross(right, forward)
    return forward, right, down


def _plane_hit(origin, dirs, axis, value):
    d = dirs[..., axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (value - origin[axis]) / d
    return np.where((np.abs(d) > _EPS) & (s > _EPS), s, np.inf)


def _aabb_hit(origin, dirs, lo, hi):
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > _EPS)
    s = np.where(hit, near, np.inf)
    enter_axis = tmin.argmax(axis=-1)
    normals = np.zeros(dirs.shape)
    for a in range(3):
        m = enter_axis == a
        normals[m, a] = -np.sign(dirs[m, a])
    return s, normals


def _materialize_facing(cub, rng, cam_pos, forward, right, room, fov_deg, placed_rects, fx):
    half_tan = np.tan(np.radians(fov_deg) / 2.0)
    w_room, h_room, l_room = room
    for _ in range(40):
        z = rng.uniform(*cub.depth_range)
        scale = (z / cub.depth_ref) if cub.depth_scaled else 1.0
        u = rng.uniform(0.8, 1.2)
        sw = cub.size[0] * scale * u
        sh = cub.size[1] * scale * u
        x_off = rng.uniform(-1, 1) * cub.lateral_frac * z * half_tan
        # both jitter and bias scale with depth, so screen position stays
        # identically distributed across depth ranges (no positional cue)
        y_off = (rng.uniform(-1, 1) * cub.vertical_frac - cub.vertical_bias) * z * half_tan
        center = cam_pos + forward * z + right * x_off + np.array([0.0, -1.0, 0.0]) * y_off
        center[0] = np.clip(center[0], sw / 2 + 0.05, w_room - sw / 2 - 0.05)
        center[1] = np.clip(center[1], sh / 2 + 0.05, h_room - sh / 2 - 0.05)
        center[2] = np.clip(center[2], 0.1, l_room - 0.1)
        # approximate screen rect for the overlap rejection
        su = fx * sw / z
        sv = fx * sh / z
        cu = fx * x_off / z
        cv = fx * y_off / z
        rect = (cu - su / 2, cu + su / 2, cv - sv / 2, cv + sv / 2)
        pad = 2.0
        clash = any(not (rect[1] + pad < r[0] or r[1] + pad < rect[0]
                         or rect[3] + pad < r[2] or r[3] + pad < rect[2])
                    for r in placed_rects)
        if not clash:
            placed_rects.append(rect)
            break
    lo = center - np.array([sw / 2, sh / 2, cub.thickness / 2])
    hi = center + np.array([sw / 2, sh / 2, cub.thickness / 2])
    return lo, hi


def _materialize_world(cub, rng, room):
    size = np.array(cub.size) + rng.uniform(-1, 1, 3) * np.array(cub.size_jitter)
    size = np.maximum(size, 0.05)
    center = np.array(cub.center, dtype=float) + rng.uniform(-1, 1, 3) * np.array(cub.center_jitter)
    if cub.on_floor:
        center[1] = size[1] / 2.0
    w_room, h_room, l_room = room
    center[0] = np.clip(center[0], size[0] / 2 + 0.05, w_room - size[0] / 2 - 0.05)
    center[1] = np.clip(center[1], size[1] / 2, h_room - size[1] / 2 - 0.05)
    center[2] = np.clip(center[2], size[2] / 2 + 0.05, l_room - size[2] / 2 - 0.05)
    return center - size / 2, center + size / 2


def generate_scene(spec, seed):
    """Render one RgbdSample; a pure function of (spec, seed)."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    n = spec.image_size
    w_room, h_room, l_room = spec.room

    base_x, base_z = spec.cam_xz if spec.cam_xz else (w_room / 2.0, 0.5)
    jx, jz = spec.cam_xz_jitter
    cam = np.array([
        np.clip(base_x + rng.uniform(-jx, jx), 0.2, w_room - 0.2),
        np.clip(spec.cam_height + rng.uniform(-1, 1) * spec.cam_height_jitter,
                0.2, h_room - 0.2),
        np.clip(base_z + rng.uniform(-jz, jz), 0.2, l_room - 0.2),
    ])
    yaw = spec.cam_yaw_deg + rng.uniform(-1, 1) * spec.cam_yaw_jitter_deg
    pitch = spec.cam_pitch_deg + rng.uniform(-1, 1) * spec.cam_pitch_jitter_deg
    forward, right, down = _camera_basis(yaw, pitch)

    fx, fy, cx, cy = default_intrinsics(n, n, spec.fov_deg)
    uu = (np.arange(n)[None, :] - cx) / fx
    vv = (np.arange(n)[:, None] - cy) / fy
    dirs = (right[None, None] * uu[..., None]
            + down[None, None] * vv[..., None]
            + forward[None, None])

    cls_index = {name: i for i, name in enumerate(spec.classes)}
    best_s = np.full((n, n), np.inf)
    best_class = np.zeros((n, n), dtype=np.uint8)
    best_normal = np.zeros((n, n, 3))
    best_albedo = np.zeros((n, n, 3))

    def consider(s, normal, class_name, albedo):
        closer = s < best_s
        best_s[closer] = s[closer]
        best_class[closer] = cls_index[class_name]
        if normal.ndim == 1:
            best_normal[closer] = normal
        else:
            best_normal[closer] = normal[closer]
        best_albedo[closer] = albedo

    room_faces = [
        (1, 0.0, "floor", np.array([0.0, 1.0, 0.0]), spec.floor_albedo),
        (1, h_room, "ceiling", np.array([0.0, -1.0, 0.0]), spec.ceiling_albedo),
        (0, 0.0, "wall", np.array([1.0, 0.0, 0.0]), spec.wall_albedo),
        (0, w_room, "wall", np.array([-1.0, 0.0, 0.0]), spec.wall_albedo),
        (2, 0.0, "wall", np.array([0.0, 0.0, 1.0]), spec.wall_albedo),
        (2, l_room, "wall", np.array([0.0, 0.0, -1.0]), spec.wall_albedo),
    ]
    for axis, value, cname, normal, albedo in room_faces:
        consider(_plane_hit(cam, dirs, axis, value), normal, cname, albedo)

    chosen = []
    groups = {}
    for cub in spec.furniture:
        if not cub.alt_group:
            chosen.append(cub)
        else:
            groups.setdefault(cub.alt_group, []).append(cub)
    for members in groups.values():
        chosen.append(members[int(rng.integers(len(members)))])

    placed_rects = []
    for cub in chosen:
        if cub.mode == "facing":
            lo, hi = _materialize_facing(cub, rng, cam, forward, right, spec.room,
                                         spec.fov_deg, placed_rects, fx)
        else:
            lo, hi = _materialize_world(cub, rng, spec.room)
        s, normals = _aabb_hit(cam, dirs, lo, hi)
        consider(s, normals, cub.class_name, cub.albedo)

    if not np.isfinite(best_s).all():
        raise ValueError("degenerate camera: some rays escape the room")

    facing = np.einsum("hwc,hwc->hw", best_normal, dirs)
    best_normal[facing > 0] *= -1.0
    light = np.array(spec.light_dir, dtype=float)
    light = light / np.linalg.norm(light)
    brightness = spec.ambient + spec.diffuse * np.clip(best_normal @ light, 0.0, None)
    rgb = best_albedo * brightness[..., None]

    depth = best_s.copy()
    if spec.noise_depth > 0:
        depth = np.maximum(depth + rng.normal(0.0, spec.noise_depth, depth.shape), 0.01)
    if spec.noise_rgb > 0:
        rgb = rgb + rng.normal(0.0, spec.noise_rgb, rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    return RgbdSample(
        id=f"{spec.name}-{seed:08d}",
        rgb=rgb.transpose(2, 0, 1),
        depth=DepthImage(depth, fx, fy, cx, cy),
        labels=best_class,
    )


# ---------------------------------------------------------------------------
# presets

def basic_scene_spec(image_size=64, noise_depth=0.01, noise_rgb=0.02):
    return SyntheticSceneSpec(
        name="basic",
        image_size=image_size,
        classes=["wall", "floor", "ceiling", "table", "chair", "bed"],
        room=(4.4, 2.6, 5.0),
        wall_albedo=(0.75, 0.72, 0.62),
        floor_albedo=(0.45, 0.33, 0.22),
        ceiling_albedo=(0.86, 0.86, 0.9),
        furniture=[
            Cuboid("table", (0.55, 0.35, 0.16), center=(1.4, 0, 2.6), size=(0.9, 0.75, 0.9),
                   center_jitter=(0.7, 0, 0.8), size_jitter=(0.2, 0.1, 0.2)),
            Cuboid("chair", (0.2, 0.32, 0.62), center=(3.0, 0, 2.1), size=(0.48, 0.55, 0.48),
                   center_jitter=(0.7, 0, 0.7), size_jitter=(0.08, 0.1, 0.08)),
            Cuboid("bed", (0.62, 0.15, 0.2), center=(3.2, 0, 3.9), size=(1.5, 0.5, 2.0),
                   center_jitter=(0.6, 0, 0.6), size_jitter=(0.2, 0.08, 0.3)),
        ],
        light_dir=(0.4, 0.8, -0.45),
        noise_depth=noise_depth,
        noise_rgb=noise_rgb,
        cam_pitch_deg=4.0,
        cam_pitch_jitter_deg=3.0,
        cam_yaw_jitter_deg=8.0,
    )


def color_twin_scene_spec(image_size=64, noise_depth=0.01, noise_rgb=0.02):
    """Two slab classes share an albedo and screen statistics; only depth separates them.

    Exactly one slab appears per scene (seeded alternation), so occlusion
    order can never hint at depth; sizes scale with depth (matched screen-size
    distributions) and the depth ranges sit far apart so the disparity channel
    separates the classes decisively.
    """
    shared = (0.8, 0.28, 0.72)
    near = Cuboid("panel_near", shared, mode="facing", size=(0.59, 0.42, 0.0),
                  depth_range=(0.8, 1.3), depth_scaled=True, depth_ref=1.05,
                  lateral_frac=0.35, vertical_frac=0.1, alt_group="twin")
    far = Cuboid("panel_far", shared, mode="facing", size=(2.2, 1.55, 0.0),
                 depth_range=(3.3, 4.5), depth_scaled=True, depth_ref=3.9,
                 lateral_frac=0.35, vertical_frac=0.1, alt_group="twin")
    return SyntheticSceneSpec(
        name="color_twin",
        image_size=image_size,
        classes=["wall", "floor", "ceiling", "panel_near", "panel_far"],
        room=(4.4, 3.0, 5.2),
        wall_albedo=(0.75, 0.72, 0.62),
        floor_albedo=(0.45, 0.33, 0.22),
        ceiling_albedo=(0.86, 0.86, 0.9),
        furniture=[near, far],
        light_dir=(0.7, 0.0, -0.7),  # horizontal: slab shading independent of depth
        ambient=0.4,
        diffuse=0.6,
        noise_depth=noise_depth,
        noise_rgb=noise_rgb,
        cam_pitch_jitter_deg=2.0,
    )


def layout_twin_scene_spec(image_size=64, noise_depth=0.35, noise_rgb=0.02):
    """Floor and ceiling share an albedo under a horizontal light; heavy depth
    noise closes the local surface-orientation shortcut, so only layout context
    can tell them apart."""
    twin = (0.62, 0.62, 0.6)
    return SyntheticSceneSpec(
        name="layout_twin",
        image_size=image_size,
        classes=["wall", "floor", "ceiling", "table", "chair", "bed"],
        room=(4.4, 2.7, 6.0),
        wall_albedo=(0.3, 0.45, 0.65),
        floor_albedo=twin,
        ceiling_albedo=twin,
        furniture=[
            Cuboid("table", (0.55, 0.35, 0.16), center=(1.3, 0, 2.8), size=(0.85, 0.72, 0.85),
                   center_jitter=(0.7, 0, 0.9), size_jitter=(0.15, 0.1, 0.15)),
            Cuboid("chair", (0.75, 0.6, 0.15), center=(3.1, 0, 2.3), size=(0.48, 0.55, 0.48),
                   center_jitter=(0.7, 0, 0.8), size_jitter=(0.08, 0.1, 0.08)),
            Cuboid("bed", (0.62, 0.15, 0.2), center=(3.2, 0, 4.3), size=(1.5, 0.5, 2.0),
                   center_jitter=(0.6, 0, 0.7), size_jitter=(0.2, 0.08, 0.3)),
        ],
        light_dir=(0.75, 0.0, -0.66),  # no vertical component: twins shade identically
        ambient=0.45,
        diffuse=0.55,
        noise_depth=noise_depth,
        noise_rgb=noise_rgb,
        cam_height=1.35,
        cam_height_jitter=0.25,
        cam_pitch_jitter_deg=9.0,
        cam_yaw_jitter_deg=6.0,
    )


PRESETS = {
    "basic": basic_scene_spec,
    "color_twin": color_twin_scene_spec,
    "layout_twin": layout_twin_scene_spec,
}

_SCENE_KEYS = {
    "kind": str,
    "image_size": int,
    "noise_depth": float,
    "noise_rgb": float,
    "fov_deg": float,
    "cam_pitch_deg": float,
    "cam_pitch_jitter_deg": float,
    "cam_yaw_jitter_deg": float,
    "cam_height": float,
    "cam_height_jitter": float,
}


def load_scene_spec(path):
    """Parse a flat ``scene.key = value`` file into a preset-based spec."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'scene.key = value'")
        key, _, val = (p.strip() for p in line.partition("="))
        if not key.startswith("scene."):
            raise ValueError(f"{path}:{lineno}: unknown section in {key!r}")
        short = key[len("scene."):]
        if short not in _SCENE_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown scene key {short!r}")
        values[short] = _SCENE_KEYS[short](val)
    kind = values.pop("kind", "basic")
    if kind not in PRESETS:
        raise ValueError(f"unknown scene kind {kind!r}; have {sorted(PRESETS)}")
    build_kwargs = {k: values.pop(k) for k in ("image_size", "noise_depth", "noise_rgb")
                    if k in values}
    spec = PRESETS[kind](**build_kwargs)
    return replace(spec, **values) if values else spec
