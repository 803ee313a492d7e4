"""``scene.cfg`` parsing.

The format is line oriented::

    format_version = 1.0
    [scene]
    frames = 24
    [camera]
    fx = 120
    [object box]
    shape = box
    center = -0.8, 0, 3
    motion = rigid-translation
    velocity = 0.04, 0, 0

``#`` starts a comment. Vectors are comma separated. Every error carries the
offending line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..errors import InvalidConfig

CONFIG_FORMAT_VERSION = "1.0"
SHAPES = ("box", "plane")
MOTIONS = ("static", "rigid-translation", "rigid-rotation", "screw")


@dataclass
class ObjectConfig:
    name: str
    shape: str = "box"
    center: Tuple[float, float, float] = (0.0, 0.0, 3.0)
    size: Tuple[float, ...] = (1.0, 1.0, 1.0)
    motion: str = "static"
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    angular_speed: float = 0.0
    axial_speed: float = 0.0
    primitives: int = 500
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    primitive_scale: float = 0.02

    @property
    def dynamic(self) -> bool:
        return self.motion != "static"


@dataclass
class SceneConfig:
    frames: int = 24
    patch_size: int = 8
    token_dim: int = 32
    tracklets: int = 800
    patch_frames: Tuple[int, ...] = (0, 5, 9, 14, 18, 23)
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 80.0
    cy: float = 60.0
    camera_translation_per_frame: Tuple[float, float, float] = (0.005, 0.0, 0.0)
    camera_yaw_per_frame: float = 0.0
    tracklet_pixel_noise: float = 0.0
    tracklet_depth_noise: float = 0.0
    depth_noise: float = 0.0
    token_static_noise: float = 0.01
    token_motion_scale: float = 2.5
    token_patch_noise: float = 0.005
    prior_softness: float = 0.0
    objects: List[ObjectConfig] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data)
        objects = [ObjectConfig(**_tupled(o)) for o in data.pop("objects", [])]
        return cls(objects=objects, **_tupled(data))


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# section -> key -> (SceneConfig attribute, kind)
_GLOBAL_KEYS = {
    "scene": {
        "frames": ("frames", "int"),
        "patch_size": ("patch_size", "int"),
        "token_dim": ("token_dim", "int"),
        "tracklets": ("tracklets", "int"),
        "patch_frames": ("patch_frames", "ints"),
    },
    "camera": {
        "width": ("width", "int"),
        "height": ("height", "int"),
        "fx": ("fx", "float"),
        "fy": ("fy", "float"),
        "cx": ("cx", "float"),
        "cy": ("cy", "float"),
        "translation_per_frame": ("camera_translation_per_frame", "vec3"),
        "yaw_per_frame": ("camera_yaw_per_frame", "float"),
    },
    "noise": {
        "tracklet_pixel": ("tracklet_pixel_noise", "float"),
        "tracklet_depth": ("tracklet_depth_noise", "float"),
        "depth": ("depth_noise", "float"),
        "token_static": ("token_static_noise", "float"),
        "token_motion_scale": ("token_motion_scale", "float"),
        "token_patch": ("token_patch_noise", "float"),
        "prior_softness": ("prior_softness", "float"),
    },
}

_OBJECT_KEYS = {
    "shape": "str",
    "center": "vec3",
    "size": "floats",
    "motion": "str",
    "velocity": "vec3",
    "axis": "vec3",
    "angular_speed": "float",
    "axial_speed": "float",
    "primitives": "int",
    "color": "vec3",
    "primitive_scale": "float",
}


def _convert(kind: str, raw: str, line: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw.strip()
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if kind == "ints":
            return tuple(int(p) for p in parts)
        values = tuple(float(p) for p in parts)
        if kind == "vec3" and len(values) != 3:
            raise InvalidConfig(f"expected 3 comma-separated numbers, got {len(values)}", line)
        return values
    except ValueError as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise InvalidConfig(f"cannot parse {raw!r} as {kind}", line) from None


def parse_scene_config(text: str, path: Optional[str] = None) -> SceneConfig:
    cfg = SceneConfig()
    objects: List[ObjectConfig] = []
    object_lines: Dict[str, int] = {}
    section: Optional[str] = None
    current: Optional[ObjectConfig] = None
    seen_version = False
    try:
        for lineno, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise InvalidConfig("unterminated section header", lineno)
                header = line[1:-1].split()
                if len(header) == 2 and header[0] == "object":
                    name = header[1]
                    if name in object_lines:
                        raise InvalidConfig(f"duplicate object {name!r}", lineno)
                    current = ObjectConfig(name=name)
                    objects.append(current)
                    object_lines[name] = lineno
                    section = "object"
                elif len(header) == 1 and header[0] in _GLOBAL_KEYS:
                    section = header[0]
                    current = None
                else:
                    raise InvalidConfig(f"unknown section {line}", lineno)
                continue
            if "=" not in line:
                raise InvalidConfig(f"expected 'key = value', got {line!r}", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if section is None:
                if key != "format_version":
                    raise InvalidConfig(f"key {key!r} outside any section", lineno)
                check_version(value, CONFIG_FORMAT_VERSION, lineno)
                seen_version = True
            elif section == "object":
                if key not in _OBJECT_KEYS:
                    raise InvalidConfig(f"unknown object key {key!r}", lineno)
                setattr(current, key, _convert(_OBJECT_KEYS[key], value, lineno))
                _validate_object_key(current, key, lineno)
            else:
                if key not in _GLOBAL_KEYS[section]:
                    raise InvalidConfig(f"unknown key {key!r} in [{section}]", lineno)
                attr, kind = _GLOBAL_KEYS[section][key]
                setattr(cfg, attr, _convert(kind, value, lineno))
        if not seen_version:
            raise InvalidConfig("missing format_version", 1)
        cfg.objects = objects
        validate_scene_config(cfg, object_lines)
    except InvalidConfig as exc:
        if path is not None and exc.path is None:
            raise InvalidConfig(exc.message, exc.line, path) from None
        raise
    return cfg


def _validate_object_key(obj: ObjectConfig, key: str, line: int):
    if key == "shape" and obj.shape not in SHAPES:
        raise InvalidConfig(f"shape must be one of {SHAPES}", line)
    if key == "motion" and obj.motion not in MOTIONS:
        raise InvalidConfig(f"motion must be one of {MOTIONS}", line)
    if key == "primitives" and obj.primitives < 1:
        raise InvalidConfig("primitives must be positive", line)
    if key == "primitive_scale" and obj.primitive_scale <= 0:
        raise InvalidConfig("primitive_scale must be positive", line)
    if key == "color" and not all(0.0 <= c <= 1.0 for c in obj.color):
        raise InvalidConfig("color channels must lie in [0, 1]", line)


def validate_scene_config(cfg: SceneConfig, object_lines: Optional[Dict[str, int]] = None):
    lines = object_lines or {}
    if cfg.frames < 2:
        raise InvalidConfig("frames must be at least 2")
    if cfg.patch_size < 1 or cfg.token_dim < 2 or cfg.tracklets < 0:
        raise InvalidConfig("patch_size, token_dim and tracklets must be positive")
    if cfg.width < cfg.patch_size or cfg.height < cfg.patch_size:
        raise InvalidConfig("image smaller than one patch")
    if cfg.fx <= 0 or cfg.fy <= 0:
        raise InvalidConfig("focal lengths must be positive")
    if any(f < 0 or f >= cfg.frames for f in cfg.patch_frames) or not cfg.patch_frames:
        raise InvalidConfig("patch_frames must be frame indices within the clip")
    if list(cfg.patch_frames) != sorted(set(cfg.patch_frames)):
        raise InvalidConfig("patch_frames must be strictly increasing")
    noise = [
        cfg.tracklet_pixel_noise,
        cfg.tracklet_depth_noise,
        cfg.depth_noise,
        cfg.token_static_noise,
        cfg.token_motion_scale,
        cfg.token_patch_noise,
    ]
    if any(n < 0 for n in noise) or not 0.0 <= cfg.prior_softness <= 0.5:
        raise InvalidConfig("noise levels must be nonnegative, prior_softness in [0, 0.5]")
    if not cfg.objects:
        raise InvalidConfig("scene needs at least one [object NAME] section")
    for obj in cfg.objects:
        line = lines.get(obj.name)
        if obj.shape == "box" and len(obj.size) != 3:
            raise InvalidConfig(f"box {obj.name!r} needs a 3-component size", line)
        if obj.shape == "plane" and len(obj.size) != 2:
            raise InvalidConfig(f"plane {obj.name!r} needs a 2-component size", line)
        if any(s <= 0 for s in obj.size):
            raise InvalidConfig(f"object {obj.name!r} has a non-positive size", line)
        if obj.motion in ("rigid-rotation", "screw") and sum(a * a for a in obj.axis) == 0.0:
            raise InvalidConfig(f"object {obj.name!r} needs a nonzero rotation axis", line)


def check_version(value: str, supported: str, line: Optional[int] = None):
    major = str(value).strip().split(".")[0]
    if major != supported.split(".")[0]:
        raise InvalidConfig(f"unsupported format_version {value!r} (supported {supported})", line)


def load_scene_config(path) -> SceneConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config: {exc}", None, str(path)) from None
    return parse_scene_config(text, str(path))
