#!/usr/bin/env python3
"""
Synthetic Ego/Exo Scene Generator
=================================

Builds temporally aligned ego/exo view pairs from one analytic 2-D scene so
every mask is exact. A scene lives on a 96x96 world canvas; a view is a
similarity transform sampled at 64x64 pixel centres.

Key Features:
1. Five shape categories built as shapely geometries (disc, square, triangle, bar, ring)
2. Exo view = whole canvas downscaled; ego view = zoomed, rotated, jittered crop
   around the target object
3. Optional per-view occluder that hides the target and flips its visibility
4. Same-category distractors to create look-alike confusions
5. Noisy class-index text condition standing in for generated descriptions
6. Smooth pose drift across the frames of a sequence

All randomness comes from the numpy Generator passed in, so a sequence seeded
from (seed, sequence_id) renders identically in any process or thread.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import shapely
from shapely import affinity
from shapely.geometry import LineString, Point, Polygon, box
from shapely.ops import unary_union

from function.compute_mask.masks import BinaryMask
from function.errors import ConfigError, GenerationError

logger = logging.getLogger(__name__)

CATEGORIES = ("disc", "square", "triangle", "bar", "ring")

DEFAULT_GENERATOR_CONFIG: Dict[str, Any] = {
    'canvas_size': 96,                    # world canvas, pixels
    'image_size': 64,                     # rendered view, pixels
    'num_categories': 5,                  # K
    'min_objects': 3,
    'max_objects': 6,
    'min_size': 6.0,                      # object half-extent, world pixels
    'max_size': 12.0,
    'distractor_same_category_p': 0.3,    # force a look-alike of the target
    'min_clutter': 4,
    'max_clutter': 8,
    'ego_zoom_range': [1.5, 3.0],         # magnification relative to the exo view
    'ego_rotation_deg': 25.0,             # +/- range
    'ego_jitter_px': 4.0,                 # crop centre offset from the target, world pixels
    'brightness_jitter': 0.15,            # +/- added to the ego image
    'occlusion_p': 0.15,
    'text_noise_p': 0.2,
    'sequence_length': 8,
    'drift_translation_px': 2.0,          # per frame
    'drift_rotation_deg': 3.0,            # per frame
    'placement_retries': 200,
    'edge_margin': 3.0,
    'min_gap': 1.5,                       # minimum distance between placed objects
}


def resolve_generator_config(overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    config = dict(DEFAULT_GENERATOR_CONFIG)
    for key, value in (overrides or {}).items():
        if key not in DEFAULT_GENERATOR_CONFIG:
            raise ConfigError(f"unknown generator key {key!r}")
        config[key] = value
    config['ego_zoom_range'] = [float(v) for v in config['ego_zoom_range']]
    _validate_config(config)
    return config


def _validate_config(config: Dict[str, Any]) -> None:
    if not 1 <= config['min_objects'] <= config['max_objects']:
        raise ConfigError("need 1 <= min_objects <= max_objects")
    if not 0 < config['min_size'] <= config['max_size']:
        raise ConfigError("need 0 < min_size <= max_size")
    if not 2 <= config['num_categories'] <= len(CATEGORIES):
        raise ConfigError(f"num_categories must be in [2, {len(CATEGORIES)}]")
    for key in ('distractor_same_category_p', 'occlusion_p', 'text_noise_p'):
        if not 0.0 <= config[key] <= 1.0:
            raise ConfigError(f"{key} must be a probability")
    lo, hi = config['ego_zoom_range']
    if not 0 < lo <= hi:
        raise ConfigError("ego_zoom_range must be increasing and positive")
    if config['sequence_length'] < 1:
        raise ConfigError("sequence_length must be >= 1")


# =============================================================================
# Scene description
# =============================================================================

@dataclass
class ObjectSpec:
    category: int
    center: Tuple[float, float]
    size: float
    rotation: float
    color: Tuple[float, float, float]


@dataclass
class ClutterSpec:
    kind: str                             # 'dot' | 'stroke'
    center: Tuple[float, float]
    length: float
    angle: float
    width: float
    color: Tuple[float, float, float]


@dataclass
class SceneSpec:
    canvas_size: int
    background: Tuple[float, float, float]
    objects: List[ObjectSpec]
    clutter: List[ClutterSpec]
    target_index: int

    @property
    def target(self) -> ObjectSpec:
        return self.objects[self.target_index]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "SceneSpec":
        return cls(
            canvas_size=int(record["canvas_size"]),
            background=tuple(record["background"]),
            objects=[ObjectSpec(o["category"], tuple(o["center"]), o["size"], o["rotation"], tuple(o["color"]))
                     for o in record["objects"]],
            clutter=[ClutterSpec(c["kind"], tuple(c["center"]), c["length"], c["angle"], c["width"],
                                 tuple(c["color"])) for c in record["clutter"]],
            target_index=int(record["target_index"]),
        )


@dataclass
class ViewTransform:
    """World point for view pixel (u, v): centre + R(rotation)·((u, v) + 0.5 - size/2)·scale."""

    center: Tuple[float, float]
    scale: float                          # world pixels per view pixel
    rotation: float = 0.0
    size: int = 64

    def world_points(self) -> Tuple[np.ndarray, np.ndarray]:
        offsets = (np.arange(self.size, dtype=np.float64) + 0.5 - self.size / 2.0) * self.scale
        ou, ov = np.meshgrid(offsets, offsets)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        xs = self.center[0] + c * ou - s * ov
        ys = self.center[1] + s * ou + c * ov
        return xs, ys


@dataclass
class ViewSettings:
    """Per-frame rendering choices for both views."""

    ego: ViewTransform
    exo: ViewTransform
    brightness: float = 0.0
    occluded_view: Optional[str] = None   # None | 'ego' | 'exo'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "ViewSettings":
        return cls(
            ego=ViewTransform(tuple(record["ego"]["center"]), record["ego"]["scale"],
                              record["ego"]["rotation"], record["ego"]["size"]),
            exo=ViewTransform(tuple(record["exo"]["center"]), record["exo"]["scale"],
                              record["exo"]["rotation"], record["exo"]["size"]),
            brightness=record["brightness"],
            occluded_view=record["occluded_view"],
        )


@dataclass
class PairSample:
    """One oriented query/target pair; images are (64, 64, 3) floats in [0, 1]."""

    query_image: np.ndarray = field(repr=False)
    query_mask: BinaryMask = field(repr=False)
    target_image: np.ndarray = field(repr=False)
    target_mask: BinaryMask = field(repr=False)
    category: int
    text_category: int
    visible_query: bool
    visible_target: bool
    frame_id: int = 0
    sequence_id: int = 0
    orientation: str = "ego2exo"


@dataclass
class EgoExoFrame:
    """Both rendered views of one scene instant."""

    ego_image: np.ndarray = field(repr=False)
    ego_mask: BinaryMask = field(repr=False)
    exo_image: np.ndarray = field(repr=False)
    exo_mask: BinaryMask = field(repr=False)
    category: int
    text_category: int
    frame_id: int = 0
    sequence_id: int = 0

    def as_pair(self, orientation: str = "ego2exo") -> PairSample:
        if orientation == "ego2exo":
            q_img, q_mask, t_img, t_mask = self.ego_image, self.ego_mask, self.exo_image, self.exo_mask
        elif orientation == "exo2ego":
            q_img, q_mask, t_img, t_mask = self.exo_image, self.exo_mask, self.ego_image, self.ego_mask
        else:
            raise ConfigError(f"unknown orientation {orientation!r}")
        return PairSample(
            query_image=q_img, query_mask=q_mask, target_image=t_img, target_mask=t_mask,
            category=self.category, text_category=self.text_category,
            visible_query=q_mask.area() >= 1, visible_target=t_mask.area() >= 1,
            frame_id=self.frame_id, sequence_id=self.sequence_id, orientation=orientation,
        )


# =============================================================================
# Geometry
# =============================================================================

def object_geometry(obj: ObjectSpec):
    """Shapely geometry of an object in world coordinates."""
    s = obj.size
    name = CATEGORIES[obj.category]
    if name == "disc":
        shape = Point(0.0, 0.0).buffer(s, quad_segs=32)
    elif name == "square":
        h = 0.8 * s
        shape = box(-h, -h, h, h)
    elif name == "triangle":
        shape = Polygon([(s * math.cos(a), s * math.sin(a))
                         for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)])
    elif name == "bar":
        shape = box(-s, -0.35 * s, s, 0.35 * s)
    elif name == "ring":
        shape = Point(0.0, 0.0).buffer(s, quad_segs=32).difference(
            Point(0.0, 0.0).buffer(0.55 * s, quad_segs=32))
    else:
        raise ConfigError(f"unknown category index {obj.category}")
    shape = affinity.rotate(shape, obj.rotation, origin=(0.0, 0.0), use_radians=True)
    return affinity.translate(shape, obj.center[0], obj.center[1])


def clutter_geometry(item: ClutterSpec):
    if item.kind == "dot":
        return Point(*item.center).buffer(item.width, quad_segs=8)
    dx = 0.5 * item.length * math.cos(item.angle)
    dy = 0.5 * item.length * math.sin(item.angle)
    cx, cy = item.center
    return LineString([(cx - dx, cy - dy), (cx + dx, cy + dy)]).buffer(0.5 * item.width)


def occluder_geometry(obj: ObjectSpec):
    """Axis-aligned rectangle strictly containing the object."""
    minx, miny, maxx, maxy = object_geometry(obj).bounds
    return box(minx - 1.0, miny - 1.0, maxx + 1.0, maxy + 1.0)


def _rasterize(geometry, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    if geometry.is_empty:
        return np.zeros(xs.shape, dtype=bool)
    shapely.prepare(geometry)
    return shapely.contains_xy(geometry, xs, ys)


# =============================================================================
# Operations
# =============================================================================

def generate_scene(rng: np.random.Generator, config: Dict[str, Any]) -> SceneSpec:
    """Sample a scene with non-overlapping objects; the first object is the target."""
    canvas = config['canvas_size']
    k = config['num_categories']
    n_objects = int(rng.integers(config['min_objects'], config['max_objects'] + 1))

    target_category = int(rng.integers(k))
    categories = [target_category]
    force_lookalike = rng.random() < config['distractor_same_category_p']
    for i in range(1, n_objects):
        if i == 1 and force_lookalike:
            categories.append(target_category)
        else:
            categories.append(int(rng.integers(k)))

    objects: List[ObjectSpec] = []
    geometries = []
    for i, category in enumerate(categories):
        for _ in range(config['placement_retries']):
            size = float(rng.uniform(config['min_size'], config['max_size']))
            # the target keeps room for the ego crop around it
            margin = config['edge_margin'] + size + (size if i == 0 else 0.0)
            center = (float(rng.uniform(margin, canvas - margin)),
                      float(rng.uniform(margin, canvas - margin)))
            candidate = ObjectSpec(
                category=category, center=center, size=size,
                rotation=float(rng.uniform(0.0, 2.0 * math.pi)),
                color=tuple(float(c) for c in rng.uniform(0.3, 1.0, size=3)),
            )
            geometry = object_geometry(candidate)
            if all(geometry.distance(other) >= config['min_gap'] for other in geometries):
                objects.append(candidate)
                geometries.append(geometry)
                break
        else:
            raise GenerationError(
                f"could not place object {i} of {n_objects} after {config['placement_retries']} tries")

    clutter = []
    n_clutter = int(rng.integers(config['min_clutter'], config['max_clutter'] + 1))
    for _ in range(n_clutter):
        clutter.append(ClutterSpec(
            kind="dot" if rng.random() < 0.5 else "stroke",
            center=(float(rng.uniform(0, canvas)), float(rng.uniform(0, canvas))),
            length=float(rng.uniform(6.0, 20.0)),
            angle=float(rng.uniform(0.0, math.pi)),
            width=float(rng.uniform(0.8, 2.0)),
            color=tuple(float(c) for c in rng.uniform(0.0, 0.35, size=3)),
        ))

    background = tuple(float(c) for c in rng.uniform(0.05, 0.2, size=3))
    return SceneSpec(canvas_size=canvas, background=background, objects=objects,
                     clutter=clutter, target_index=0)


def sample_view_settings(scene: SceneSpec, config: Dict[str, Any], rng: np.random.Generator,
                         force_occlusion: Optional[str] = None) -> ViewSettings:
    size = config['image_size']
    exo_scale = scene.canvas_size / size
    zoom = float(rng.uniform(*config['ego_zoom_range']))
    rotation = math.radians(float(rng.uniform(-config['ego_rotation_deg'], config['ego_rotation_deg'])))
    jitter = rng.uniform(-config['ego_jitter_px'], config['ego_jitter_px'], size=2)
    tx, ty = scene.target.center
    brightness = float(rng.uniform(-config['brightness_jitter'], config['brightness_jitter']))
    occluded = force_occlusion
    if occluded is None and rng.random() < config['occlusion_p']:
        occluded = "ego" if rng.random() < 0.5 else "exo"
    return ViewSettings(
        ego=ViewTransform((tx + float(jitter[0]), ty + float(jitter[1])), exo_scale / zoom, rotation, size),
        exo=ViewTransform((scene.canvas_size / 2.0, scene.canvas_size / 2.0), exo_scale, 0.0, size),
        brightness=brightness,
        occluded_view=occluded,
    )


def render_view(scene: SceneSpec, view: ViewTransform, occluded: bool = False,
                brightness: float = 0.0) -> Tuple[np.ndarray, BinaryMask]:
    """Analytic render of one view; returns the image and the target's visible mask."""
    xs, ys = view.world_points()
    image = np.empty(xs.shape + (3,), dtype=np.float64)
    shade = 1.0 + 0.25 * (xs / scene.canvas_size - 0.5)
    for ch in range(3):
        image[..., ch] = scene.background[ch] * shade

    for item in scene.clutter:
        hit = _rasterize(clutter_geometry(item), xs, ys)
        image[hit] = item.color

    geometries = [object_geometry(obj) for obj in scene.objects]
    for obj, geometry in zip(scene.objects, geometries):
        hit = _rasterize(geometry, xs, ys)
        image[hit] = obj.color

    target_geometry = geometries[scene.target_index]
    above = geometries[scene.target_index + 1:]
    if above:
        target_geometry = target_geometry.difference(unary_union(above))
    target_bits = _rasterize(target_geometry, xs, ys)

    if occluded:
        hit = _rasterize(occluder_geometry(scene.target), xs, ys)
        image[hit] = (0.5, 0.5, 0.5)
        target_bits &= ~hit

    if brightness:
        image = np.clip(image + brightness, 0.0, 1.0)
    return image, BinaryMask.from_array(target_bits)


def text_condition(category: int, noise_p: float, rng: np.random.Generator,
                   num_categories: int = len(CATEGORIES)) -> int:
    """True class with probability 1 - noise_p, else a uniformly drawn different class."""
    if not 0.0 <= noise_p <= 1.0:
        raise ConfigError(f"noise_p must be in [0, 1], got {noise_p}")
    if rng.random() >= noise_p:
        return int(category)
    other = int(rng.integers(num_categories - 1))
    return other + 1 if other >= category else other


def render_frame(scene: SceneSpec, settings: ViewSettings, text_category: int,
                 frame_id: int = 0, sequence_id: int = 0) -> EgoExoFrame:
    ego_image, ego_mask = render_view(scene, settings.ego, settings.occluded_view == "ego",
                                      settings.brightness)
    exo_image, exo_mask = render_view(scene, settings.exo, settings.occluded_view == "exo")
    return EgoExoFrame(ego_image=ego_image, ego_mask=ego_mask, exo_image=exo_image, exo_mask=exo_mask,
                       category=scene.target.category, text_category=text_category,
                       frame_id=frame_id, sequence_id=sequence_id)


def render_views(scene: SceneSpec, config: Dict[str, Any], rng: np.random.Generator,
                 orientation: str = "ego2exo", settings: Optional[ViewSettings] = None) -> PairSample:
    """Render both views of ``scene`` and return them as one oriented pair."""
    if settings is None:
        settings = sample_view_settings(scene, config, rng)
    text = text_condition(scene.target.category, config['text_noise_p'], rng, config['num_categories'])
    return render_frame(scene, settings, text).as_pair(orientation)


# =============================================================================
# Sequences
# =============================================================================

@dataclass
class SequenceMotion:
    velocities: List[Tuple[float, float]]   # world px per frame, per object
    spins: List[float]                      # radians per frame, per object
    camera_spin: float                      # ego rotation drift, radians per frame


def sample_motion(scene: SceneSpec, config: Dict[str, Any], rng: np.random.Generator) -> SequenceMotion:
    step = config['drift_translation_px']
    spin = math.radians(config['drift_rotation_deg'])
    velocities, spins = [], []
    for _ in scene.objects:
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        speed = float(rng.uniform(0.0, step))
        velocities.append((speed * math.cos(angle), speed * math.sin(angle)))
        spins.append(float(rng.uniform(-spin, spin)))
    return SequenceMotion(velocities, spins, float(rng.uniform(-spin, spin)))


def _reflect(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return lo
    span = hi - lo
    offset = (value - lo) % (2.0 * span)
    return lo + (offset if offset <= span else 2.0 * span - offset)


def scene_at_frame(scene: SceneSpec, motion: SequenceMotion, t: int, config: Dict[str, Any]) -> SceneSpec:
    """Pose of every object ``t`` frames after the initial scene (reflecting at the margins)."""
    moved = []
    for obj, (vx, vy), spin in zip(scene.objects, motion.velocities, motion.spins):
        margin = config['edge_margin'] + obj.size
        cx = _reflect(obj.center[0] + t * vx, margin, scene.canvas_size - margin)
        cy = _reflect(obj.center[1] + t * vy, margin, scene.canvas_size - margin)
        moved.append(replace(obj, center=(cx, cy), rotation=obj.rotation + t * spin))
    return replace(scene, objects=moved)


def settings_at_frame(base: ViewSettings, scene_t: SceneSpec, offset: Tuple[float, float],
                      motion: SequenceMotion, t: int, occluded_view: Optional[str]) -> ViewSettings:
    tx, ty = scene_t.target.center
    ego = replace(base.ego, center=(tx + offset[0], ty + offset[1]),
                  rotation=base.ego.rotation + t * motion.camera_spin)
    return replace(base, ego=ego, occluded_view=occluded_view)


def generate_sequence(seed: int, sequence_id: int, length: int, config: Dict[str, Any]):
    """
    Render ``length`` frames of one drifting scene.

    Returns ``(frames, records)`` where records hold the per-frame scene and
    view settings needed to re-render any frame.
    """
    rng = np.random.default_rng([int(seed), int(sequence_id)])
    scene = generate_scene(rng, config)
    motion = sample_motion(scene, config, rng)
    base = sample_view_settings(scene, config, rng, force_occlusion=None)
    offset = (base.ego.center[0] - scene.target.center[0], base.ego.center[1] - scene.target.center[1])

    frames, records = [], []
    for t in range(length):
        scene_t = scene_at_frame(scene, motion, t, config)
        occluded = None
        if rng.random() < config['occlusion_p']:
            occluded = "ego" if rng.random() < 0.5 else "exo"
        settings = settings_at_frame(base, scene_t, offset, motion, t, occluded)
        text = text_condition(scene_t.target.category, config['text_noise_p'], rng,
                              config['num_categories'])
        frames.append(render_frame(scene_t, settings, text, frame_id=t, sequence_id=sequence_id))
        records.append({"scene": scene_t.to_dict(), "views": settings.to_dict(), "text_category": text})
    return frames, records
