"""Seeded simulation of the optical path from bitmap schedules to camera frames.

The display shows `lead_in_s` of dark SLM, the schedules back to back, then `lead_out_s` of
dark SLM. Camera frame i is stamped i / fps and samples the display at mid-exposure
(i + 0.5) / fps (zero-order hold). Pixels follow an additive light model:

    frame = clip((ambient + gain * warp(bitmap)) * (1 + exposure_drift * t) + N(0, sigma_eff))

with ambient = texture * ambient_lux / 500 and sigma_eff = sensor_noise_sigma * sqrt(lux / 500).
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import tqdm
import yaml

from optical_signature import config, transforms
from optical_signature.errors import (DegenerateHomographyError, InvalidArgumentError,
                                      SchemaError)
from optical_signature.modulation import LAYOUT, BitmapSchedule

logger = logging.getLogger(__name__)

REFERENCE_LUX = 500.0
FRAMES_MANIFEST = "frames_manifest.json"


@dataclass(frozen=True)
class SceneConfig:
    surface_rgb: Tuple[float, float, float] = (150.0, 140.0, 130.0)
    texture_amplitude: float = 12.0
    texture_seed: int = 0
    surface_texture: Optional[str] = None
    ambient_lux: float = REFERENCE_LUX
    gain: float = 1.0
    cell_px: float = 40.0
    offset_px: Tuple[float, float] = (40.0, 30.0)
    homography: Optional[Tuple[Tuple[float, ...], ...]] = None
    frame_size: Optional[Tuple[int, int]] = None
    camera_fps: float = 30.0
    sensor_noise_sigma: float = 2.0
    exposure_drift: float = 0.0
    lead_in_s: float = config.WINDOW_S
    lead_out_s: float = 1.0

    def __post_init__(self):
        if self.camera_fps < config.CORE_FPS or self.camera_fps < 2 * config.F_D:
            raise InvalidArgumentError(
                f"camera_fps must be at least {config.CORE_FPS}, got {self.camera_fps}")
        if self.ambient_lux < 0 or self.sensor_noise_sigma < 0 or self.gain < 0:
            raise InvalidArgumentError("ambient_lux, sensor_noise_sigma and gain must be >= 0")
        if self.cell_px <= 0:
            raise InvalidArgumentError("cell_px must be positive")
        if self.lead_in_s < 0 or self.lead_out_s < 0:
            raise InvalidArgumentError("lead-in and lead-out must be non-negative")
        if abs(np.linalg.det(self.matrix())) <= 1e-9:
            raise DegenerateHomographyError("Scene homography is singular")

    def matrix(self) -> np.ndarray:
        """Homography from bitmap pixels to camera pixels."""
        if self.homography is not None:
            H = np.asarray(self.homography, dtype=np.float64)
            if H.shape != (3, 3):
                raise InvalidArgumentError(f"homography must be 3x3, got {H.shape}")
            return H
        s = self.cell_px / config.CELL_PX
        ox, oy = self.offset_px
        return np.array([[s, 0.0, ox], [0.0, s, oy], [0.0, 0.0, 1.0]])

    def size(self) -> Tuple[int, int]:
        """Camera frame (width, height)."""
        if self.frame_size is not None:
            return int(self.frame_size[0]), int(self.frame_size[1])
        w, h = LAYOUT.bitmap_size
        corners = project(self.matrix(), np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float))
        ox, oy = self.offset_px
        return int(math.ceil(corners[:, 0].max() + ox)), int(math.ceil(corners[:, 1].max() + oy))


_SCENE_FIELDS = {f for f in SceneConfig.__dataclass_fields__}


def scene_to_dict(scene: SceneConfig) -> Dict[str, Any]:
    doc = asdict(scene)
    for key, value in doc.items():
        if isinstance(value, tuple):
            doc[key] = [list(v) if isinstance(v, tuple) else v for v in value]
    return doc


def scene_from_dict(doc: Optional[Dict[str, Any]]) -> SceneConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise SchemaError("Scene file must be a mapping")
    unknown = set(doc) - _SCENE_FIELDS
    if unknown:
        raise SchemaError(f"Unknown scene keys {sorted(unknown)}", field=sorted(unknown)[0])
    kwargs = {}
    for key, value in doc.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return SceneConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"Invalid scene: {e}") from e


def load_scene(path: Optional[str]) -> SceneConfig:
    """Reads a YAML scene file; None gives the default scene."""
    if path is None:
        return SceneConfig()
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise SchemaError(f"Invalid YAML: {e}", line=mark.line + 1 if mark else None) from e
    return scene_from_dict(doc)


def save_scene(scene: SceneConfig, path: str):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(scene_to_dict(scene), f, sort_keys=False)


def project(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Applies a homography to (N, 2) points."""
    pts = np.hstack([np.asarray(points, dtype=np.float64), np.ones((len(points), 1))])
    mapped = pts @ np.asarray(H, dtype=np.float64).T
    return mapped[:, :2] / mapped[:, 2:3]


################################################################################################
#                                   Frame sequences                                           #
################################################################################################
@dataclass(eq=False)
class FrameSequence:
    """RGB uint8 frames (T, H, W, 3) at a fixed rate; frame i is stamped i / fps."""
    frames: np.ndarray
    fps: float
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.dtype != np.uint8:
            raise InvalidArgumentError(
                f"frames must be (T, H, W, 3) uint8, got {self.frames.shape} {self.frames.dtype}")
        if self.fps <= 0:
            raise InvalidArgumentError(f"fps must be positive, got {self.fps}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self)) / self.fps

    @property
    def duration_s(self) -> float:
        return len(self) / self.fps

    def slice(self, start: int, stop: int) -> "FrameSequence":
        meta = dict(self.meta, start_frame=int(self.meta.get("start_frame", 0)) + max(start, 0))
        return FrameSequence(frames=self.frames[max(start, 0):stop], fps=self.fps, meta=meta)


def _texture(scene: SceneConfig, size: Tuple[int, int]) -> np.ndarray:
    w, h = size
    if scene.surface_texture is not None:
        image = cv2.imread(scene.surface_texture, cv2.IMREAD_COLOR)
        if image is None:
            raise InvalidArgumentError(f"Cannot read surface texture {scene.surface_texture}")
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
        return cv2.resize(image, (w, h), interpolation=cv2.INTER_AREA).astype(np.float32)
    rng = np.random.default_rng(scene.texture_seed)
    coarse = rng.standard_normal((max(2, h // 16), max(2, w // 16), 3)).astype(np.float32)
    smooth = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    base = np.asarray(scene.surface_rgb, dtype=np.float32)
    return np.clip(base + scene.texture_amplitude * smooth, 0.0, 255.0)


def display_index(t: np.ndarray, n_windows: int, lead_in_s: float) -> Tuple[np.ndarray, np.ndarray]:
    """(window, sub-frame) shown at display times t; window -1 means dark SLM."""
    rel = np.asarray(t, dtype=np.float64) - lead_in_s + 1e-9
    window = np.floor(rel / config.WINDOW_S).astype(int)
    sub = np.floor((rel - window * config.WINDOW_S) * config.DISPLAY_RATE).astype(int)
    sub = np.clip(sub, 0, config.WINDOW_SLOTS * config.SUBFRAMES_PER_SLOT - 1)
    dark = (rel < 0) | (window >= n_windows)
    return np.where(dark, -1, window), np.where(dark, -1, sub)


def render(schedules: Union[BitmapSchedule, Sequence[BitmapSchedule]], scene: SceneConfig,
           seed: int, progress: bool = False) -> FrameSequence:
    """Renders the camera's view of the schedules; bit-identical for identical inputs."""
    if isinstance(schedules, BitmapSchedule):
        schedules = [schedules]
    H = scene.matrix()
    w, h = scene.size()
    fps = scene.camera_fps
    duration = scene.lead_in_s + config.WINDOW_S * len(schedules) + scene.lead_out_s
    n_frames = int(math.floor(duration * fps + 1e-9))
    windows, subs = display_index((np.arange(n_frames) + 0.5) / fps, len(schedules),
                                  scene.lead_in_s)

    scale = scene.ambient_lux / REFERENCE_LUX
    ambient = _texture(scene, (w, h)) * scale
    sigma = scene.sensor_noise_sigma * math.sqrt(scale)
    logger.info("Rendering %d frames of %dx%d at %.2f fps (sigma_eff=%.3f)",
                n_frames, w, h, fps, sigma)

    frames = np.empty((n_frames, h, w, 3), dtype=np.uint8)
    cache: Dict[Tuple[int, int], np.ndarray] = {}
    bitmaps: List[np.ndarray] = []
    cached_window = None
    for i in tqdm.tqdm(range(n_frames), desc="render", disable=not progress):
        t = i / fps
        light = ambient
        if windows[i] >= 0:
            if windows[i] != cached_window:
                cache.clear()
                bitmaps = list(schedules[windows[i]].display_bitmaps())
                cached_window = windows[i]
            key = (int(windows[i]), int(subs[i]))
            if key not in cache:
                cache[key] = cv2.warpPerspective(
                    bitmaps[subs[i]].astype(np.float32), H, (w, h), flags=cv2.INTER_LINEAR,
                    borderMode=cv2.BORDER_CONSTANT, borderValue=0)
            light = ambient + scene.gain * cache[key]
        pixel = light * (1.0 + scene.exposure_drift * t)
        if sigma > 0:
            rng = np.random.default_rng([seed, i])
            pixel = pixel + rng.normal(0.0, sigma, pixel.shape).astype(np.float32)
        frames[i] = np.clip(np.rint(pixel), 0, 255).astype(np.uint8)

    meta = {
        "seed": seed,
        "scene": scene_to_dict(scene),
        "n_windows": len(schedules),
        "window_nos": [s.window_no for s in schedules],
        "degrade": [],
    }
    return FrameSequence(frames=frames, fps=fps, meta=meta)


def degrade(frames: FrameSequence, ops: Sequence[Union[str, transforms.DegradeOp]],
            progress: bool = False) -> FrameSequence:
    """Applies post-processing ops in order; an empty list returns the input unchanged."""
    ops = [transforms.parse_op(op) if isinstance(op, str) else op for op in ops]
    if not ops:
        return frames
    data, fps = frames.frames, frames.fps
    for op in ops:
        if op.name == "resample_fps":
            data = data[transforms.resample_indices(len(data), fps, op.value)]
            fps = op.value
        elif op.name == "speed":
            data = data[transforms.speed_indices(len(data), op.value)]
        else:
            data = np.stack([transforms.transform_frame(f, op)
                             for f in tqdm.tqdm(data, desc=str(op), disable=not progress)])
        if len(data) == 0:
            raise InvalidArgumentError(f"Degrade op {op} left no frames")
    meta = dict(frames.meta, degrade=list(frames.meta.get("degrade", [])) + [str(op) for op in ops])
    return FrameSequence(frames=data, fps=fps, meta=meta)


def ground_truth_corners(scene: SceneConfig) -> np.ndarray:
    """Camera-pixel centers of the four localization blocks, TL, TR, BR, BL."""
    return project(scene.matrix(), LAYOUT.localization_centers())


################################################################################################
#                                   Disk I/O                                                  #
################################################################################################
def save_frames(frames: FrameSequence, out_dir: str, progress: bool = False) -> str:
    frame_dir = os.path.join(out_dir, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    names = []
    for i, frame in enumerate(tqdm.tqdm(frames.frames, desc="save", disable=not progress)):
        name = f"f{i:06d}.png"
        cv2.imwrite(os.path.join(frame_dir, name), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
        names.append(f"frames/{name}")
    manifest = {
        "schema_version": config.SCHEMA_VERSION,
        "fps": frames.fps,
        "timestamps": frames.timestamps.tolist(),
        "files": names,
        "meta": frames.meta,
    }
    path = os.path.join(out_dir, FRAMES_MANIFEST)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return path


def load_frames(path: str, progress: bool = False) -> FrameSequence:
    """Loads a frame directory written by save_frames, or any video file cv2 can read."""
    if os.path.isdir(path):
        manifest_path = os.path.join(path, FRAMES_MANIFEST)
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"Invalid frames manifest: {e.msg}", line=e.lineno) from e
        for key in ("fps", "files"):
            if key not in manifest:
                raise SchemaError("Missing required field", field=key)
        frames = []
        for name in tqdm.tqdm(manifest["files"], desc="load", disable=not progress):
            image = cv2.imread(os.path.join(path, name), cv2.IMREAD_COLOR)
            if image is None:
                raise SchemaError(f"Cannot read frame {name}", field="files")
            frames.append(cv2.cvtColor(image, cv2.COLOR_BGR2RGB))
        return FrameSequence(frames=np.stack(frames), fps=float(manifest["fps"]),
                             meta=manifest.get("meta", {}))
    reader = VideoReader(path)
    try:
        return reader.read_all(progress=progress)
    finally:
        reader.release()


class VideoReader:
    """Thin cv2.VideoCapture wrapper for verifying real recordings."""

    def __init__(self, filepath: str):
        self.filepath = filepath
        self._reader = cv2.VideoCapture(filepath)
        if not self._reader.isOpened():
            raise InvalidArgumentError(f"Cannot open video {filepath}")

    @property
    def fps(self) -> float:
        return float(self._reader.get(cv2.CAP_PROP_FPS))

    def frame_count(self) -> int:
        return int(self._reader.get(cv2.CAP_PROP_FRAME_COUNT))

    def read_frame(self) -> Optional[np.ndarray]:
        success, frame = self._reader.read()
        if not success:
            return None
        return cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)

    def read_all(self, progress: bool = False) -> FrameSequence:
        frames = []
        with tqdm.tqdm(total=self.frame_count(), desc="decode", disable=not progress) as bar:
            while True:
                frame = self.read_frame()
                if frame is None:
                    break
                frames.append(frame)
                bar.update(1)
        if not frames:
            raise InvalidArgumentError(f"Video {self.filepath} holds no frames")
        return FrameSequence(frames=np.stack(frames), fps=self.fps, meta={"source": self.filepath})

    def release(self):
        self._reader.release()


def with_scene(scene: SceneConfig, **changes) -> SceneConfig:
    return replace(scene, **changes)
