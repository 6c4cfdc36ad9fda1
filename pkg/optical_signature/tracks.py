"""Feature-track files, synthetic speaker tracks and the content transforms used in testing.

A track file is UTF-8 JSON:

    {"schema_version": "1.0", "fps": 24.0, "identity": [512 numbers],
     "frames": [[16 numbers], ...], "frame_identities": [[512 numbers], ...]}

`frame_identities` is optional and defaults to the track-level identity for every frame.
"""
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import signal

from optical_signature import config
from optical_signature.descriptor import FeatureTrack
from optical_signature.errors import InvalidArgumentError, SchemaError, TrackTooShortError

logger = logging.getLogger(__name__)


################################################################################################
#                                        Track schema                                          #
################################################################################################
# {
#     'fps': scalar, frames / second, at least twice the data modulation frequency,
#     'identity': (512,) face embedding, normalized on ingest,
#     'frames': (T, 16) per frame: 5 lip-landmark distances then 11 blendshape scores,
#     'frame_identities': optional (T, 512) per-frame embeddings,
# }
################################################################################################
#                                                                                              #
################################################################################################
TRACK_SPEC = {
    'fps': {'shape': (),
            'dtype': np.float64,
            'range': (2 * config.F_D, 1000.0)},
    'identity': {'shape': (config.IDENTITY_DIM,),
                 'dtype': np.float64,
                 'range': None},
    'frames': {'shape': (None, config.N_CHANNELS),
               'dtype': np.float64,
               'range': [(0.0,) * config.N_LIP_DISTANCES + (0.0,) * config.N_BLENDSHAPES,
                         (np.inf,) * config.N_LIP_DISTANCES + (1.0,) * config.N_BLENDSHAPES]},
    'frame_identities': {'shape': (None, config.IDENTITY_DIM),
                         'dtype': np.float64,
                         'range': None,
                         'optional': True},
}


def _shape_matches(expected, actual) -> bool:
    if len(expected) != len(actual):
        return False
    return all(e is None or e == a for e, a in zip(expected, actual))


def check_elements(target: Dict[str, Any], values: Dict[str, Any], prefix: str = ''):
    """Checks that elements in `values` match `target`, raising SchemaError on the first miss."""
    for elem in target:
        path = f"{prefix}{elem}"
        if elem not in values or values[elem] is None:
            if target[elem].get('optional', False):
                continue
            raise SchemaError("Missing required field", field=path)
        if isinstance(target[elem], dict) and 'shape' not in target[elem]:
            check_elements(target[elem], values[elem], prefix=f"{path}.")
            continue
        try:
            value = np.asarray(values[elem], dtype=target[elem]['dtype'])
        except (TypeError, ValueError) as e:
            raise SchemaError(f"Cannot read {elem} as {np.dtype(target[elem]['dtype'])}: {e}",
                              field=path) from e
        if not _shape_matches(target[elem]['shape'], value.shape):
            raise SchemaError(
                f"Shape of {elem} should be {target[elem]['shape']} but is {value.shape}", field=path)
        if not np.all(np.isfinite(value)):
            bad = np.argwhere(~np.isfinite(value))[0]
            raise SchemaError(f"{elem} holds a non-finite value", field=f"{path}{bad.tolist()}")
        rng = target[elem]['range']
        if rng is None:
            continue
        lo, hi = np.asarray(rng[0], dtype=np.float64), np.asarray(rng[1], dtype=np.float64)
        outside = (value < lo) | (value > hi)
        if np.any(outside):
            suffix = str(np.argwhere(outside)[0].tolist()) if value.ndim else ''
            raise SchemaError(f"{elem} is out of range. Should be in [{rng[0]}, {rng[1]}]",
                              field=f"{path}{suffix}")


def track_from_dict(doc: Dict[str, Any]) -> FeatureTrack:
    if not isinstance(doc, dict):
        raise SchemaError("Track document must be a JSON object")
    version = doc.get('schema_version', config.SCHEMA_VERSION)
    if str(version).split('.')[0] != config.SCHEMA_VERSION.split('.')[0]:
        raise SchemaError(f"Unsupported schema version {version}", field='schema_version')
    unknown = set(doc) - set(TRACK_SPEC) - {'schema_version', 'meta'}
    if unknown:
        raise SchemaError(f"Unknown fields {sorted(unknown)}", field=sorted(unknown)[0])
    check_elements(TRACK_SPEC, doc)
    frames = np.asarray(doc['frames'], dtype=np.float64)
    if frames.shape[0] < 2:
        raise SchemaError("A track needs at least 2 frames", field='frames')
    if not np.any(doc['identity']):
        raise SchemaError("identity must not be all zeros", field='identity')
    frame_identities = doc.get('frame_identities')
    if frame_identities is not None and len(frame_identities) != frames.shape[0]:
        raise SchemaError(f"frame_identities has {len(frame_identities)} rows for "
                          f"{frames.shape[0]} frames", field='frame_identities')
    return FeatureTrack(fps=float(doc['fps']), frames=frames,
                        identity=np.asarray(doc['identity'], dtype=np.float64),
                        frame_identities=frame_identities)


def ingest_track(path: str) -> FeatureTrack:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"Invalid JSON: {e.msg} (column {e.colno})", line=e.lineno) from e
    track = track_from_dict(doc)
    logger.info("Ingested %s: %d frames at %.2f fps", path, track.n_frames, track.fps)
    return track


def track_to_dict(track: FeatureTrack) -> Dict[str, Any]:
    doc = {
        'schema_version': config.SCHEMA_VERSION,
        'fps': track.fps,
        'identity': track.identity.tolist(),
        'frames': track.frames.tolist(),
    }
    if track.frame_identities is not None:
        doc['frame_identities'] = track.frame_identities.tolist()
    return doc


def save_track(track: FeatureTrack, path: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(track_to_dict(track), f)
    return path


################################################################################################
#                                   Synthetic speaker tracks                                   #
################################################################################################
DEFAULT_MEANS = (0.35,) * config.N_LIP_DISTANCES + (0.3,) * config.N_BLENDSHAPES
DEFAULT_AMPLITUDES = (0.12,) * config.N_CHANNELS
MAX_BANDWIDTH_HZ = 8.0
_FILTER_ORDER = 4


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 36.0
    fps: float = config.CORE_FPS
    bandwidth_hz: float = 3.0
    identity_seed: Optional[int] = None
    channel_means: Tuple[float, ...] = DEFAULT_MEANS
    channel_amplitudes: Tuple[float, ...] = DEFAULT_AMPLITUDES

    def __post_init__(self):
        if self.duration_s <= 0 or self.fps <= 0:
            raise InvalidArgumentError("duration_s and fps must be positive")
        if not 0 < self.bandwidth_hz <= MAX_BANDWIDTH_HZ:
            raise InvalidArgumentError(
                f"bandwidth_hz must lie in (0, {MAX_BANDWIDTH_HZ}], got {self.bandwidth_hz}")
        if self.bandwidth_hz >= self.fps / 2:
            raise InvalidArgumentError("bandwidth_hz must stay below the Nyquist frequency")
        if len(self.channel_means) != config.N_CHANNELS or \
                len(self.channel_amplitudes) != config.N_CHANNELS:
            raise InvalidArgumentError(f"Channel statistics need {config.N_CHANNELS} entries")


def _band_limited(rng: np.random.Generator, n: int, fps: float, bandwidth_hz: float) -> np.ndarray:
    """(n, 16) zero-mean unit-variance Gaussian signals, zero-phase low-passed to bandwidth_hz."""
    pad = max(64, int(math.ceil(2 * fps)))
    noise = rng.standard_normal((n + 2 * pad, config.N_CHANNELS))
    b, a = signal.butter(_FILTER_ORDER, bandwidth_hz / (fps / 2))
    smooth = signal.filtfilt(b, a, noise, axis=0)[pad:pad + n]
    std = smooth.std(axis=0)
    std[std == 0] = 1.0
    return (smooth - smooth.mean(axis=0)) / std


def _shape_channels(z: np.ndarray, means, amplitudes) -> np.ndarray:
    frames = np.asarray(means) + np.asarray(amplitudes) * z
    frames[:, :config.N_LIP_DISTANCES] = np.maximum(frames[:, :config.N_LIP_DISTANCES], 0.0)
    frames[:, config.N_LIP_DISTANCES:] = np.clip(frames[:, config.N_LIP_DISTANCES:], 0.0, 1.0)
    return frames


def random_identity(seed) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(config.IDENTITY_DIM)
    return v / np.linalg.norm(v)


def synth_track(cfg: SynthConfig, seed: int) -> FeatureTrack:
    """Deterministic synthetic speaker: band-limited channel signals plus a seeded identity."""
    n = int(round(cfg.duration_s * cfg.fps))
    if n < 2:
        raise InvalidArgumentError(f"duration_s={cfg.duration_s} gives fewer than 2 frames")
    rng = np.random.default_rng(seed)
    z = _band_limited(rng, n, cfg.fps, cfg.bandwidth_hz)
    identity_seed = cfg.identity_seed if cfg.identity_seed is not None else [seed, 1]
    return FeatureTrack(fps=cfg.fps,
                        frames=_shape_channels(z, cfg.channel_means, cfg.channel_amplitudes),
                        identity=random_identity(identity_seed))


################################################################################################
#                                   Content transforms                                         #
################################################################################################
def _replace(track: FeatureTrack, **changes) -> FeatureTrack:
    args = dict(fps=track.fps, frames=track.frames, identity=track.identity,
                frame_identities=track.frame_identities)
    args.update(changes)
    return FeatureTrack(**args)


def jitter(track: FeatureTrack, sigma: float, seed: int) -> FeatureTrack:
    """Viewpoint jitter: additive Gaussian noise on every sample, clipped to the channel ranges."""
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return _replace(track)
    noise = np.random.default_rng(seed).normal(0.0, sigma, track.frames.shape)
    return _replace(track, frames=_shape_channels(noise, track.frames, 1.0))


def tamper(track: FeatureTrack, start_frame: int, n_frames: int, seed: int,
           bandwidth_hz: float = 3.0) -> FeatureTrack:
    """Replaces frames [start_frame, start_frame + n_frames) with an independent draw.

    The replacement keeps each channel's mean and spread over the whole track, so only the
    content changes, not the statistics.
    """
    if n_frames < 0 or start_frame < 0 or start_frame + n_frames > track.n_frames:
        raise InvalidArgumentError(
            f"Tamper span [{start_frame}, {start_frame + n_frames}) is outside the track")
    if n_frames == 0:
        return _replace(track)
    rng = np.random.default_rng(seed)
    bandwidth_hz = min(bandwidth_hz, 0.45 * track.fps)
    z = _band_limited(rng, n_frames, track.fps, bandwidth_hz)
    frames = track.frames.copy()
    std = frames.std(axis=0)
    frames[start_frame:start_frame + n_frames] = _shape_channels(z, frames.mean(axis=0), std)
    return _replace(track, frames=frames)


def swap_identity(track: FeatureTrack, seed: int) -> FeatureTrack:
    """Replaces every identity embedding by an independent random one."""
    identity = random_identity(seed)
    frame_identities = None
    if track.frame_identities is not None:
        frame_identities = np.broadcast_to(identity, track.frame_identities.shape)
    return _replace(track, identity=identity, frame_identities=frame_identities)


def rotate_identity(track: FeatureTrack, angle: float, seed: int) -> FeatureTrack:
    """Identity rotated by exactly `angle` radians towards a random orthogonal direction."""
    if not 0.0 <= angle <= math.pi:
        raise InvalidArgumentError(f"angle must lie in [0, pi], got {angle}")
    u = track.identity
    w = np.random.default_rng(seed).standard_normal(config.IDENTITY_DIM)
    w = w - (w @ u) * u
    w /= np.linalg.norm(w)
    rotated = math.cos(angle) * u + math.sin(angle) * w
    frame_identities = None
    if track.frame_identities is not None:
        frame_identities = np.broadcast_to(rotated, track.frame_identities.shape)
    return _replace(track, identity=rotated, frame_identities=frame_identities)


def resample(track: FeatureTrack, fps: float) -> FeatureTrack:
    """Nearest-frame resampling to `fps`; a no-op when the rates already match."""
    if fps <= 0:
        raise InvalidArgumentError(f"fps must be positive, got {fps}")
    if fps == track.fps:
        return track
    n_out = int(math.floor(track.n_frames * fps / track.fps))
    if n_out < 2:
        raise TrackTooShortError(f"Track is too short to resample to {fps} fps")
    src = np.minimum(np.rint(np.arange(n_out) * track.fps / fps).astype(int), track.n_frames - 1)
    frame_identities = None
    if track.frame_identities is not None:
        frame_identities = track.frame_identities[src]
    return FeatureTrack(fps=fps, frames=track.frames[src], identity=track.identity,
                        frame_identities=frame_identities)


def window_frames(fps: float) -> int:
    return int(round(config.WINDOW_S * fps))


def window_count(track: FeatureTrack) -> int:
    """Number of complete 4.5 s content windows in the track."""
    return track.n_frames // window_frames(track.fps)
