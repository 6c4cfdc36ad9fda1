from dataclasses import dataclass
from typing import Callable, Dict, Optional

import cv2
import numpy as np

from optical_signature.errors import InvalidArgumentError


################################################################################################
#                                      Post-processing ops                                     #
################################################################################################
# 'quantize=<levels>'      uniform quantization to `levels` gray levels per channel
# 'blur=<radius>'          Gaussian blur, sigma = radius in pixels
# 'contrast=<+-pct>'       scales deviation from mid-gray by (1 + pct / 100)
# 'exposure=<+-pct>'       scales intensity by (1 + pct / 100)
# 'monochrome'             luma only, replicated over RGB
# 'resample_fps=<fps>'     nearest-frame frame-rate conversion
# 'speed=<factor>'         content played `factor` times as fast at the same frame rate
################################################################################################
FRAME_OPS = ('quantize', 'blur', 'contrast', 'exposure', 'monochrome')
SEQUENCE_OPS = ('resample_fps', 'speed')


@dataclass(frozen=True)
class DegradeOp:
    name: str
    value: Optional[float] = None

    def __str__(self):
        return self.name if self.value is None else f"{self.name}={self.value:g}"


def parse_op(text: str) -> DegradeOp:
    name, _, value = text.strip().partition('=')
    name = name.strip().lower()
    if name not in FRAME_OPS + SEQUENCE_OPS:
        raise InvalidArgumentError(f"Unknown degrade op '{name}', expected one of "
                                   f"{FRAME_OPS + SEQUENCE_OPS}")
    if name == 'monochrome':
        if value:
            raise InvalidArgumentError("monochrome takes no value")
        return DegradeOp(name)
    try:
        number = float(value)
    except ValueError:
        raise InvalidArgumentError(f"Degrade op '{text}' needs a numeric value") from None
    if name == 'quantize' and not 2 <= number <= 256:
        raise InvalidArgumentError(f"quantize levels must lie in [2, 256], got {number:g}")
    if name == 'blur' and number < 0:
        raise InvalidArgumentError("blur radius must be non-negative")
    if name in ('contrast', 'exposure') and number < -100:
        raise InvalidArgumentError(f"{name} cannot go below -100%")
    if name in SEQUENCE_OPS and number <= 0:
        raise InvalidArgumentError(f"{name} must be positive")
    return DegradeOp(name, number)


def _clip(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


def quantize(frame: np.ndarray, levels: float) -> np.ndarray:
    step = 256.0 / levels
    return _clip(np.floor(frame / step) * step + step / 2)


def blur(frame: np.ndarray, radius: float) -> np.ndarray:
    if radius == 0:
        return frame.copy()
    return cv2.GaussianBlur(frame, (0, 0), sigmaX=radius, sigmaY=radius)


def contrast(frame: np.ndarray, pct: float) -> np.ndarray:
    return _clip((frame.astype(np.float32) - 128.0) * (1.0 + pct / 100.0) + 128.0)


def exposure(frame: np.ndarray, pct: float) -> np.ndarray:
    return _clip(frame.astype(np.float32) * (1.0 + pct / 100.0))


def monochrome(frame: np.ndarray) -> np.ndarray:
    gray = cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY)
    return np.repeat(gray[:, :, None], 3, axis=2)


_FRAME_FNS: Dict[str, Callable[..., np.ndarray]] = {
    'quantize': quantize,
    'blur': blur,
    'contrast': contrast,
    'exposure': exposure,
    'monochrome': monochrome,
}


def transform_frame(frame: np.ndarray, op: DegradeOp) -> np.ndarray:
    """Applies one per-frame op to an RGB uint8 frame."""
    fn = _FRAME_FNS[op.name]
    return fn(frame) if op.value is None else fn(frame, op.value)


def resample_indices(n_frames: int, fps: float, target_fps: float) -> np.ndarray:
    """Source frame shown at each output frame's mid-exposure time."""
    n_out = int(np.floor(n_frames * target_fps / fps))
    idx = np.floor((np.arange(n_out) + 0.5) * fps / target_fps).astype(int)
    return np.minimum(idx, n_frames - 1)


def speed_indices(n_frames: int, factor: float) -> np.ndarray:
    n_out = int(np.floor(n_frames / factor))
    return np.minimum(np.floor(np.arange(n_out) * factor).astype(int), n_frames - 1)
