"""Per-window adaptation of cell intensities and colors.

After each window the core unit measures its own raw BER and the perceptibility of every cell
(CIEDE2000 between the surface with and without SLM light) and nudges the required intensity
I of each cell: any bit error raises every intensity by delta; an error-free window lets the
perceptible cells dim by delta. The SLM color of a cell is the surface color scaled so that its
channels sum to I.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from optical_signature import config
from optical_signature.errors import InvalidArgumentError, VerificationError
from optical_signature.modulation import LAYOUT, BitmapSchedule, CellLayout, CellRole

logger = logging.getLogger(__name__)


################################################################################################
#                                   Color difference                                          #
################################################################################################
# sRGB -> XYZ (D65, 2 degree observer), scaled so that Y of white is 100
_RGB_TO_XYZ = np.array([[0.4124, 0.3576, 0.1805],
                        [0.2126, 0.7152, 0.0722],
                        [0.0193, 0.1192, 0.9505]]) * 100.0
D65_WHITE = np.array([95.047, 100.0, 108.883])


def rgb_to_lab(rgb) -> np.ndarray:
    """8-bit sRGB (..., 3) to CIE Lab (..., 3)."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    linear = np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)
    xyz = linear @ _RGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > 0.008856, np.cbrt(xyz), 7.787 * xyz + 16.0 / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def ciede2000_lab(lab1, lab2) -> np.ndarray:
    """CIEDE2000 color difference between Lab colors (..., 3), kL = kC = kH = 1."""
    lab1, lab2 = np.asarray(lab1, dtype=np.float64), np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2.0
    g = 0.5 * (1.0 - np.sqrt(c_bar ** 7 / (c_bar ** 7 + 25.0 ** 7)))
    a1p, a2p = (1.0 + g) * a1, (1.0 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0

    chroma_zero = c1p * c2p == 0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dh = np.where(chroma_zero, 0.0, dh)
    dL = L2 - L1
    dC = c2p - c1p
    dH = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    l_bar = (L1 + L2) / 2.0
    cp_bar = (c1p + c2p) / 2.0
    h_sum = h1p + h2p
    h_bar = np.where(np.abs(h1p - h2p) <= 180.0, h_sum / 2.0,
                     np.where(h_sum < 360.0, (h_sum + 360.0) / 2.0, (h_sum - 360.0) / 2.0))
    h_bar = np.where(chroma_zero, h_sum, h_bar)

    t = (1.0 - 0.17 * np.cos(np.radians(h_bar - 30.0)) + 0.24 * np.cos(np.radians(2.0 * h_bar))
         + 0.32 * np.cos(np.radians(3.0 * h_bar + 6.0)) - 0.20 * np.cos(np.radians(4.0 * h_bar - 63.0)))
    d_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    r_c = 2.0 * np.sqrt(cp_bar ** 7 / (cp_bar ** 7 + 25.0 ** 7))
    s_l = 1.0 + 0.015 * (l_bar - 50.0) ** 2 / np.sqrt(20.0 + (l_bar - 50.0) ** 2)
    s_c = 1.0 + 0.045 * cp_bar
    s_h = 1.0 + 0.015 * cp_bar * t
    r_t = -np.sin(np.radians(2.0 * d_theta)) * r_c

    terms = ((dL / s_l) ** 2 + (dC / s_c) ** 2 + (dH / s_h) ** 2
             + r_t * (dC / s_c) * (dH / s_h))
    return np.sqrt(np.maximum(terms, 0.0))


def ciede2000(c1_rgb, c2_rgb) -> np.ndarray:
    return ciede2000_lab(rgb_to_lab(c1_rgb), rgb_to_lab(c2_rgb))


################################################################################################
#                                   Color selection                                           #
################################################################################################
@dataclass(frozen=True)
class SlmColor:
    rgb: Tuple[int, int, int]
    fallback: bool = False


def _round(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def select_color(c_p_off, intensity: float) -> SlmColor:
    """c_SLM = alpha * c_p_off with alpha = I / (R + G + B), clamped per channel to [0, 255].

    Saturated channels pass their excess to the unsaturated ones in proportion to the surface
    color. A black surface falls back to gray.
    """
    if intensity < 0:
        raise InvalidArgumentError(f"Intensity must be non-negative, got {intensity}")
    surface = np.asarray(c_p_off, dtype=np.float64)
    if surface.shape != (3,) or np.any(surface < 0) or np.any(surface > 255):
        raise InvalidArgumentError(f"Surface color must be an RGB triple in [0, 255], got {c_p_off}")
    if intensity == 0:
        return SlmColor((0, 0, 0))
    total = surface.sum()
    if total == 0:
        level = int(_round(min(intensity / 3.0, 255.0)))
        return SlmColor((level, level, level), fallback=True)

    target = min(float(intensity), 3 * 255.0)
    color = surface * (target / total)
    saturated = np.zeros(3, dtype=bool)
    while np.any(color > 255.0):
        saturated |= color > 255.0
        color[saturated] = 255.0
        residual = target - color[saturated].sum()
        free = ~saturated
        weights = surface[free]
        if not np.any(free) or residual <= 0:
            break
        if weights.sum() == 0:
            weights = np.ones_like(weights)
        color[free] = residual * weights / weights.sum()
    rgb = _round(np.clip(color, 0.0, 255.0)).astype(int)
    return SlmColor((int(rgb[0]), int(rgb[1]), int(rgb[2])))


def select_colors(c_p_off: np.ndarray, intensity: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-cell select_color: returns (9, 16, 3) colors and the (9, 16) fallback mask."""
    rows, cols = intensity.shape
    colors = np.zeros((rows, cols, 3), dtype=np.uint8)
    fallback = np.zeros((rows, cols), dtype=bool)
    for r in range(rows):
        for c in range(cols):
            chosen = select_color(c_p_off[r, c], float(intensity[r, c]))
            colors[r, c] = chosen.rgb
            fallback[r, c] = chosen.fallback
    return colors, fallback


################################################################################################
#                                   Adaptation loop                                           #
################################################################################################
@dataclass(frozen=True)
class AdaptParams:
    beta_max: float = config.BETA_MAX
    phi_max: float = config.PHI_MAX
    delta: int = config.DELTA_I
    i_min: int = config.I_MIN
    i_max: int = config.I_MAX


@dataclass(frozen=True, eq=False)
class AdaptState:
    intensity: np.ndarray
    params: AdaptParams = field(default_factory=AdaptParams)
    last_beta: Optional[float] = None
    iteration: int = 0

    def __post_init__(self):
        intensity = np.asarray(self.intensity, dtype=np.int64)
        if np.any(intensity < self.params.i_min) or np.any(intensity > self.params.i_max):
            raise InvalidArgumentError(
                f"Intensities must lie in [{self.params.i_min}, {self.params.i_max}]")
        intensity.setflags(write=False)
        object.__setattr__(self, "intensity", intensity)


def initial_state(layout: CellLayout = LAYOUT, params: Optional[AdaptParams] = None) -> AdaptState:
    params = params or AdaptParams()
    intensity = np.where(layout.mask(CellRole.GUARD), 0, config.I_INIT)
    return AdaptState(intensity=intensity, params=params)


@dataclass(frozen=True, eq=False)
class SurfaceColorMap:
    """Observed patch colors per cell with the SLM off and on; stale cells reuse old c_p_on."""
    c_p_off: np.ndarray
    c_p_on: np.ndarray
    stale: Optional[np.ndarray] = None

    def __post_init__(self):
        off = np.clip(np.asarray(self.c_p_off, dtype=np.float64), 0.0, 255.0)
        on = np.clip(np.asarray(self.c_p_on, dtype=np.float64), 0.0, 255.0)
        if off.shape != on.shape or off.shape[-1] != 3:
            raise InvalidArgumentError("c_p_off and c_p_on must be matching (..., 3) arrays")
        stale = np.zeros(off.shape[:-1], dtype=bool) if self.stale is None \
            else np.asarray(self.stale, dtype=bool)
        object.__setattr__(self, "c_p_off", off)
        object.__setattr__(self, "c_p_on", on)
        object.__setattr__(self, "stale", stale)

    @classmethod
    def uniform(cls, surface_rgb, layout: CellLayout = LAYOUT) -> "SurfaceColorMap":
        off = np.broadcast_to(np.asarray(surface_rgb, dtype=np.float64), layout.shape + (3,))
        return cls(c_p_off=off, c_p_on=off)


BerFn = Callable[[object], float]


def adapt(window_video, state: AdaptState, surface_map: SurfaceColorMap, ber_fn: BerFn,
          layout: CellLayout = LAYOUT) -> Tuple[np.ndarray, AdaptState]:
    """One adaptation step. Returns the next window's cell colors and the new state.

    ber_fn(window_video) is the core unit's self-extraction; a VerificationError counts as the
    worst case (beta = 1).
    """
    params = state.params
    try:
        beta = float(ber_fn(window_video))
    except VerificationError as e:
        logger.warning("Self-extraction failed (%s), treating window as all errors", e.reason)
        beta = 1.0
    active = ~layout.mask(CellRole.GUARD)
    intensity = state.intensity.astype(np.int64).copy()
    if beta > params.beta_max:
        intensity[active] += params.delta
        logger.info("beta=%.4f above %.4f, raising all intensities by %d",
                    beta, params.beta_max, params.delta)
    else:
        delta_e = ciede2000(surface_map.c_p_on, surface_map.c_p_off)
        perceptible = active & (delta_e >= params.phi_max)
        intensity[perceptible] -= params.delta
        if perceptible.any():
            logger.info("Dimming %d perceptible cells", int(perceptible.sum()))
    if np.any(surface_map.stale & active):
        logger.warning("%d cells reuse a stale lit-surface observation",
                       int((surface_map.stale & active).sum()))
    intensity = np.clip(intensity, params.i_min, params.i_max)
    intensity[~active] = 0
    colors, fallback = select_colors(surface_map.c_p_off, intensity)
    if fallback[active].any():
        logger.warning("%d cells sit on a black surface, using gray", int(fallback[active].sum()))
    new_state = AdaptState(intensity=intensity, params=params, last_beta=beta,
                           iteration=state.iteration + 1)
    return colors, new_state


def cell_colors_for(state: AdaptState, surface_map: SurfaceColorMap) -> np.ndarray:
    return select_colors(surface_map.c_p_off, state.intensity)[0]


################################################################################################
#                                   Self-observation                                          #
################################################################################################
def estimate_surface_map(cell_rgb: np.ndarray, frame_times: np.ndarray, schedule: BitmapSchedule,
                         previous: Optional[SurfaceColorMap] = None) -> SurfaceColorMap:
    """Derives c_p_off / c_p_on from per-frame cell colors of the core unit's own recording.

    cell_rgb is (T, 9, 16, 3), frame_times are sample times relative to the window start.
    Off colors come from downtime frames, on colors from frames where the cell was lit. Cells
    never lit keep the previous on color and are marked stale.
    """
    subs = schedule.display_states()
    sub_index = np.floor(np.asarray(frame_times) * config.DISPLAY_RATE).astype(int)
    valid = (sub_index >= 0) & (sub_index < subs.shape[0])
    downtime = valid & (sub_index < config.DOWNTIME_SLOTS * config.SUBFRAMES_PER_SLOT)
    if not downtime.any():
        raise InvalidArgumentError("Window recording holds no downtime frames")
    c_off = cell_rgb[downtime].mean(axis=0)
    lit = np.zeros(cell_rgb.shape[:3], dtype=bool)
    lit[valid] = subs[sub_index[valid]]
    counts = lit.sum(axis=0)
    sums = (cell_rgb * lit[..., None]).sum(axis=0)
    c_on = np.where(counts[..., None] > 0, sums / np.maximum(counts, 1)[..., None], c_off)
    stale = counts == 0
    if previous is not None:
        c_on = np.where(stale[..., None], previous.c_p_on, c_on)
    return SurfaceColorMap(c_p_off=c_off, c_p_on=c_on, stale=stale)
