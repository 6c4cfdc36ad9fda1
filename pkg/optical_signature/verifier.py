"""Video verification: localize the optical signature, recover and authenticate the embedded
signatures, and compare them against features recomputed from the video.

Pipeline: heatmap at f_l -> 4 corner blobs -> homography -> per-cell signals -> window
boundaries from sync downtime -> BPSK demodulation against the sync reference -> concatenated
decoding -> MAC check -> descriptor comparison.
"""
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import tqdm
from scipy import ndimage

from optical_signature import artifacts, config, ecc
from optical_signature.channel_sim import FrameSequence
from optical_signature.descriptor import (FeatureTrack, KeyMaterial, Signature, deserialize,
                                          dyn_distance_scan, verify_mac)
from optical_signature.errors import (CellTooSmallError, DegenerateHomographyError,
                                      InvalidArgumentError, LocalizationError, OutOfViewError,
                                      SyncError, VerificationError)
from optical_signature.lsh_core import Hasher, hamming, make_hashers
from optical_signature.modulation import LAYOUT, CellLayout
from optical_signature.tracks import resample

logger = logging.getLogger(__name__)

AUTHENTIC = "authentic"
FALSIFIED = "falsified"
INCONCLUSIVE = "inconclusive"

VERIFIED = "verified"
TAMPERED = "tampered"
UNVERIFIABLE = "unverifiable"

_PIXELS_PER_CHUNK = 4_000_000
CARRIER_TOLERANCE_HZ = 0.5


################################################################################################
#                                   Localization                                              #
################################################################################################
@dataclass(frozen=True, eq=False)
class Heatmap:
    """Per-pixel power at f_l over the mean power of the other positive frequencies."""
    values: np.ndarray
    n_frames: int
    fps: float
    target_bin: int

    @property
    def target_hz(self) -> float:
        return self.target_bin * self.fps / self.n_frames


def _analysis_length(n_available: int, fps: float) -> int:
    """Largest N <= n_available that puts f_l exactly on an rfft bin, if one exists nearby."""
    period = fps / config.F_L
    for n in range(n_available, max(n_available - int(math.ceil(period)) * 8, 1), -1):
        bins = n * config.F_L / fps
        if abs(bins - round(bins)) < 1e-9:
            return n
    return n_available


def compute_heatmap(frames: FrameSequence, frame_budget: int = config.FRAME_BUDGET) -> Heatmap:
    fps = frames.fps
    if fps <= 2 * config.F_L:
        raise LocalizationError(f"{fps:.2f} fps cannot resolve the {config.F_L:g} Hz beacon")
    n = _analysis_length(min(len(frames), frame_budget), fps)
    k_l = int(round(config.F_L * n / fps))
    k_d = int(round(config.F_D * n / fps))
    if n < 2 or k_l < 1 or k_l > n // 2:
        raise LocalizationError(f"{n} frames are too few to analyze {config.F_L:g} Hz")
    n_bins = n // 2 + 1
    off = np.ones(n_bins, dtype=bool)
    off[[0, k_l, k_d]] = False

    _, h, w, _ = frames.frames.shape
    rows_per_chunk = max(1, _PIXELS_PER_CHUNK // (n * w))
    values = np.zeros((h, w), dtype=np.float64)
    for r0 in range(0, h, rows_per_chunk):
        gray = frames.frames[:n, r0:r0 + rows_per_chunk].astype(np.float32).mean(axis=-1)
        power = np.abs(np.fft.rfft(gray, axis=0)) ** 2
        target = power[k_l]
        noise = power[off].mean(axis=0)
        values[r0:r0 + rows_per_chunk] = np.where(noise > 0, target / np.maximum(noise, 1e-30), 0.0)
    logger.debug("Heatmap over %d frames, f_l bin %d (%.3f Hz)", n, k_l, k_l * fps / n)
    return Heatmap(values=values, n_frames=n, fps=fps, target_bin=k_l)


@dataclass(frozen=True, eq=False)
class Localization:
    centroids: np.ndarray  # (4, 2) camera (x, y), TL, TR, BR, BL
    areas: np.ndarray
    heatmap: Heatmap
    threshold: float


def order_corners(points: np.ndarray) -> np.ndarray:
    """TL, TR, BR, BL for a roughly upright quadrilateral."""
    points = np.asarray(points, dtype=np.float64)
    by_y = np.argsort(points[:, 1], kind="stable")
    top, bottom = points[by_y[:2]], points[by_y[2:]]
    top = top[np.argsort(top[:, 0], kind="stable")]
    bottom = bottom[np.argsort(-bottom[:, 0], kind="stable")]
    return np.vstack([top, bottom])


def localize(frames: FrameSequence, frame_budget: int = config.FRAME_BUDGET) -> Localization:
    heatmap = compute_heatmap(frames, frame_budget)
    k = config.HEATMAP_BLUR_KSIZE
    smooth = cv2.GaussianBlur(heatmap.values.astype(np.float32), (k, k), 0)
    threshold = config.HEATMAP_THRESHOLD_FACTOR * max(float(np.median(smooth)), 1.0)
    binary = (smooth > threshold).astype(np.uint8)
    binary = cv2.morphologyEx(binary, cv2.MORPH_OPEN, np.ones((3, 3), dtype=np.uint8))
    n_labels, _, stats, centroids = cv2.connectedComponentsWithStats(binary, connectivity=8)
    blobs = [(stats[i, cv2.CC_STAT_AREA], centroids[i]) for i in range(1, n_labels)
             if stats[i, cv2.CC_STAT_AREA] >= config.MIN_BLOB_AREA]
    logger.debug("Heatmap threshold %.3f, %d candidate blobs", threshold, len(blobs))
    if len(blobs) < 4:
        raise LocalizationError(f"Found {len(blobs)} localization blobs, need 4")
    blobs.sort(key=lambda b: -b[0])
    kept = blobs[:4]
    points = np.array([c for _, c in kept])
    ordered = order_corners(points)
    areas = np.array([next(a for a, c in kept if np.array_equal(c, p)) for p in ordered])
    logger.info("Localized corners at %s", np.round(ordered, 1).tolist())
    return Localization(centroids=ordered, areas=areas, heatmap=heatmap, threshold=threshold)


################################################################################################
#                                   Homography                                                #
################################################################################################
@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray
    reprojection_error: float


def _normalizer(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    mean_dist = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if mean_dist == 0:
        raise DegenerateHomographyError("All points coincide")
    s = math.sqrt(2) / mean_dist
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])


def _check_configuration(points: np.ndarray, name: str):
    scale = ((points - points.mean(axis=0)) ** 2).sum(axis=1).mean()
    for i, j, k in itertools.combinations(range(len(points)), 3):
        a, b, c = points[i], points[j], points[k]
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) / 2
        if area <= 1e-6 * scale:
            raise DegenerateHomographyError(f"{name} points {i}, {j}, {k} are collinear")


def _apply(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.hstack([points, np.ones((len(points), 1))]) @ H.T
    return pts[:, :2] / pts[:, 2:3]


def estimate_homography(src, dst) -> Homography:
    """Normalized DLT from >= 4 point pairs (src bitmap pixels -> dst camera pixels)."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 4:
        raise InvalidArgumentError(f"Need >= 4 matching (x, y) pairs, got {src.shape} and {dst.shape}")
    _check_configuration(src, "source")
    _check_configuration(dst, "destination")
    t_src, t_dst = _normalizer(src), _normalizer(dst)
    s, d = _apply(t_src, src), _apply(t_dst, dst)
    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, sing, vt = np.linalg.svd(np.asarray(rows))
    H = np.linalg.inv(t_dst) @ vt[-1].reshape(3, 3) @ t_src
    if abs(H[2, 2]) < 1e-12 or abs(np.linalg.det(H)) < 1e-12 * abs(H[2, 2]) ** 3:
        raise DegenerateHomographyError("Homography is singular")
    H = H / H[2, 2]
    error = float(np.sqrt(((_apply(H, src) - dst) ** 2).sum(axis=1)).max())
    logger.debug("Homography reprojection error %.4f px", error)
    return Homography(matrix=H, reprojection_error=error)


################################################################################################
#                                   Cell extraction                                           #
################################################################################################
def cell_label_image(H: np.ndarray, frame_size: Tuple[int, int],
                     layout: CellLayout = LAYOUT) -> np.ndarray:
    """Label image with 1 + r * cols + c inside each cell's inset, warped polygon; 0 elsewhere."""
    w, h = frame_size
    rows, cols = layout.shape
    labels = np.zeros((h, w), dtype=np.int32)
    inset = config.CELL_INSET * layout.cell_px
    for r in range(rows):
        for c in range(cols):
            x0, y0, x1, y1 = layout.cell_rect(r, c)
            quad = np.array([[x0 + inset, y0 + inset], [x1 - inset, y0 + inset],
                             [x1 - inset, y1 - inset], [x0 + inset, y1 - inset]])
            warped = _apply(np.asarray(H, dtype=np.float64), quad)
            if np.any(warped < 0) or np.any(warped[:, 0] > w - 1) or np.any(warped[:, 1] > h - 1):
                raise OutOfViewError(f"Cell ({r}, {c}) projects outside the {w}x{h} frame")
            if cv2.contourArea(warped.astype(np.float32)) < config.MIN_CELL_AREA:
                raise CellTooSmallError(f"Cell ({r}, {c}) covers less than "
                                        f"{config.MIN_CELL_AREA:g} px after warping")
            # fixed-point vertices, 4 fractional bits
            cv2.fillConvexPoly(labels, np.round(warped * 16).astype(np.int32),
                               color=1 + r * cols + c, shift=4)
    counts = np.bincount(labels.ravel(), minlength=rows * cols + 1)[1:]
    if np.any(counts == 0):
        r, c = divmod(int(np.argmin(counts)), cols)
        raise CellTooSmallError(f"Cell ({r}, {c}) covers no whole pixel")
    return labels


def extract_cell_signals(frames: FrameSequence, H: np.ndarray, layout: CellLayout = LAYOUT,
                         rgb: bool = False, progress: bool = False) -> np.ndarray:
    """Mean intensity per cell and frame: (T, 9, 16), or (T, 9, 16, 3) with rgb=True."""
    _, h, w, _ = frames.frames.shape
    labels = cell_label_image(H, (w, h), layout).ravel()
    n_cells = layout.shape[0] * layout.shape[1]
    counts = np.bincount(labels, minlength=n_cells + 1)[1:].astype(np.float64)
    out_shape = (len(frames),) + layout.shape + ((3,) if rgb else ())
    out = np.empty(out_shape, dtype=np.float64)
    for t, frame in enumerate(tqdm.tqdm(frames.frames, desc="extract", disable=not progress)):
        pixels = frame.reshape(-1, 3).astype(np.float64)
        if rgb:
            for ch in range(3):
                sums = np.bincount(labels, weights=pixels[:, ch], minlength=n_cells + 1)[1:]
                out[t, ..., ch] = (sums / counts).reshape(layout.shape)
        else:
            sums = np.bincount(labels, weights=pixels.mean(axis=1), minlength=n_cells + 1)[1:]
            out[t] = (sums / counts).reshape(layout.shape)
    return out


################################################################################################
#                                   Synchronization                                           #
################################################################################################
@dataclass(frozen=True)
class WindowBounds:
    start: int
    mod_start: int
    end: int


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def _carrier_hz(segment: np.ndarray, fps: float) -> float:
    spectrum = np.abs(np.fft.rfft(segment - segment.mean()))
    spectrum[0] = 0.0
    return float(np.argmax(spectrum) * fps / len(segment))


def find_windows(sync_signals, fps: float) -> List[WindowBounds]:
    """Window boundaries from the downtime gaps of the aggregate sync signal.

    A window is accepted when it lies fully inside the video and its sync cells oscillate at
    f_d; partial windows at either end are dropped.
    """
    signals = np.asarray(sync_signals, dtype=np.float64)
    aggregate = signals.mean(axis=1) if signals.ndim == 2 else signals
    n = len(aggregate)
    period = max(2, int(round(fps / config.F_D)))
    envelope = (ndimage.maximum_filter1d(aggregate, period, mode="nearest")
                - ndimage.minimum_filter1d(aggregate, period, mode="nearest"))
    high = float(np.percentile(envelope, 90))
    if high <= 1e-9:
        raise SyncError("Sync signal is flat, no modulation found")
    low_runs = _runs(envelope < config.ENVELOPE_FRACTION * high)
    if not low_runs:
        raise SyncError("No downtime found in the sync signal")

    lit = float(np.percentile(aggregate, 95))
    downtime = int(round(config.DOWNTIME_S * fps))
    window = int(round(config.WINDOW_S * fps))
    modulation = int(round(config.MODULATION_S * fps))
    windows = []
    for run_start, run_end in low_runs:
        dark = float(np.median(aggregate[run_start:run_end]))
        midpoint = (dark + lit) / 2
        search = aggregate[run_start:min(n, run_end + period)]
        above = np.flatnonzero(search > midpoint)
        if above.size == 0:
            continue
        mod_start = run_start + int(above[0])
        start = mod_start - downtime
        if start < 0 or start + window > n:
            logger.debug("Dropping partial window at frame %d", start)
            continue
        carrier = _carrier_hz(aggregate[mod_start:mod_start + modulation], fps)
        if abs(carrier - config.F_D) > CARRIER_TOLERANCE_HZ:
            logger.warning("Window at frame %d carries sync at %.2f Hz, expected %.2f Hz",
                           start, carrier, config.F_D)
            continue
        if windows and start < windows[-1].end - period:
            continue
        windows.append(WindowBounds(start=start, mod_start=mod_start, end=start + window))
    if not windows:
        raise SyncError("No complete window with a sync carrier at f_d")
    logger.info("Found %d windows", len(windows))
    return windows


################################################################################################
#                                   Demodulation                                              #
################################################################################################
def detrend(signals: np.ndarray, fps: float) -> np.ndarray:
    """Subtracts a DETREND_S moving average along time (axis 0)."""
    size = max(1, int(round(config.DETREND_S * fps)))
    signals = np.asarray(signals, dtype=np.float64)
    return signals - ndimage.uniform_filter1d(signals, size=size, axis=0, mode="nearest")


def _pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Correlation along axis 0 of a (L, ...) with b (L,); 0 where either side is flat."""
    a = a - a.mean(axis=0)
    b = b - b.mean()
    num = np.tensordot(b, a, axes=(0, 0))
    den = np.sqrt((a ** 2).sum(axis=0) * (b ** 2).sum())
    return np.where(den > 1e-12, num / np.maximum(den, 1e-300), 0.0)


def bit_intervals(mod_start: int, fps: float) -> List[Tuple[int, int]]:
    slot = fps / config.SLOT_RATE
    return [(mod_start + int(round(2 * b * slot)), mod_start + int(round((2 * b + 2) * slot)))
            for b in range(config.DATA_BITS_PER_CELL)]


def demodulate(cell_signal, sync_reference, mod_start: int, fps: float) -> np.ndarray:
    """Soft bits of one window: (12,) for a (T,) signal, (n, 12) for (T, n) signals.

    Signals are expected detrended. +1 means in phase with the sync reference (bit 0).
    """
    cell_signal = np.asarray(cell_signal, dtype=np.float64)
    reference = np.asarray(sync_reference, dtype=np.float64)
    intervals = bit_intervals(mod_start, fps)
    if intervals[-1][1] > len(reference) or intervals[-1][1] > len(cell_signal):
        raise InvalidArgumentError("Signal ends before the window's last bit")
    soft = np.stack([_pearson(cell_signal[a:b], reference[a:b]) for a, b in intervals], axis=-1)
    return np.clip(soft, -1.0, 1.0)


def sync_reference(detrended: np.ndarray, layout: CellLayout = LAYOUT) -> np.ndarray:
    rows, cols = np.array(layout.sync_cells).T
    return detrended[:, rows, cols].mean(axis=1)


def demodulate_window(detrended: np.ndarray, bounds: WindowBounds, fps: float,
                      reference: Optional[np.ndarray] = None,
                      layout: CellLayout = LAYOUT) -> np.ndarray:
    """1044 soft values of one window in data_order, 12 per cell."""
    if reference is None:
        reference = sync_reference(detrended, layout)
    rows, cols = np.array(layout.data_order).T
    soft = demodulate(detrended[:, rows, cols], reference, bounds.mod_start, fps)
    return soft.ravel()


################################################################################################
#                                   Signature recovery                                        #
################################################################################################
@dataclass(eq=False)
class RecoveredWindow:
    index: int
    bounds: WindowBounds
    soft_bits: np.ndarray
    signature: Optional[Signature] = None
    mac_valid: bool = False
    failure_reason: Optional[str] = None
    decode: Optional[ecc.WindowDecode] = None

    @property
    def window_no(self) -> Optional[int]:
        if self.signature is None or not self.mac_valid:
            return None
        return self.signature.descriptor.meta.window_no


@dataclass(eq=False)
class Recovery:
    fps: float
    n_frames: int
    localization: Localization
    homography: Homography
    windows: List[RecoveredWindow]
    reference: np.ndarray


def decode_recovered(soft: np.ndarray, key: KeyMaterial, bounds: Sequence[WindowBounds]
                     ) -> List[RecoveredWindow]:
    decodes = ecc.decode_windows(soft) if len(bounds) else []
    recovered = []
    for i, (b, dec) in enumerate(zip(bounds, decodes)):
        window = RecoveredWindow(index=i, bounds=b, soft_bits=soft[i], decode=dec)
        if not dec.ok:
            window.failure_reason = "decode"
            logger.warning("Window %d at frame %d is not decodable", i, b.start)
        else:
            window.signature = deserialize(dec.signature_bits)
            window.mac_valid = verify_mac(window.signature, key)
            if not window.mac_valid:
                window.failure_reason = "mac"
                logger.warning("Window %d at frame %d carries an invalid MAC", i, b.start)
        recovered.append(window)
    return recovered


def recover_signatures(frames: FrameSequence, key: KeyMaterial,
                       frame_budget: int = config.FRAME_BUDGET, layout: CellLayout = LAYOUT,
                       progress: bool = False) -> Recovery:
    """Localize, extract, synchronize, demodulate and decode every complete window.

    Video-level failures raise VerificationError subclasses; window-level failures are
    recorded on the window.
    """
    loc = localize(frames, frame_budget)
    H = estimate_homography(layout.localization_centers(), loc.centroids)
    signals = extract_cell_signals(frames, H.matrix, layout, progress=progress)
    rows, cols = np.array(layout.sync_cells).T
    bounds = find_windows(signals[:, rows, cols], frames.fps)
    detrended = detrend(signals, frames.fps)
    reference = sync_reference(detrended, layout)
    soft = np.stack([demodulate_window(detrended, b, frames.fps, reference, layout)
                     for b in bounds])
    windows = decode_recovered(soft, key, bounds)
    n_ok = sum(w.mac_valid for w in windows)
    logger.info("Recovered %d of %d windows with a valid MAC", n_ok, len(windows))
    return Recovery(fps=frames.fps, n_frames=len(frames), localization=loc, homography=H,
                    windows=windows, reference=reference)


################################################################################################
#                                   Comparison and decision                                   #
################################################################################################
@dataclass(frozen=True)
class Thresholds:
    dyn: int = config.DYN_THRESH
    identity: int = config.ID_THRESH
    epsilon: int = config.ALIGNMENT_EPSILON


@dataclass
class WindowReport:
    index: int
    start_frame: int
    window_no: Optional[int]
    mac_valid: bool
    dyn_distance: Optional[int] = None
    id_distance: Optional[int] = None
    alignment_offset: Optional[int] = None
    status: str = UNVERIFIABLE
    reason: Optional[str] = None


@dataclass
class VerificationReport:
    windows: List[WindowReport]
    decision: str
    max_dyn_distance: Optional[int] = None
    max_id_distance: Optional[int] = None
    failure_reason: Optional[str] = None
    consecutive: bool = True
    unverified_lead_s: float = 0.0
    unverified_tail_s: float = 0.0
    thresholds: Thresholds = field(default_factory=Thresholds)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": config.SCHEMA_VERSION,
            "decision": self.decision,
            "max_dyn_distance": self.max_dyn_distance,
            "max_id_distance": self.max_id_distance,
            "failure_reason": self.failure_reason,
            "consecutive": self.consecutive,
            "unverified_lead_s": self.unverified_lead_s,
            "unverified_tail_s": self.unverified_tail_s,
            "thresholds": {"dyn": self.thresholds.dyn, "identity": self.thresholds.identity,
                           "epsilon": self.thresholds.epsilon},
            "windows": [vars(w) for w in self.windows],
        }


def failure_report(error: VerificationError) -> VerificationReport:
    return VerificationReport(windows=[], decision=INCONCLUSIVE, failure_reason=error.reason)


def _content_start(bounds: WindowBounds, video_fps: float) -> int:
    return int(round((bounds.start / video_fps - config.WINDOW_S) * config.CORE_FPS))


def _identity_distances(windows: List[RecoveredWindow], starts: Dict[int, int],
                        track: FeatureTrack, id_hasher: Hasher) -> Dict[int, int]:
    """Per-frame identity distance maxima, keyed by window index, for every even/odd pair."""
    by_index = {w.index: w for w in windows if w.window_no is not None}
    n = config.WINDOW_FRAMES
    out = {}
    for index, even in by_index.items():
        if even.window_no % 2:
            continue
        odd = by_index.get(index + 1)
        if odd is None or odd.window_no != (even.window_no + 1) % 2 ** config.WINDOW_NO_BITS:
            continue
        full = np.concatenate([even.signature.descriptor.id_hash_half,
                               odd.signature.descriptor.id_hash_half])
        first, last = starts[even.index], starts[odd.index] + n
        if first < 0 or last > track.n_frames:
            continue
        hashes = id_hasher.hash_many(track.identities(first, last - first))
        worst = max(hamming(h, full) for h in hashes)
        out[even.index] = out[odd.index] = worst
    return out


def compare(recovered: Sequence[RecoveredWindow], track_from_video: FeatureTrack,
            hashers: Tuple[Hasher, Hasher], video_fps: float,
            thresholds: Thresholds = Thresholds(), video_duration_s: Optional[float] = None
            ) -> VerificationReport:
    """Checks each recovered descriptor against the content the window describes.

    The signature found in video window v describes the 4.5 s before v's start.
    """
    dyn_hasher, id_hasher = hashers
    track = resample(track_from_video, config.CORE_FPS)
    starts = {w.index: _content_start(w.bounds, video_fps) for w in recovered}
    id_distances = _identity_distances(list(recovered), starts, track, id_hasher)

    reports = []
    for w in recovered:
        rep = WindowReport(index=w.index, start_frame=w.bounds.start, window_no=w.window_no,
                           mac_valid=w.mac_valid, reason=w.failure_reason)
        reports.append(rep)
        if not w.mac_valid:
            continue
        descriptor = w.signature.descriptor
        rep.id_distance = id_distances.get(w.index)
        if descriptor.degenerate:
            rep.reason = "sentinel"
        else:
            try:
                rep.dyn_distance, rep.alignment_offset = dyn_distance_scan(
                    track, starts[w.index], descriptor.dyn_hash, dyn_hasher, thresholds.epsilon)
            except InvalidArgumentError:
                rep.reason = "no_content"
        over = (rep.dyn_distance is not None and rep.dyn_distance > thresholds.dyn) or \
               (rep.id_distance is not None and rep.id_distance > thresholds.identity)
        if over:
            rep.status = TAMPERED
        elif rep.dyn_distance is not None:
            rep.status = VERIFIED

    valid = [r for r in reports if r.mac_valid]
    dyn = [r.dyn_distance for r in valid if r.dyn_distance is not None]
    ids = [r.id_distance for r in valid if r.id_distance is not None]
    max_dyn = max(dyn) if dyn else None
    max_id = max(ids) if ids else None

    consecutive = all(
        (b.window_no - a.window_no) % 2 ** config.WINDOW_NO_BITS == (b.index - a.index)
        for a, b in zip(valid, valid[1:]))
    verified = [r for r in reports if r.status == VERIFIED]
    # a MAC-valid sentinel window is not a hole
    holes = [r for r in reports if r.status == UNVERIFIABLE and r.reason != "sentinel"]

    if (max_dyn is not None and max_dyn > thresholds.dyn) or \
            (max_id is not None and max_id > thresholds.identity):
        decision = FALSIFIED
    elif verified and consecutive and not holes:
        decision = AUTHENTIC
    else:
        decision = INCONCLUSIVE

    lead, tail = 0.0, 0.0
    if verified:
        # verified content spans [first.start - 4.5 s, last.start)
        lead = max(0.0, verified[0].start_frame / video_fps - config.WINDOW_S)
        if video_duration_s is not None:
            tail = max(0.0, video_duration_s - verified[-1].start_frame / video_fps)
    elif video_duration_s is not None:
        tail = video_duration_s
    report = VerificationReport(windows=reports, decision=decision, max_dyn_distance=max_dyn,
                                max_id_distance=max_id, consecutive=consecutive,
                                unverified_lead_s=lead, unverified_tail_s=tail,
                                thresholds=thresholds)
    logger.info("Decision %s (max dyn %s, max id %s)", decision, max_dyn, max_id)
    return report


def verify(frames: FrameSequence, track: FeatureTrack, key: KeyMaterial,
           out_dir: Optional[str] = None, frame_budget: int = config.FRAME_BUDGET,
           thresholds: Thresholds = Thresholds(), progress: bool = False) -> VerificationReport:
    """Full verification; video-level failures come back as an inconclusive report."""
    recovery = None
    try:
        recovery = recover_signatures(frames, key, frame_budget, progress=progress)
        report = compare(recovery.windows, track, make_hashers(key.lsh_seed), frames.fps,
                         thresholds, video_duration_s=frames.duration_s)
    except VerificationError as e:
        logger.warning("Verification failed: %s", e)
        report = failure_report(e)
    if out_dir is not None:
        write_outputs(out_dir, report, recovery)
    return report


def write_outputs(out_dir: str, report: VerificationReport, recovery: Optional[Recovery]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    # one suffix per run: report-N.json, heatmap-N.png, analysis-N.h5
    suffix = artifacts.free_suffix(out_dir, [("report", ".json"), ("heatmap", ".png"),
                                             ("analysis", ".h5")])
    path = artifacts.write_json(os.path.join(out_dir, f"report{suffix}.json"), report.to_dict())
    if suffix:
        logger.info("report.json exists, writing %s", os.path.basename(path))
    if recovery is not None:
        artifacts.save_heatmap_png(os.path.join(out_dir, f"heatmap{suffix}.png"),
                                   recovery.localization.heatmap.values)
        artifacts.save_analysis(os.path.join(out_dir, f"analysis{suffix}.h5"), {
            "heatmap": recovery.localization.heatmap.values,
            "homography": recovery.homography.matrix,
            "corners": recovery.localization.centroids,
            "sync_reference": recovery.reference,
            "window_bounds": np.array([[w.bounds.start, w.bounds.mod_start, w.bounds.end]
                                       for w in recovery.windows], dtype=np.int64).reshape(-1, 3),
            "soft_bits": np.array([w.soft_bits for w in recovery.windows]).reshape(
                -1, config.CODED_BITS),
        })
    return path
