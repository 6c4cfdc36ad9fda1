"""End-to-end compositions behind the CLI: embedding, simulated runs, sweeps and LSH analysis."""
import concurrent.futures
import datetime
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import tqdm
from scipy import stats

from optical_signature import artifacts, config, ecc, lsh_core, tracks
from optical_signature.adaptive import (AdaptState, SurfaceColorMap, adapt, cell_colors_for,
                                        estimate_surface_map, initial_state)
from optical_signature.channel_sim import (REFERENCE_LUX, FrameSequence, SceneConfig, degrade,
                                           render, scene_from_dict, scene_to_dict, with_scene)
from optical_signature.descriptor import (FeatureTrack, KeyMaterial, Signature, WindowMeta,
                                          build_dynamic_vector, date_code, generate_key,
                                          make_descriptor, seal, serialize)
from optical_signature.errors import InvalidArgumentError, TrackTooShortError, VerificationError
from optical_signature.lsh_core import hamming, make_hashers
from optical_signature.modulation import (LAYOUT, BitmapSchedule, CellLayout, CellRole,
                                          save_schedules, schedule_window)
from optical_signature.verifier import (WindowBounds, demodulate_window, detrend,
                                        extract_cell_signals, recover_signatures)

logger = logging.getLogger(__name__)

SIGNATURES_NAME = "signatures.json"


def derive_seed(*entropy: int) -> int:
    """Deterministic 63-bit seed from a sequence of non-negative integers."""
    state = np.random.SeedSequence(list(entropy)).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


################################################################################################
#                                   Self-extraction                                           #
################################################################################################
def self_extraction_ber(window_video: FrameSequence, coded_bits, homography: np.ndarray,
                        window_start_s: float = 0.0, layout: CellLayout = LAYOUT) -> float:
    """Raw BER of the core unit's own recording of one window.

    The core unit knows where its bitmap lands and when the window starts, so no localization
    or synchronization is needed.
    """
    fps = window_video.fps
    signals = detrend(extract_cell_signals(window_video, homography, layout), fps)
    start = int(round(window_start_s * fps))
    mod_start = start + int(round(config.DOWNTIME_S * fps))
    bounds = WindowBounds(start=start, mod_start=mod_start,
                          end=start + int(round(config.WINDOW_S * fps)))
    soft = demodulate_window(signals, bounds, fps, layout=layout)
    hard = (soft < 0).astype(np.uint8)
    return float(np.mean(hard != np.asarray(coded_bits, dtype=np.uint8).ravel()))


################################################################################################
#                                   Embedding                                                 #
################################################################################################
@dataclass(frozen=True)
class EmbedConfig:
    unit_id: int = 0
    date: Optional[int] = None
    first_window_no: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0
    adaptive: bool = True


@dataclass(eq=False)
class WindowRecord:
    window_no: int
    content_start_frame: int
    signature: Signature
    coded_bits: np.ndarray
    degenerate: bool
    mean_intensity: float
    beta: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window_no": self.window_no,
            "content_start_frame": self.content_start_frame,
            "payload": np.packbits(serialize(self.signature)).tobytes().hex(),
            "degenerate": self.degenerate,
            "mean_intensity": self.mean_intensity,
            "beta": self.beta,
        }


@dataclass(eq=False)
class EmbedResult:
    schedules: List[BitmapSchedule]
    records: List[WindowRecord]
    state: AdaptState


def _core_surface_map(scene: SceneConfig) -> SurfaceColorMap:
    return SurfaceColorMap.uniform(np.asarray(scene.surface_rgb) * scene.ambient_lux / REFERENCE_LUX)


def embed(track: FeatureTrack, key: KeyMaterial, cfg: EmbedConfig = EmbedConfig(),
          progress: bool = False) -> EmbedResult:
    """Windows the track, seals one signature per window and schedules it for display.

    With cfg.adaptive, every window is also rendered through cfg.scene as the core unit's own
    recording, and the adaptation loop picks the next window's colors from it.
    """
    track = tracks.resample(track, config.CORE_FPS)
    n_windows = tracks.window_count(track)
    if n_windows == 0:
        raise TrackTooShortError(
            f"Track of {track.duration_s:.2f} s holds no complete {config.WINDOW_S} s window")
    hashers = make_hashers(key.lsh_seed)
    date = cfg.date if cfg.date is not None else date_code()
    meta = WindowMeta(cfg.first_window_no, cfg.unit_id, date)
    state = initial_state()
    surface_map = _core_surface_map(cfg.scene)
    self_scene = with_scene(cfg.scene, lead_in_s=0.0, lead_out_s=0.0)
    H = cfg.scene.matrix()

    schedules, records = [], []
    for w in tqdm.tqdm(range(n_windows), desc="embed", disable=not progress):
        start = w * config.WINDOW_FRAMES
        descriptor = make_descriptor(track, meta, hashers, window_start_frame=start,
                                     sentinel_on_degenerate=True)
        signature = seal(descriptor, key)
        coded = ecc.encode_window(serialize(signature))
        schedule = schedule_window(coded, cell_colors_for(state, surface_map), meta.window_no)
        active = ~LAYOUT.mask(CellRole.GUARD)
        record = WindowRecord(window_no=meta.window_no, content_start_frame=start,
                              signature=signature, coded_bits=coded,
                              degenerate=descriptor.degenerate,
                              mean_intensity=float(state.intensity[active].mean()))
        if cfg.adaptive:
            recording = render(schedule, self_scene, seed=derive_seed(cfg.seed, w))
            cell_rgb = extract_cell_signals(recording, H, rgb=True)
            times = (np.arange(len(recording)) + 0.5) / recording.fps
            surface_map = estimate_surface_map(cell_rgb, times, schedule, previous=surface_map)
            _, state = adapt(recording, state, surface_map,
                             lambda video: self_extraction_ber(video, coded, H))
            record.beta = state.last_beta
        schedules.append(schedule)
        records.append(record)
        meta = meta.next()
    logger.info("Embedded %d windows", n_windows)
    return EmbedResult(schedules=schedules, records=records, state=state)


def write_embed(result: EmbedResult, out_dir: str, write_bitmaps: bool = True) -> str:
    save_schedules(result.schedules, out_dir, write_bitmaps=write_bitmaps)
    return artifacts.write_json(os.path.join(out_dir, SIGNATURES_NAME), {
        "windows": [r.to_dict() for r in result.records],
        "final_intensity": result.state.intensity,
    })


def simulate(schedules: Sequence[BitmapSchedule], scene: SceneConfig, seed: int,
             degrade_ops: Sequence[str] = (), progress: bool = False) -> FrameSequence:
    return degrade(render(schedules, scene, seed, progress=progress), degrade_ops,
                   progress=progress)


################################################################################################
#                                   Physical-layer runs                                       #
################################################################################################
@dataclass
class RunResult:
    raw_ber: float
    post_viterbi_ber: float
    final_ber: float
    windows_ok: int
    n_windows: int
    failure_reason: Optional[str] = None


def _match_windows(recovered, n_windows: int, fps: float, lead_in_s: float) -> Dict[int, Any]:
    """Recovered window per embedded window, matched on start time within a quarter second."""
    matched = {}
    for w in recovered:
        k = int(round((w.bounds.start / fps - lead_in_s) / config.WINDOW_S))
        expected = lead_in_s + k * config.WINDOW_S
        if 0 <= k < n_windows and abs(w.bounds.start / fps - expected) < 0.25:
            matched[k] = w
    return matched


def physical_run(track: FeatureTrack, key: KeyMaterial, scene: SceneConfig, seed: int,
                 degrade_ops: Sequence[str] = (), adaptive: bool = False) -> RunResult:
    """Embeds, renders, degrades and recovers; BERs are averaged over all embedded windows.

    Windows that are not found count as coin flips (BER 0.5) at every stage.
    """
    result = embed(track, key, EmbedConfig(scene=scene, seed=seed, adaptive=adaptive, date=0))
    n = len(result.records)
    frames = simulate(result.schedules, scene, seed, degrade_ops)
    try:
        recovery = recover_signatures(frames, key)
    except VerificationError as e:
        return RunResult(0.5, 0.5, 0.5, 0, n, failure_reason=e.reason)
    matched = _match_windows(recovery.windows, n, frames.fps, scene.lead_in_s)
    raw, post, final, ok = [], [], [], 0
    for k, record in enumerate(result.records):
        window = matched.get(k)
        if window is None:
            raw.append(0.5)
            post.append(0.5)
            final.append(0.5)
            continue
        raw.append(float(np.mean((window.soft_bits < 0) != record.coded_bits)))
        expected_cw = ecc.viterbi_soft(ecc.hard_to_soft(record.coded_bits))
        post.append(float(np.mean(window.decode.viterbi_bits != expected_cw)))
        if window.decode.ok:
            final.append(float(np.mean(window.decode.signature_bits != serialize(record.signature))))
            ok += window.mac_valid
        else:
            final.append(0.5)
    return RunResult(float(np.mean(raw)), float(np.mean(post)), float(np.mean(final)), ok, n)


################################################################################################
#                                   Sweeps                                                    #
################################################################################################
SWEEP_AXES = ('noise', 'cell_px', 'ambient', 'degrade', 'tamper_fraction')
_SCENE_AXIS_FIELDS = {'noise': 'sensor_noise_sigma', 'cell_px': 'cell_px', 'ambient': 'ambient_lux'}
JITTER_SIGMA = 0.05


@dataclass(frozen=True)
class SweepTask:
    axis: str
    value: Union[float, str]
    value_index: int
    rep: int
    seed: int
    scene: Dict[str, Any]
    n_windows: int


def parse_range(text: str, axis: str) -> List[Union[float, str]]:
    """'a:b:n' gives n evenly spaced values, 'v1,v2,...' an explicit list (op strings for degrade)."""
    text = text.strip()
    if not text:
        raise InvalidArgumentError("Empty sweep range")
    if axis == 'degrade':
        return [v.strip() for v in text.split(',') if v.strip()]
    try:
        if ':' in text:
            a, b, n = text.split(':')
            if int(n) < 1:
                raise InvalidArgumentError("A sweep range needs at least one value")
            return [float(v) for v in np.linspace(float(a), float(b), int(n))]
        return [float(v) for v in text.split(',')]
    except ValueError as e:
        raise InvalidArgumentError(f"Cannot parse sweep range '{text}': {e}") from None


def _tamper_replication(task: SweepTask) -> Dict[str, Any]:
    rng = np.random.default_rng(task.seed)
    track_seed, key_seed, tamper_seed, jitter_seed = (int(s) for s in rng.integers(0, 2 ** 62, 4))
    track = tracks.synth_track(tracks.SynthConfig(duration_s=config.WINDOW_S), track_seed)
    dyn_hasher, _ = make_hashers(generate_key(key_seed).lsh_seed)
    reference = lsh_core.hash_vector(dyn_hasher, _dyn_vector(track))
    n_tampered = int(round(float(task.value) * config.WINDOW_FRAMES))
    tampered = tracks.tamper(track, 0, n_tampered, tamper_seed)
    jittered = tracks.jitter(track, JITTER_SIGMA, jitter_seed)
    return {
        "tampered": hamming(reference, lsh_core.hash_vector(dyn_hasher, _dyn_vector(tampered))),
        "jitter": hamming(reference, lsh_core.hash_vector(dyn_hasher, _dyn_vector(jittered))),
    }


def _dyn_vector(track: FeatureTrack) -> np.ndarray:
    return lsh_core.zero_mean(build_dynamic_vector(track, 0).values)


def _physical_replication(task: SweepTask) -> Dict[str, Any]:
    rng = np.random.default_rng(task.seed)
    track_seed, key_seed, render_seed = (int(s) for s in rng.integers(0, 2 ** 62, 3))
    scene = scene_from_dict(task.scene)
    ops: Tuple[str, ...] = ()
    if task.axis == 'degrade':
        ops = (str(task.value),)
    else:
        scene = with_scene(scene, **{_SCENE_AXIS_FIELDS[task.axis]: float(task.value)})
    track = tracks.synth_track(tracks.SynthConfig(duration_s=task.n_windows * config.WINDOW_S),
                               track_seed)
    run = physical_run(track, generate_key(key_seed), scene, render_seed, ops)
    return asdict(run)


def run_replication(task: SweepTask) -> Dict[str, Any]:
    if task.axis == 'tamper_fraction':
        return _tamper_replication(task)
    return _physical_replication(task)


def auc(positives: Sequence[float], negatives: Sequence[float]) -> float:
    """Probability that a positive scores above a negative (ties count half)."""
    pos, neg = np.asarray(positives, dtype=float), np.asarray(negatives, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise InvalidArgumentError("AUC needs at least one positive and one negative")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    return float((ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


def _summarize(axis: str, value, results: List[Dict[str, Any]]) -> Dict[str, Any]:
    row: Dict[str, Any] = {"axis": axis, "value": value, "reps": len(results)}
    if axis == 'tamper_fraction':
        tampered = [r["tampered"] for r in results]
        jittered = [r["jitter"] for r in results]
        row.update({
            "mean_dyn_tampered": float(np.mean(tampered)),
            "mean_dyn_jitter": float(np.mean(jittered)),
            "detect_rate": float(np.mean(np.array(tampered) > config.DYN_THRESH)),
            "auc": auc(tampered, jittered),
        })
        return row
    for name in ("raw_ber", "post_viterbi_ber", "final_ber"):
        row[name] = float(np.mean([r[name] for r in results]))
    row["final_zero_fraction"] = float(np.mean([r["final_ber"] == 0 for r in results]))
    row["failures"] = sum(r["failure_reason"] is not None for r in results)
    return row


def sweep(axis: str, values: Sequence[Union[float, str]], reps: int, seed: int,
          scene: SceneConfig = SceneConfig(), n_windows: int = 2, workers: int = 1,
          progress: bool = False) -> List[Dict[str, Any]]:
    """One summary row per value; replication r of value i is seeded by (seed, i, r)."""
    if axis not in SWEEP_AXES:
        raise InvalidArgumentError(f"Unknown sweep axis '{axis}', expected one of {SWEEP_AXES}")
    if not values:
        raise InvalidArgumentError("Empty sweep range")
    if reps < 1:
        raise InvalidArgumentError("reps must be at least 1")
    scene_doc = scene_to_dict(scene)
    tasks = [SweepTask(axis, v, i, r, derive_seed(seed, i, r), scene_doc, n_windows)
             for i, v in enumerate(values) for r in range(reps)]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm.tqdm(pool.map(run_replication, tasks), total=len(tasks),
                                     desc=f"sweep {axis}", disable=not progress))
    else:
        results = [run_replication(t) for t in tqdm.tqdm(tasks, desc=f"sweep {axis}",
                                                          disable=not progress)]
    rows = []
    for i, v in enumerate(values):
        rows.append(_summarize(axis, v, results[i * reps:(i + 1) * reps]))
        logger.info("Sweep %s=%s: %s", axis, v, rows[-1])
    return rows


################################################################################################
#                                   LSH analysis                                              #
################################################################################################
def lsh_analysis(k_values: Sequence[int], thetas: Sequence[float]) -> List[Dict[str, Any]]:
    if len(k_values) == 0 or len(thetas) == 0:
        raise InvalidArgumentError("lsh analysis needs at least one k and one threshold")
    rows = []
    for theta in thetas:
        for k in k_values:
            rows.append({
                "k": int(k),
                "theta_th": float(theta),
                "expected_distance": lsh_core.expected_distance(int(k), float(theta)),
                "threshold": lsh_core.decision_threshold(int(k), float(theta)),
                "agreement_probability": lsh_core.agreement_probability(int(k), float(theta)),
            })
    return rows


def parse_k_range(text: str) -> List[int]:
    try:
        a, b, step = (int(v) for v in text.split(':'))
    except ValueError:
        raise InvalidArgumentError(f"k range must be a:b:step, got '{text}'") from None
    if step < 1 or b < a or a < 1:
        raise InvalidArgumentError(f"Empty k range '{text}'")
    return list(range(a, b + 1, step))


def format_table(rows: List[Dict[str, Any]]) -> str:
    if not rows:
        return ""
    columns = list(rows[0].keys())

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}" if math.isfinite(v) else str(v)
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def plot_rows(rows: List[Dict[str, Any]], x: str, ys: Sequence[str], path: str,
              group: Optional[str] = None, logy: bool = False) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    groups = sorted({r[group] for r in rows}) if group else [None]
    for g in groups:
        subset = [r for r in rows if group is None or r[group] == g]
        for y in ys:
            label = y if g is None else f"{y} ({group}={g})"
            ax.plot([r[x] for r in subset], [r[y] for r in subset], marker="o", label=label)
    ax.set_xlabel(x)
    if logy:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def run_config(mode: str, **fields) -> Dict[str, Any]:
    from optical_signature import __version__
    doc = {"mode": mode, "version": __version__,
           "created": datetime.datetime.now().isoformat(timespec="seconds")}
    doc.update(fields)
    return doc
