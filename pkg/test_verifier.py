import os

import numpy as np
import pytest

from optical_signature import artifacts, config, pipeline
from optical_signature.channel_sim import FrameSequence, ground_truth_corners, with_scene
from optical_signature.descriptor import (Signature, WindowMeta, generate_key, make_descriptor,
                                          seal)
from optical_signature.errors import (CellTooSmallError, DegenerateHomographyError,
                                      InvalidArgumentError, LocalizationError, OutOfViewError,
                                      SyncError, VerificationError)
from optical_signature.lsh_core import make_hashers
from optical_signature.modulation import LAYOUT
from optical_signature.tracks import SynthConfig, swap_identity, synth_track, tamper
from optical_signature.verifier import (AUTHENTIC, FALSIFIED, INCONCLUSIVE, TAMPERED,
                                        UNVERIFIABLE, VERIFIED, RecoveredWindow, WindowBounds,
                                        cell_label_image, compare, decode_recovered, demodulate,
                                        estimate_homography, extract_cell_signals, find_windows,
                                        localize, order_corners, recover_signatures, verify)

FPS = 30.0
LEAD_IN_S = 4.5


def _window_start(k, fps=FPS):
    return int(round((LEAD_IN_S + k * config.WINDOW_S) * fps))


def _sync_aggregate(n_windows, fps=FPS, lead_out_s=1.0, noise=0.0, seed=0):
    """Sync cell brightness as the camera samples it: dark, then (on, off) slot pairs."""
    n = int((LEAD_IN_S + n_windows * config.WINDOW_S + lead_out_s) * fps)
    rel = (np.arange(n) + 0.5) / fps - LEAD_IN_S + 1e-9
    window = np.floor(rel / config.WINDOW_S)
    slot = np.floor((rel - window * config.WINDOW_S) * config.SLOT_RATE).astype(int)
    lit = (rel >= 0) & (window < n_windows) & (slot >= config.DOWNTIME_SLOTS) & \
          ((slot - config.DOWNTIME_SLOTS) % 2 == 0)
    rng = np.random.default_rng(seed)
    return 10.0 + 20.0 * lit + rng.normal(0.0, noise, n)


################################################################################################
#                                   Localization                                              #
################################################################################################
def test_localize_finds_the_corner_blocks(nominal_frames, small_scene):
    loc = localize(nominal_frames)
    np.testing.assert_allclose(loc.centroids, ground_truth_corners(small_scene), atol=2.0)
    assert loc.heatmap.target_hz == pytest.approx(config.F_L)


def test_no_slm_light_fails_localization(embedded, small_scene):
    dark = pipeline.simulate(embedded.schedules[:1], with_scene(small_scene, gain=0.0), seed=5)
    with pytest.raises(LocalizationError):
        localize(dark)


def test_low_frame_rate_cannot_see_the_beacon(nominal_frames):
    slow = FrameSequence(frames=nominal_frames.frames[::3], fps=10.0)
    with pytest.raises(LocalizationError):
        localize(slow)


def test_half_speed_playback_at_24_fps_hides_the_beacon(embedded, small_scene):
    scene = with_scene(small_scene, camera_fps=24.0)
    frames = pipeline.simulate(embedded.schedules[:1], scene, seed=5, degrade_ops=["speed=0.5"])
    with pytest.raises(LocalizationError):
        localize(frames)


def test_half_speed_playback_at_30_fps_is_rejected(embedded, small_scene, key):
    frames = pipeline.simulate(embedded.schedules, small_scene, seed=5, degrade_ops=["speed=0.5"])
    with pytest.raises((LocalizationError, SyncError)):
        recover_signatures(frames, key)


def test_order_corners():
    shuffled = np.array([[300.0, 210.0], [10.0, 12.0], [15.0, 200.0], [290.0, 5.0]])
    expected = [[10.0, 12.0], [290.0, 5.0], [300.0, 210.0], [15.0, 200.0]]
    assert order_corners(shuffled).tolist() == expected


################################################################################################
#                                   Homography                                                #
################################################################################################
def test_homography_identity():
    pts = LAYOUT.localization_centers()
    H = estimate_homography(pts, pts)
    np.testing.assert_allclose(H.matrix, np.eye(3), atol=1e-9)
    assert H.reprojection_error < 1e-9


def test_homography_recovers_a_perspective_warp():
    truth = np.array([[0.9, 0.05, 20.0], [-0.03, 1.1, 12.0], [1e-4, -2e-4, 1.0]])
    src = LAYOUT.localization_centers()
    mapped = np.hstack([src, np.ones((4, 1))]) @ truth.T
    dst = mapped[:, :2] / mapped[:, 2:]
    H = estimate_homography(src, dst)
    np.testing.assert_allclose(H.matrix, truth, rtol=1e-6, atol=1e-9)


def test_homography_rejects_collinear_and_short_input():
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(DegenerateHomographyError):
        estimate_homography(square, line)
    with pytest.raises(InvalidArgumentError):
        estimate_homography(square[:3], square[:3])


################################################################################################
#                                   Cell extraction                                           #
################################################################################################
def _checkerboard():
    w, h = LAYOUT.bitmap_size
    image = np.zeros((h, w, 3), dtype=np.uint8)
    for r in range(LAYOUT.shape[0]):
        for c in range(LAYOUT.shape[1]):
            x0, y0, x1, y1 = LAYOUT.cell_rect(r, c)
            image[y0:y1, x0:x1] = (r * 16 + c, 100, 255 - r * 16 - c)
            # a bright seam inside the inset margin must not leak into the cell mean
            image[y0, x0:x1] = 255
    return image


def test_extract_cell_signals_reads_the_inset():
    image = _checkerboard()
    frames = FrameSequence(frames=np.stack([image, image // 2]), fps=FPS)
    rgb = extract_cell_signals(frames, np.eye(3), rgb=True)
    assert rgb.shape == (2, 9, 16, 3)
    expected = np.arange(144).reshape(9, 16)
    np.testing.assert_allclose(rgb[0, ..., 0], expected)
    np.testing.assert_allclose(rgb[0, ..., 1], 100.0)
    gray = extract_cell_signals(frames, np.eye(3))
    np.testing.assert_allclose(gray[0], (expected + 100 + 255 - expected) / 3)


def test_cells_outside_the_frame():
    with pytest.raises(OutOfViewError):
        cell_label_image(np.eye(3), (320, 180))


def test_cells_too_small():
    H = np.array([[0.03, 0.0, 5.0], [0.0, 0.03, 5.0], [0.0, 0.0, 1.0]])
    with pytest.raises(CellTooSmallError):
        cell_label_image(H, (64, 64))
    assert issubclass(CellTooSmallError, OutOfViewError)


################################################################################################
#                                   Synchronization                                           #
################################################################################################
def test_find_windows_locates_every_window():
    windows = find_windows(_sync_aggregate(3, noise=1.0), FPS)
    assert len(windows) == 3
    for k, w in enumerate(windows):
        assert abs(w.start - _window_start(k)) <= 1
        assert w.mod_start - w.start == int(config.DOWNTIME_S * FPS)
        assert w.end - w.start == int(config.WINDOW_S * FPS)


def test_find_windows_accepts_per_cell_signals():
    aggregate = _sync_aggregate(2)
    cells = np.stack([aggregate] * len(LAYOUT.sync_cells), axis=1)
    assert [w.start for w in find_windows(cells, FPS)] == \
        [w.start for w in find_windows(aggregate, FPS)]


def test_find_windows_drops_a_partial_first_window():
    signal = _sync_aggregate(3)[200:]
    windows = find_windows(signal, FPS)
    assert [w.start for w in windows] == [_window_start(1) - 200, _window_start(2) - 200]


def test_find_windows_needs_modulation():
    with pytest.raises(SyncError):
        find_windows(np.full(600, 40.0), FPS)
    square = 10.0 + 20.0 * ((np.arange(600) // 5) % 2 == 0)
    with pytest.raises(SyncError):
        find_windows(square, FPS)


def test_find_windows_rejects_a_slowed_carrier():
    slowed = np.repeat(_sync_aggregate(3), 2)
    with pytest.raises(SyncError):
        find_windows(slowed, FPS)


################################################################################################
#                                   Demodulation                                              #
################################################################################################
def _reference(n=135, mod_start=15, fps=FPS):
    slot = np.floor((np.arange(n) - mod_start) / (fps / config.SLOT_RATE)).astype(int)
    return np.where(slot % 2 == 0, 1.0, -1.0)


def _cell(reference, bits, mod_start=15, fps=FPS):
    cell = reference.copy()
    width = int(2 * fps / config.SLOT_RATE)
    for b, bit in enumerate(bits):
        if bit:
            cell[mod_start + b * width:mod_start + (b + 1) * width] *= -1
    return cell


def test_demodulate_in_phase_and_antiphase():
    ref = _reference()
    bits = [0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 0]
    soft = demodulate(_cell(ref, bits), ref, mod_start=15, fps=FPS)
    np.testing.assert_allclose(soft, 1.0 - 2.0 * np.array(bits))
    np.testing.assert_allclose(demodulate(-ref, ref, 15, FPS), -1.0)


def test_demodulate_confidence_falls_with_noise(rng):
    ref = _reference()
    cells = np.stack([ref] * 200, axis=1)
    confidence = []
    for sigma in (0.1, 1.0, 3.0):
        noisy = cells + rng.normal(0.0, sigma, cells.shape)
        soft = demodulate(noisy, ref, 15, FPS)
        assert soft.shape == (200, 12)
        confidence.append(float(soft.mean()))
    assert confidence[0] > confidence[1] > confidence[2] > 0


def test_demodulate_needs_the_whole_window():
    ref = _reference(n=100)
    with pytest.raises(InvalidArgumentError):
        demodulate(ref, ref, 15, FPS)


################################################################################################
#                                   Recovery                                                  #
################################################################################################
def test_recover_nominal_video(nominal_frames, key, embedded):
    recovery = recover_signatures(nominal_frames, key)
    assert len(recovery.windows) == len(embedded.records) == 2
    for k, (w, record) in enumerate(zip(recovery.windows, embedded.records)):
        assert w.mac_valid
        assert w.window_no == record.window_no == k
        assert w.signature == record.signature
        assert abs(w.bounds.start - _window_start(k)) <= 1


def test_wrong_key_invalidates_the_mac(nominal_frames):
    recovery = recover_signatures(nominal_frames, generate_key(seed=99))
    assert all(w.failure_reason == "mac" for w in recovery.windows)
    assert all(w.window_no is None for w in recovery.windows)


def test_corrupted_window_is_unverifiable(nominal_frames, key, track):
    recovery = recover_signatures(nominal_frames, key)
    soft = np.stack([w.soft_bits for w in recovery.windows])
    soft[1] = np.random.default_rng(0).uniform(-1.0, 1.0, config.CODED_BITS)
    windows = decode_recovered(soft, key, [w.bounds for w in recovery.windows])
    assert windows[0].mac_valid
    assert windows[1].failure_reason == "decode"
    report = compare(windows, track, make_hashers(key.lsh_seed), FPS,
                     video_duration_s=nominal_frames.duration_s)
    assert [w.status for w in report.windows] == [VERIFIED, UNVERIFIABLE]
    assert report.decision == INCONCLUSIVE
    assert report.unverified_tail_s == pytest.approx(
        nominal_frames.duration_s - windows[0].bounds.start / FPS)


def test_verify_writes_report_and_analysis(nominal_frames, track, key, tmp_path):
    report = verify(nominal_frames, track, key, out_dir=str(tmp_path))
    assert report.decision == AUTHENTIC
    assert report.max_dyn_distance <= config.DYN_THRESH
    assert report.unverified_tail_s == pytest.approx(
        nominal_frames.duration_s - _window_start(1) / FPS, abs=0.1)
    doc = artifacts.read_json(os.path.join(str(tmp_path), "report.json"))
    assert doc["decision"] == AUTHENTIC
    assert doc["schema_version"] == config.SCHEMA_VERSION
    assert os.path.exists(os.path.join(str(tmp_path), "heatmap.png"))
    analysis = artifacts.load_analysis(os.path.join(str(tmp_path), "analysis.h5"))
    assert analysis["soft_bits"].shape == (2, config.CODED_BITS)
    assert analysis["window_bounds"].shape == (2, 3)

    verify(nominal_frames, track, key, out_dir=str(tmp_path))
    assert os.path.exists(os.path.join(str(tmp_path), "report-1.json"))
    assert os.path.exists(os.path.join(str(tmp_path), "heatmap-1.png"))
    assert os.path.exists(os.path.join(str(tmp_path), "analysis-1.h5"))


def test_verify_reports_pipeline_failures(embedded, small_scene, track, key, tmp_path):
    dark = pipeline.simulate(embedded.schedules[:1], with_scene(small_scene, gain=0.0), seed=5)
    report = verify(dark, track, key, out_dir=str(tmp_path))
    assert report.decision == INCONCLUSIVE
    assert report.failure_reason == "localization"
    assert report.windows == []
    assert os.path.exists(os.path.join(str(tmp_path), "report.json"))
    assert not os.path.exists(os.path.join(str(tmp_path), "heatmap.png"))


def test_run_files_share_one_suffix(tmp_path):
    names = [("report", ".json"), ("heatmap", ".png"), ("analysis", ".h5")]
    assert artifacts.free_suffix(str(tmp_path), names) == ""
    # a failed run leaves only report.json behind
    (tmp_path / "report.json").write_text("{}")
    assert artifacts.free_suffix(str(tmp_path), names) == "-1"
    (tmp_path / "heatmap-1.png").write_bytes(b"")
    assert artifacts.free_suffix(str(tmp_path), names) == "-2"


################################################################################################
#                                   Comparison                                                #
################################################################################################
@pytest.fixture(scope="module")
def long_track():
    return synth_track(SynthConfig(duration_s=6 * config.WINDOW_S), seed=21)


@pytest.fixture(scope="module")
def hashers(key):
    return make_hashers(key.lsh_seed)


def _recovered(track, key, hashers, window_nos=None, content=None, bad_mac=()):
    """Recovered windows as a clean recording of `track` would yield them."""
    n = len(window_nos) if window_nos is not None else len(content)
    window_nos = window_nos if window_nos is not None else list(range(n))
    content = content if content is not None else list(range(n))
    out = []
    for i, (no, k) in enumerate(zip(window_nos, content)):
        descriptor = make_descriptor(track, WindowMeta(no, 3, 100), hashers,
                                     window_start_frame=k * config.WINDOW_FRAMES)
        signature = seal(descriptor, key)
        if i in bad_mac:
            signature = Signature(descriptor=descriptor, mac=bytes(len(signature.mac)))
        start = _window_start(i)
        bounds = WindowBounds(start=start, mod_start=start + 15, end=start + 135)
        out.append(RecoveredWindow(index=i, bounds=bounds, soft_bits=np.zeros(config.CODED_BITS),
                                   signature=signature, mac_valid=i not in bad_mac,
                                   failure_reason="mac" if i in bad_mac else None))
    return out


def test_authentic_recording(long_track, key, hashers):
    report = compare(_recovered(long_track, key, hashers, content=range(6)), long_track, hashers,
                     FPS)
    assert report.decision == AUTHENTIC
    assert report.max_dyn_distance == 0
    assert report.max_id_distance == 0
    assert all(w.status == VERIFIED and w.alignment_offset == 0 for w in report.windows)


def test_tampered_content_is_falsified(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, content=range(6))
    edited = tamper(long_track, 2 * config.WINDOW_FRAMES, config.WINDOW_FRAMES, seed=5)
    report = compare(recovered, edited, hashers, FPS)
    assert report.decision == FALSIFIED
    assert report.windows[2].status == TAMPERED
    assert report.windows[2].dyn_distance > config.DYN_THRESH
    assert all(w.status == VERIFIED for i, w in enumerate(report.windows) if i != 2)


def test_swapped_identity_is_falsified(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, content=range(6))
    report = compare(recovered, swap_identity(long_track, seed=8), hashers, FPS)
    assert report.decision == FALSIFIED
    assert report.max_id_distance > config.ID_THRESH
    assert report.max_dyn_distance == 0


def test_replayed_signature_is_falsified(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, content=[0, 1, 2, 0, 4, 5])
    report = compare(recovered, long_track, hashers, FPS)
    assert report.decision == FALSIFIED
    assert report.windows[3].status == TAMPERED


def test_skipped_window_numbers_are_inconclusive(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, window_nos=[0, 1, 2, 5, 6, 7])
    report = compare(recovered, long_track, hashers, FPS)
    assert not report.consecutive
    assert report.decision == INCONCLUSIVE


def test_window_numbers_wrap_around(long_track, key, hashers):
    last = 2 ** config.WINDOW_NO_BITS - 1
    recovered = _recovered(long_track, key, hashers, window_nos=[last - 1, last, 0, 1])
    report = compare(recovered, long_track, hashers, FPS)
    assert report.consecutive
    assert report.decision == AUTHENTIC


def test_gap_between_verified_windows_is_inconclusive(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, content=range(5), bad_mac={2})
    report = compare(recovered, long_track, hashers, FPS)
    assert report.windows[2].status == UNVERIFIABLE
    assert report.windows[2].reason == "mac"
    assert report.decision == INCONCLUSIVE


def test_unverifiable_trailing_windows_are_inconclusive(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, content=range(6), bad_mac={4, 5})
    edited = tamper(long_track, 4 * config.WINDOW_FRAMES, 2 * config.WINDOW_FRAMES, seed=6)
    duration = LEAD_IN_S + 6 * config.WINDOW_S + 1.0
    report = compare(recovered, edited, hashers, FPS, video_duration_s=duration)
    assert [w.status for w in report.windows[4:]] == [UNVERIFIABLE, UNVERIFIABLE]
    assert all(w.status == VERIFIED for w in report.windows[:4])
    assert report.decision == INCONCLUSIVE
    assert report.unverified_lead_s == 0.0
    assert report.unverified_tail_s == pytest.approx(duration - _window_start(3) / FPS)


def test_unverifiable_leading_window_is_inconclusive(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, content=range(4), bad_mac={0})
    report = compare(recovered, long_track, hashers, FPS)
    assert report.windows[0].status == UNVERIFIABLE
    assert report.decision == INCONCLUSIVE
    assert report.unverified_lead_s == pytest.approx(_window_start(1) / FPS - config.WINDOW_S)


def test_identity_pairs_follow_window_positions(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, window_nos=[0, 1, 0, 1], content=range(4))
    report = compare(recovered, long_track, hashers, FPS)
    assert [w.id_distance for w in report.windows] == [0, 0, 0, 0]
    assert not report.consecutive

    swapped = compare(recovered, swap_identity(long_track, seed=8), hashers, FPS)
    assert all(w.id_distance > config.ID_THRESH for w in swapped.windows)
    assert swapped.decision == FALSIFIED


def test_nothing_verified_is_inconclusive(long_track, key, hashers):
    recovered = _recovered(long_track, key, hashers, content=range(2), bad_mac={0, 1})
    report = compare(recovered, long_track, hashers, FPS)
    assert report.decision == INCONCLUSIVE
    assert report.max_dyn_distance is None
    assert compare([], long_track, hashers, FPS).decision == INCONCLUSIVE


def test_sentinel_window_is_not_verified(key, hashers):
    frames = np.full((2 * config.WINDOW_FRAMES, config.N_CHANNELS), 0.3)
    frames[config.WINDOW_FRAMES:] += np.random.default_rng(1).uniform(
        0, 0.1, (config.WINDOW_FRAMES, config.N_CHANNELS))
    track = synth_track(SynthConfig(duration_s=2 * config.WINDOW_S), seed=1)
    flat = type(track)(fps=track.fps, frames=frames, identity=track.identity)
    recovered = []
    for i in range(2):
        descriptor = make_descriptor(flat, WindowMeta(i, 0, 0), hashers,
                                     window_start_frame=i * config.WINDOW_FRAMES,
                                     sentinel_on_degenerate=True)
        start = _window_start(i)
        recovered.append(RecoveredWindow(
            index=i, bounds=WindowBounds(start, start + 15, start + 135),
            soft_bits=np.zeros(config.CODED_BITS), signature=seal(descriptor, key),
            mac_valid=True))
    report = compare(recovered, flat, hashers, FPS)
    assert report.windows[0].reason == "sentinel"
    assert report.windows[0].status == UNVERIFIABLE
    assert report.windows[0].dyn_distance is None
    assert report.windows[1].status == VERIFIED
    assert report.decision == AUTHENTIC
    assert report.unverified_lead_s == pytest.approx(config.WINDOW_S)


def test_verification_errors_carry_a_reason():
    assert LocalizationError.reason == "localization"
    assert SyncError.reason == "sync"
    assert issubclass(OutOfViewError, VerificationError)
