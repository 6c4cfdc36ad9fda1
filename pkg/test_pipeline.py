import os
from types import SimpleNamespace

import numpy as np
import pytest

from optical_signature import artifacts, config, ecc, pipeline
from optical_signature.channel_sim import SceneConfig, render, with_scene
from optical_signature.descriptor import deserialize, serialize, verify_mac
from optical_signature.errors import InvalidArgumentError, TrackTooShortError
from optical_signature.modulation import LAYOUT, CellRole, load_schedules, reference_demod_local
from optical_signature.tracks import SynthConfig, synth_track
from optical_signature.verifier import WindowBounds


def test_derive_seed():
    a = pipeline.derive_seed(0, 1, 2)
    assert a == pipeline.derive_seed(0, 1, 2)
    assert a != pipeline.derive_seed(0, 2, 1)
    assert 0 <= a < 2 ** 63


################################################################################################
#                                   Embedding                                                 #
################################################################################################
def test_embed_windows_and_records(embedded, key):
    assert len(embedded.schedules) == len(embedded.records) == 2
    for k, (schedule, record) in enumerate(zip(embedded.schedules, embedded.records)):
        assert record.window_no == schedule.window_no == k
        assert record.content_start_frame == k * config.WINDOW_FRAMES
        assert verify_mac(record.signature, key)
        assert record.signature.descriptor.meta.unit_id == 3
        assert record.signature.descriptor.meta.date == 100
        assert np.array_equal(reference_demod_local(schedule), record.coded_bits)
        assert deserialize(serialize(record.signature)) == record.signature
        assert record.beta is None


def test_embed_full_length_track(key, small_scene):
    track = synth_track(SynthConfig(duration_s=36.0), seed=4)
    cfg = pipeline.EmbedConfig(scene=small_scene, adaptive=False, first_window_no=2 ** 16 - 2)
    result = pipeline.embed(track, key, cfg)
    assert len(result.records) == 8
    assert [r.window_no for r in result.records] == [65534, 65535, 0, 1, 2, 3, 4, 5]


def test_embed_is_deterministic(track, key, small_scene, embedded):
    cfg = pipeline.EmbedConfig(scene=small_scene, adaptive=False, date=100, unit_id=3)
    again = pipeline.embed(track, key, cfg)
    for a, b in zip(again.records, embedded.records):
        assert np.array_equal(a.coded_bits, b.coded_bits)
        assert a.signature == b.signature


def test_embed_rejects_short_tracks(key):
    with pytest.raises(TrackTooShortError):
        pipeline.embed(synth_track(SynthConfig(duration_s=4.4), seed=0), key)


def test_embed_resamples_to_the_core_rate(key, small_scene):
    fast = synth_track(SynthConfig(duration_s=4.5, fps=30.0), seed=6)
    result = pipeline.embed(fast, key, pipeline.EmbedConfig(scene=small_scene, adaptive=False))
    assert len(result.records) == 1


def test_adaptive_embedding_runs_the_loop(track, key, small_scene):
    cfg = pipeline.EmbedConfig(scene=small_scene, adaptive=True, date=100, seed=1)
    result = pipeline.embed(track, key, cfg)
    assert result.state.iteration == 2
    assert all(r.beta is not None and 0.0 <= r.beta <= 1.0 for r in result.records)
    active = ~LAYOUT.mask(CellRole.GUARD)
    assert np.all(np.abs(result.state.intensity[active] - config.I_INIT) <= 2 * config.DELTA_I)
    assert not result.state.intensity[~active].any()
    assert result.records[0].mean_intensity == pytest.approx(config.I_INIT)


def test_self_extraction_is_error_free_at_nominal(embedded, small_scene):
    scene = with_scene(small_scene, lead_in_s=0.0, lead_out_s=0.0)
    video = render(embedded.schedules[0], scene, seed=3)
    ber = pipeline.self_extraction_ber(video, embedded.records[0].coded_bits, scene.matrix())
    assert ber == 0.0


def test_write_embed(embedded, tmp_path):
    out = str(tmp_path)
    path = pipeline.write_embed(embedded, out, write_bitmaps=False)
    doc = artifacts.read_json(path)
    assert doc["schema_version"] == config.SCHEMA_VERSION
    assert [w["window_no"] for w in doc["windows"]] == [0, 1]
    assert len(doc["windows"][0]["payload"]) == 2 * (config.RS_PAYLOAD_BITS // 8)
    loaded = load_schedules(out)
    assert np.array_equal(loaded[1].slot_states, embedded.schedules[1].slot_states)


################################################################################################
#                                   Physical runs                                             #
################################################################################################
def test_physical_run_at_nominal(track, key, small_scene):
    run = pipeline.physical_run(track, key, small_scene, seed=2)
    assert run.failure_reason is None
    assert run.n_windows == run.windows_ok == 2
    assert run.raw_ber < 0.05
    assert run.post_viterbi_ber == 0.0
    assert run.final_ber == 0.0


@pytest.mark.parametrize("ops", [["quantize=64"], ["blur=1"], ["exposure=-20", "contrast=10"]])
def test_physical_run_survives_mild_post_processing(track, key, small_scene, ops):
    run = pipeline.physical_run(track, key, small_scene, seed=2, degrade_ops=ops)
    assert run.failure_reason is None
    assert run.final_ber == 0.0


def test_physical_run_reports_pipeline_failures(track, key, small_scene):
    run = pipeline.physical_run(track, key, with_scene(small_scene, gain=0.0), seed=2)
    assert run.failure_reason == "localization"
    assert run.raw_ber == run.post_viterbi_ber == run.final_ber == 0.5
    assert run.windows_ok == 0


def test_match_windows_counts_missing_windows():
    fps = 30.0
    found = [SimpleNamespace(bounds=WindowBounds(135, 150, 270)),
             SimpleNamespace(bounds=WindowBounds(420, 435, 555))]
    matched = pipeline._match_windows(found, 3, fps, lead_in_s=4.5)
    assert sorted(matched) == [0]


@pytest.mark.slow
def test_physical_run_full_length_default_scene(key):
    track = synth_track(SynthConfig(duration_s=36.0), seed=12)
    run = pipeline.physical_run(track, key, SceneConfig(), seed=0, adaptive=True)
    assert run.windows_ok == 8
    assert run.final_ber == 0.0


################################################################################################
#                                   Sweeps                                                    #
################################################################################################
def test_parse_range():
    assert pipeline.parse_range("0:1:3", "noise") == [0.0, 0.5, 1.0]
    assert pipeline.parse_range("2,4", "cell_px") == [2.0, 4.0]
    assert pipeline.parse_range("blur=1, quantize=32", "degrade") == ["blur=1", "quantize=32"]
    for text in ("", "a:b:c", "0:1:0", "1,x"):
        with pytest.raises(InvalidArgumentError):
            pipeline.parse_range(text, "noise")


def test_auc():
    assert pipeline.auc([3, 4], [1, 2]) == 1.0
    assert pipeline.auc([1, 2], [3, 4]) == 0.0
    assert pipeline.auc([1], [1]) == 0.5
    with pytest.raises(InvalidArgumentError):
        pipeline.auc([], [1])


def test_tamper_sweep_separates_edits_from_jitter():
    rows = pipeline.sweep("tamper_fraction", [0.0, 1.0], reps=20, seed=0)
    untouched, replaced = rows
    assert untouched["mean_dyn_tampered"] == 0.0
    assert untouched["detect_rate"] == 0.0
    assert untouched["auc"] < 0.1
    assert replaced["auc"] == 1.0
    assert replaced["detect_rate"] >= 0.9
    assert replaced["mean_dyn_tampered"] > replaced["mean_dyn_jitter"]


def test_sweep_is_reproducible():
    a = pipeline.sweep("tamper_fraction", [0.5], reps=5, seed=3)
    b = pipeline.sweep("tamper_fraction", [0.5], reps=5, seed=3)
    assert a == b


def test_physical_sweep_row(small_scene):
    rows = pipeline.sweep("noise", [1.0], reps=1, seed=0, scene=small_scene, n_windows=1)
    assert len(rows) == 1
    row = rows[0]
    assert row["value"] == 1.0 and row["reps"] == 1
    assert row["final_ber"] == 0.0
    assert row["failures"] == 0


def test_sweep_rejects_bad_arguments():
    with pytest.raises(InvalidArgumentError):
        pipeline.sweep("colour", [1.0], reps=1, seed=0)
    with pytest.raises(InvalidArgumentError):
        pipeline.sweep("noise", [], reps=1, seed=0)
    with pytest.raises(InvalidArgumentError):
        pipeline.sweep("noise", [1.0], reps=0, seed=0)


@pytest.mark.slow
def test_sweep_with_worker_processes():
    serial = pipeline.sweep("tamper_fraction", [0.25, 0.75], reps=4, seed=9)
    parallel = pipeline.sweep("tamper_fraction", [0.25, 0.75], reps=4, seed=9, workers=2)
    assert serial == parallel


################################################################################################
#                                   LSH analysis and output                                   #
################################################################################################
def test_lsh_analysis_rows():
    rows = pipeline.lsh_analysis(pipeline.parse_k_range("10:300:10"),
                                 [config.ID_THETA, config.DYN_THETA])
    assert len(rows) == 60
    at_150 = [r for r in rows if r["k"] == 150]
    assert [r["threshold"] for r in at_150] == [config.ID_THRESH, config.DYN_THRESH]
    for theta in (config.ID_THETA, config.DYN_THETA):
        curve = [r["agreement_probability"] for r in rows if r["theta_th"] == theta]
        assert all(b >= a - 1e-12 for a, b in zip(curve, curve[1:]))


def test_parse_k_range():
    assert pipeline.parse_k_range("10:30:10") == [10, 20, 30]
    for text in ("10:30", "30:10:5", "0:10:5", "1:10:0"):
        with pytest.raises(InvalidArgumentError):
            pipeline.parse_k_range(text)
    with pytest.raises(InvalidArgumentError):
        pipeline.lsh_analysis([], [1.0])


def test_format_table_and_plot(tmp_path):
    rows = [{"k": 10, "p": 0.5}, {"k": 20, "p": 0.75}]
    table = pipeline.format_table(rows)
    lines = table.splitlines()
    assert lines[0].split() == ["k", "p"]
    assert lines[2].split() == ["10", "0.5000"]
    assert pipeline.format_table([]) == ""
    path = pipeline.plot_rows(rows, "k", ["p"], str(tmp_path / "p.png"))
    assert os.path.getsize(path) > 0


def test_run_config():
    doc = pipeline.run_config("verify", frames="x", frame_budget=800)
    assert doc["mode"] == "verify"
    assert doc["frame_budget"] == 800
    assert "version" in doc and "created" in doc


def test_hard_decisions_of_the_embedded_window(embedded):
    coded = embedded.records[0].coded_bits
    assert coded.shape == (config.CODED_BITS,)
    decoded = ecc.decode_window(ecc.hard_to_soft(coded))
    assert np.array_equal(decoded.signature_bits, serialize(embedded.records[0].signature))
