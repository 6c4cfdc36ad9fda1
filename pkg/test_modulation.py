import json
import os

import numpy as np
import pytest

from optical_signature import config
from optical_signature.errors import InvalidArgumentError, LengthError, SchemaError
from optical_signature.modulation import (LAYOUT, MANIFEST_NAME, BitmapSchedule, CellRole,
                                          invert_phase, load_schedules, reference_demod_local,
                                          save_schedules, schedule_window)

COLOR = (45, 45, 45)


@pytest.fixture
def coded(rng):
    return rng.integers(0, 2, config.CODED_BITS).astype(np.uint8)


def test_layout_role_counts():
    counts = {role: int(LAYOUT.mask(role).sum()) for role in CellRole}
    assert counts[CellRole.DATA] == 87
    assert counts[CellRole.SYNC] == 32
    assert counts[CellRole.LOCALIZATION] == 16
    assert counts[CellRole.GUARD] == 9
    assert LAYOUT.shape == (9, 16)
    assert LAYOUT.bitmap_size == (640, 360)
    assert len(set(LAYOUT.data_order)) == 87


def test_localization_blocks_sit_in_the_corners():
    centers = LAYOUT.localization_centers()
    assert centers.tolist() == [[40.0, 40.0], [600.0, 40.0], [600.0, 320.0], [40.0, 320.0]]
    for block in LAYOUT.localization_blocks:
        assert len(block) == 4


def test_sync_cells_are_on_the_border_next_to_the_corners():
    for r, c in LAYOUT.sync_cells:
        assert r in (0, 8) or c in (0, 15)
    for cell in ((0, 2), (2, 0), (0, 13), (8, 2)):
        assert cell in LAYOUT.sync_cells


def test_schedule_round_trip(coded):
    schedule = schedule_window(coded, COLOR, window_no=3)
    assert schedule.n_slots == config.WINDOW_SLOTS == 27
    assert np.array_equal(reference_demod_local(schedule), coded)


def test_schedule_timing(coded):
    schedule = schedule_window(coded, COLOR)
    assert not schedule.slot_states[:config.DOWNTIME_SLOTS].any()
    sync = schedule.slot_states[:, 0, 2]
    assert sync[3::2].all() and not sync[4::2].any()
    r, c = LAYOUT.data_order[0]
    first = schedule.slot_states[3::2, r, c]
    second = schedule.slot_states[4::2, r, c]
    assert np.array_equal(first, coded[:12] == 0)
    assert np.array_equal(first, ~second)
    assert not schedule.slot_states[:, LAYOUT.mask(CellRole.GUARD)].any()


def test_localization_beacon_blinks_at_six_hz(coded):
    display = schedule_window(coded, COLOR).display_states()
    assert display.shape == (54, 9, 16)
    beacon = display[:, 0, 0]
    assert not beacon[:6].any()
    assert beacon[6::2].all() and not beacon[7::2].any()


def test_bitmaps_use_cell_colors(coded):
    schedule = schedule_window(coded, (10, 20, 30))
    image = schedule.bitmap(3)
    assert image.shape == (360, 640, 3)
    x0, y0, x1, y1 = LAYOUT.cell_rect(0, 2)
    assert (image[y0:y1, x0:x1] == (10, 20, 30)).all()
    assert not schedule.bitmap(0).any()
    assert schedule.cell_colors[LAYOUT.mask(CellRole.GUARD)].max() == 0


def test_invert_phase_flips_every_bit(coded):
    schedule = schedule_window(coded, COLOR)
    inverted = invert_phase(schedule)
    assert np.array_equal(reference_demod_local(inverted), 1 - coded)
    assert not inverted.slot_states[:config.DOWNTIME_SLOTS].any()
    assert np.array_equal(invert_phase(inverted).slot_states, schedule.slot_states)


def test_schedule_rejects_bad_input(coded):
    with pytest.raises(LengthError):
        schedule_window(coded[:-1], COLOR)
    with pytest.raises(InvalidArgumentError):
        schedule_window(coded, (300, 0, 0))
    with pytest.raises(InvalidArgumentError):
        schedule_window(coded, np.zeros((9, 15, 3)))
    with pytest.raises(LengthError):
        BitmapSchedule(slot_states=np.zeros((27, 8, 16)), cell_colors=np.zeros((9, 16, 3)))


def test_save_and_load_schedules(coded, tmp_path):
    colors = np.full((9, 16, 3), 60)
    schedules = [schedule_window(coded, colors, window_no=7),
                 schedule_window(1 - coded, colors, window_no=8)]
    path = save_schedules(schedules, str(tmp_path))
    manifest = json.loads(open(path, encoding="utf-8").read())
    assert manifest["schema_version"] == config.SCHEMA_VERSION
    assert len(manifest["bitmaps"]) == 2 * 54
    assert manifest["bitmaps"][54]["timestamp"] == pytest.approx(config.WINDOW_S)
    assert os.path.exists(os.path.join(str(tmp_path), manifest["bitmaps"][0]["file"]))

    loaded = load_schedules(str(tmp_path))
    assert [s.window_no for s in loaded] == [7, 8]
    for a, b in zip(schedules, loaded):
        assert np.array_equal(a.slot_states, b.slot_states)
        assert np.array_equal(a.cell_colors, b.cell_colors)


def test_manifest_only_export(coded, tmp_path):
    save_schedules([schedule_window(coded, COLOR)], str(tmp_path), write_bitmaps=False)
    assert os.listdir(os.path.join(str(tmp_path), "bitmaps")) == []
    assert len(load_schedules(str(tmp_path))) == 1


def test_corrupt_manifest(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("{\n  \"windows\": [\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        load_schedules(str(tmp_path))
    (tmp_path / MANIFEST_NAME).write_text('{"windows": [{"cell_colors": []}]}', encoding="utf-8")
    with pytest.raises(SchemaError) as e:
        load_schedules(str(tmp_path))
    assert e.value.field == "windows[0]"
