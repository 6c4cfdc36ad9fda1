"""Cell layout and per-window bitmap schedules for spatio-temporal BPSK.

A window is 27 slots at 2 * f_d = 6 Hz: 3 dark downtime slots, then 24 modulation slots holding
12 bits per data cell. Bit b of a data cell occupies modulation slots 2b and 2b + 1, a 0 as
(on, off) and a 1 as (off, on). Sync cells always show (on, off). Every slot is displayed as two
sub-frames at 12 Hz so the corner localization blocks can blink at f_l = 6 Hz: lit in the first
sub-frame of each modulation slot and dark in the second.
"""
import enum
import json
import logging
import os
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from optical_signature import config
from optical_signature.errors import InvalidArgumentError, LengthError, SchemaError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]


class CellRole(enum.IntEnum):
    DATA = 0
    SYNC = 1
    LOCALIZATION = 2
    GUARD = 3


@dataclass(frozen=True, eq=False)
class CellLayout:
    roles: np.ndarray
    data_order: Tuple[Cell, ...]
    sync_cells: Tuple[Cell, ...]
    localization_blocks: Tuple[Tuple[Cell, ...], ...]
    guard_cells: Tuple[Cell, ...]
    cell_px: int = config.CELL_PX

    @property
    def shape(self) -> Tuple[int, int]:
        return self.roles.shape

    @property
    def bitmap_size(self) -> Tuple[int, int]:
        """(width, height) of the bitmap in pixels."""
        return self.roles.shape[1] * self.cell_px, self.roles.shape[0] * self.cell_px

    def cell_rect(self, r: int, c: int) -> Tuple[int, int, int, int]:
        """(x0, y0, x1, y1) of a unit cell in bitmap pixels, end-exclusive."""
        p = self.cell_px
        return c * p, r * p, (c + 1) * p, (r + 1) * p

    def localization_centers(self) -> np.ndarray:
        """Block centers as (x, y) in bitmap pixels, ordered TL, TR, BR, BL."""
        centers = []
        for block in self.localization_blocks:
            rows = [r for r, _ in block]
            cols = [c for _, c in block]
            centers.append(((min(cols) + max(cols) + 1) * self.cell_px / 2,
                            (min(rows) + max(rows) + 1) * self.cell_px / 2))
        return np.array(centers, dtype=np.float64)

    def mask(self, role: CellRole) -> np.ndarray:
        return self.roles == role


def _clockwise_index(r: int, c: int, rows: int, cols: int) -> int:
    if r == 0:
        return c
    if c == cols - 1:
        return cols - 1 + r
    if r == rows - 1:
        return cols - 1 + rows - 1 + (cols - 1 - c)
    return 2 * (cols - 1) + rows - 1 + (rows - 1 - r)


def build_layout() -> CellLayout:
    """Deterministic 16x9 layout: 87 data, 32 sync, 4 corner blocks of 2x2, 9 guard."""
    rows, cols, b = config.GRID_ROWS, config.GRID_COLS, config.LOC_BLOCK_CELLS
    roles = np.full((rows, cols), CellRole.GUARD, dtype=np.int8)
    corners = ((0, 0), (0, cols - b), (rows - b, cols - b), (rows - b, 0))  # TL, TR, BR, BL
    blocks = tuple(tuple((r0 + i, c0 + j) for i in range(b) for j in range(b)) for r0, c0 in corners)
    loc_cells = [cell for block in blocks for cell in block]
    for r, c in loc_cells:
        roles[r, c] = CellRole.LOCALIZATION

    border = [(r, c) for r in range(rows) for c in range(cols)
              if (r in (0, rows - 1) or c in (0, cols - 1)) and roles[r, c] != CellRole.LOCALIZATION]
    loc_arr = np.array(loc_cells)

    def rank(cell):
        dist = np.abs(loc_arr - np.array(cell)).sum(axis=1).min()
        return int(dist), _clockwise_index(cell[0], cell[1], rows, cols)

    border.sort(key=rank)
    sync = tuple(border[:config.N_SYNC_CELLS])
    for r, c in sync:
        roles[r, c] = CellRole.SYNC

    interior = [(r, c) for r in range(1, rows - 1) for c in range(1, cols - 1)
                if roles[r, c] != CellRole.LOCALIZATION]
    data = tuple(interior[:config.N_DATA_CELLS])
    for r, c in data:
        roles[r, c] = CellRole.DATA

    guard = tuple((r, c) for r in range(rows) for c in range(cols) if roles[r, c] == CellRole.GUARD)
    roles.setflags(write=False)
    return CellLayout(roles=roles, data_order=data, sync_cells=sync, localization_blocks=blocks,
                      guard_cells=guard)


LAYOUT = build_layout()


################################################################################################
#                                   Bitmap schedules                                          #
################################################################################################
@dataclass(frozen=True, eq=False)
class BitmapSchedule:
    """One window: slot_states (27, 9, 16) on/off per data and sync cell, RGB per cell."""
    slot_states: np.ndarray
    cell_colors: np.ndarray
    window_no: Optional[int] = None
    layout: CellLayout = LAYOUT

    def __post_init__(self):
        states = np.asarray(self.slot_states, dtype=bool)
        colors = np.asarray(self.cell_colors, dtype=np.uint8)
        if states.ndim != 3 or states.shape[1:] != self.layout.shape:
            raise LengthError(f"slot_states should be (slots, {self.layout.shape}) "
                              f"but is {states.shape}")
        if colors.shape != self.layout.shape + (3,):
            raise InvalidArgumentError(f"cell_colors should be {self.layout.shape + (3,)} "
                                       f"but is {colors.shape}")
        states.setflags(write=False)
        colors.setflags(write=False)
        object.__setattr__(self, "slot_states", states)
        object.__setattr__(self, "cell_colors", colors)

    @property
    def n_slots(self) -> int:
        return self.slot_states.shape[0]

    def slot_times(self) -> np.ndarray:
        return np.arange(self.n_slots) / config.SLOT_RATE

    def display_states(self) -> np.ndarray:
        """(2 * slots, 9, 16) on/off per display sub-frame, localization beacon included."""
        subs = np.repeat(self.slot_states, config.SUBFRAMES_PER_SLOT, axis=0).copy()
        loc = self.layout.mask(CellRole.LOCALIZATION)
        for s in range(config.DOWNTIME_SLOTS, self.n_slots):
            subs[s * config.SUBFRAMES_PER_SLOT][loc] = True
        return subs

    def _paint(self, states: np.ndarray) -> np.ndarray:
        cells = self.cell_colors * states[:, :, None]
        p = self.layout.cell_px
        return np.repeat(np.repeat(cells, p, axis=0), p, axis=1).astype(np.uint8)

    def bitmap(self, slot: int) -> np.ndarray:
        """RGB bitmap of one slot with the beacon in its lit phase."""
        return self._paint(self.display_states()[slot * config.SUBFRAMES_PER_SLOT])

    def display_bitmaps(self) -> Iterator[np.ndarray]:
        for states in self.display_states():
            yield self._paint(states)


def _check_colors(cell_colors, layout: CellLayout) -> np.ndarray:
    colors = np.asarray(cell_colors)
    if colors.shape == (3,):
        colors = np.broadcast_to(colors, layout.shape + (3,))
    if colors.shape != layout.shape + (3,):
        raise InvalidArgumentError(f"Expected one RGB color per cell {layout.shape + (3,)}, "
                                   f"got {colors.shape}")
    if np.any(colors < 0) or np.any(colors > 255):
        raise InvalidArgumentError("Cell colors must lie in [0, 255]")
    colors = colors.astype(np.uint8).copy()
    colors[layout.mask(CellRole.GUARD)] = 0
    return colors


def schedule_window(coded_bits, cell_colors, window_no: Optional[int] = None,
                    layout: CellLayout = LAYOUT) -> BitmapSchedule:
    bits = np.asarray(coded_bits, dtype=np.uint8).ravel()
    if bits.size != config.CODED_BITS:
        raise LengthError(f"A window carries {config.CODED_BITS} coded bits, got {bits.size}")
    states = np.zeros((config.WINDOW_SLOTS,) + layout.shape, dtype=bool)
    first = config.DOWNTIME_SLOTS + 2 * np.arange(config.DATA_BITS_PER_CELL)
    chunks = bits.reshape(config.N_DATA_CELLS, config.DATA_BITS_PER_CELL)
    for (r, c), chunk in zip(layout.data_order, chunks):
        states[first, r, c] = chunk == 0
        states[first + 1, r, c] = chunk == 1
    sync = tuple(np.array(layout.sync_cells).T)
    for s in first:
        states[s][sync] = True
    return BitmapSchedule(slot_states=states, cell_colors=_check_colors(cell_colors, layout),
                          window_no=window_no, layout=layout)


def reference_demod_local(schedule: BitmapSchedule) -> np.ndarray:
    """Reads the coded bits straight off a schedule (on-first pair = 0)."""
    if schedule.n_slots != config.WINDOW_SLOTS:
        raise LengthError(f"Schedule has {schedule.n_slots} slots, expected {config.WINDOW_SLOTS}")
    first = config.DOWNTIME_SLOTS + 2 * np.arange(config.DATA_BITS_PER_CELL)
    rows, cols = np.array(schedule.layout.data_order).T
    on_first = schedule.slot_states[first][:, rows, cols]  # (12, 87)
    on_second = schedule.slot_states[first + 1][:, rows, cols]
    if np.any(on_first == on_second):
        raise InvalidArgumentError("Schedule holds a slot pair that is not a BPSK symbol")
    return on_second.T.astype(np.uint8).ravel()


def invert_phase(schedule: BitmapSchedule) -> BitmapSchedule:
    """180 degree phase shift of every modulated data and sync cell."""
    states = schedule.slot_states.copy()
    modulated = schedule.layout.mask(CellRole.DATA) | schedule.layout.mask(CellRole.SYNC)
    mod = states[config.DOWNTIME_SLOTS:]
    mod[:, modulated] = ~mod[:, modulated]
    return BitmapSchedule(slot_states=states, cell_colors=schedule.cell_colors,
                          window_no=schedule.window_no, layout=schedule.layout)


################################################################################################
#                                   Schedule export                                           #
################################################################################################
MANIFEST_NAME = "schedule_manifest.json"


def _pack_states(states: np.ndarray) -> List[str]:
    return [np.packbits(s.ravel()).tobytes().hex() for s in states]


def _unpack_states(hex_rows: Sequence[str], shape: Tuple[int, int]) -> np.ndarray:
    n = shape[0] * shape[1]
    return np.stack([np.unpackbits(np.frombuffer(bytes.fromhex(h), dtype=np.uint8))[:n]
                     .reshape(shape).astype(bool) for h in hex_rows])


def save_schedules(schedules: Sequence[BitmapSchedule], out_dir: str,
                   write_bitmaps: bool = True) -> str:
    """Writes one PNG per display sub-frame plus a manifest with timestamps and cell states."""
    bitmap_dir = os.path.join(out_dir, "bitmaps")
    os.makedirs(bitmap_dir, exist_ok=True)
    bitmaps, windows = [], []
    for w, schedule in enumerate(schedules):
        window_no = schedule.window_no if schedule.window_no is not None else w
        for sub, image in enumerate(schedule.display_bitmaps()):
            name = f"w{window_no:05d}_s{sub:03d}.png"
            if write_bitmaps:
                Image.fromarray(image).save(os.path.join(bitmap_dir, name))
            slot = sub // config.SUBFRAMES_PER_SLOT
            bitmaps.append({
                "file": f"bitmaps/{name}",
                "timestamp": w * config.WINDOW_S + sub / config.DISPLAY_RATE,
                "window_no": window_no,
                "slot": slot,
                "phase": "downtime" if slot < config.DOWNTIME_SLOTS else "modulation",
            })
        windows.append({
            "window_no": schedule.window_no,
            "slot_states": _pack_states(schedule.slot_states),
            "cell_colors": schedule.cell_colors.tolist(),
        })
    manifest = {
        "schema_version": config.SCHEMA_VERSION,
        "display_rate": config.DISPLAY_RATE,
        "slot_rate": config.SLOT_RATE,
        "window_s": config.WINDOW_S,
        "bitmap_size": list(LAYOUT.bitmap_size),
        "windows": windows,
        "bitmaps": bitmaps,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    logger.info("Wrote %d schedules (%d bitmaps) to %s", len(schedules), len(bitmaps), out_dir)
    return path


def load_schedules(schedule_dir: str) -> List[BitmapSchedule]:
    path = os.path.join(schedule_dir, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid schedule manifest: {e.msg}", line=e.lineno) from e
    if "windows" not in manifest:
        raise SchemaError("Schedule manifest has no windows", field="windows")
    schedules = []
    for i, entry in enumerate(manifest["windows"]):
        try:
            states = _unpack_states(entry["slot_states"], LAYOUT.shape)
            schedules.append(BitmapSchedule(slot_states=states, cell_colors=entry["cell_colors"],
                                            window_no=entry.get("window_no")))
        except (KeyError, ValueError) as e:
            raise SchemaError(f"Bad schedule entry: {e}", field=f"windows[{i}]") from e
    return schedules
