"""Window descriptors, MAC-sealed signatures and the bit-exact signature layout.

Signature layout (353 bits, big-endian within fields):

    dyn_hash (150) | id_hash_half (75) | window_no (16) | unit_id (16) | date (16) | mac (80)

The MAC is HMAC-SHA256 truncated to 80 bits over the first 273 bits packed MSB-first into
35 bytes (zero padded).
"""
import datetime
import hashlib
import hmac
import logging
import os
import re
import secrets
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from optical_signature import config
from optical_signature.errors import (DegenerateInputError, InvalidArgumentError, LengthError,
                                      SchemaError)
from optical_signature.lsh_core import Hasher, hamming, zero_mean

logger = logging.getLogger(__name__)

_FIELD_WIDTHS = (
    ("dyn_hash", config.HASH_K),
    ("id_hash_half", config.ID_HALF_BITS),
    ("window_no", config.WINDOW_NO_BITS),
    ("unit_id", config.UNIT_ID_BITS),
    ("date", config.DATE_BITS),
    ("mac", config.MAC_BITS),
)
_NORM_TOLERANCE = 1e-12


def _unit(v: np.ndarray, name: str) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise InvalidArgumentError(f"{name} must have a finite nonzero norm")
    # already-normalized vectors are kept bit-exact so save/ingest round-trips
    if abs(norm - 1.0) <= _NORM_TOLERANCE:
        return v
    return v / norm


@dataclass(frozen=True, eq=False)
class FeatureTrack:
    """Per-frame 16-channel facial-motion samples plus identity embedding(s).

    frames has shape (T, 16). identity is the track-level 512-dim embedding; frame_identities,
    when present, holds one embedding per frame (T, 512). Embeddings are unit-normalized here.
    """
    fps: float
    frames: np.ndarray
    identity: np.ndarray
    frame_identities: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.fps > 0:
            raise InvalidArgumentError(f"fps must be positive, got {self.fps}")
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != config.N_CHANNELS:
            raise InvalidArgumentError(
                f"frames should have shape (T, {config.N_CHANNELS}) but has {frames.shape}")
        identity = np.array(self.identity, dtype=np.float64)
        if identity.shape != (config.IDENTITY_DIM,):
            raise InvalidArgumentError(
                f"identity should have {config.IDENTITY_DIM} entries but has shape {identity.shape}")
        identity = _unit(identity, "identity")
        frame_identities = self.frame_identities
        if frame_identities is not None:
            frame_identities = np.array(frame_identities, dtype=np.float64)
            if frame_identities.shape != (frames.shape[0], config.IDENTITY_DIM):
                raise InvalidArgumentError(
                    f"frame_identities should have shape ({frames.shape[0]}, {config.IDENTITY_DIM})"
                    f" but has {frame_identities.shape}")
            frame_identities = np.stack(
                [_unit(row, f"frame_identities[{i}]") for i, row in enumerate(frame_identities)])
            frame_identities.setflags(write=False)
        frames.setflags(write=False)
        identity.setflags(write=False)
        object.__setattr__(self, "fps", float(self.fps))
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "identity", identity)
        object.__setattr__(self, "frame_identities", frame_identities)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.fps

    def identities(self, start: int, n_frames: int) -> np.ndarray:
        """Per-frame embeddings over [start, start + n_frames), the track identity if none."""
        if self.frame_identities is None:
            return np.broadcast_to(self.identity, (n_frames, config.IDENTITY_DIM))
        return self.frame_identities[start:start + n_frames]

    def window_identity(self, start: int, n_frames: int) -> np.ndarray:
        if self.frame_identities is None:
            return self.identity
        return _unit(self.identities(start, n_frames).mean(axis=0), "window identity")

    def equals(self, other: "FeatureTrack") -> bool:
        if self.fps != other.fps or not np.array_equal(self.frames, other.frames):
            return False
        if not np.array_equal(self.identity, other.identity):
            return False
        if (self.frame_identities is None) != (other.frame_identities is None):
            return False
        return self.frame_identities is None or np.array_equal(self.frame_identities,
                                                               other.frame_identities)


@dataclass(frozen=True)
class WindowMeta:
    window_no: int
    unit_id: int
    date: int

    def __post_init__(self):
        for name, width in (("window_no", config.WINDOW_NO_BITS), ("unit_id", config.UNIT_ID_BITS),
                            ("date", config.DATE_BITS)):
            value = getattr(self, name)
            if not 0 <= value < 2 ** width:
                raise InvalidArgumentError(f"{name} must fit in {width} bits, got {value}")

    def next(self) -> "WindowMeta":
        return WindowMeta((self.window_no + 1) % 2 ** config.WINDOW_NO_BITS, self.unit_id, self.date)


def date_code(date: Union[datetime.date, str, None] = None) -> int:
    """Days since the protocol epoch, today by default."""
    if date is None:
        date = datetime.date.today()
    elif isinstance(date, str):
        try:
            date = datetime.date.fromisoformat(date)
        except ValueError:
            raise InvalidArgumentError(f"Date '{date}' is not YYYY-MM-DD") from None
    days = (date - datetime.date.fromisoformat(config.DATE_EPOCH)).days
    if not 0 <= days < 2 ** config.DATE_BITS:
        raise InvalidArgumentError(f"Date {date} is outside the encodable range")
    return days


@dataclass(frozen=True, eq=False)
class Descriptor:
    dyn_hash: np.ndarray
    id_hash_half: np.ndarray
    meta: WindowMeta
    degenerate: bool = False

    def __post_init__(self):
        dyn = np.asarray(self.dyn_hash, dtype=np.uint8).ravel()
        half = np.asarray(self.id_hash_half, dtype=np.uint8).ravel()
        if dyn.size != config.HASH_K or half.size != config.ID_HALF_BITS:
            raise LengthError(f"Descriptor hashes must be {config.HASH_K} and "
                              f"{config.ID_HALF_BITS} bits, got {dyn.size} and {half.size}")
        object.__setattr__(self, "dyn_hash", dyn)
        object.__setattr__(self, "id_hash_half", half)

    def bits(self) -> np.ndarray:
        return np.concatenate([
            self.dyn_hash,
            self.id_hash_half,
            _int_to_bits(self.meta.window_no, config.WINDOW_NO_BITS),
            _int_to_bits(self.meta.unit_id, config.UNIT_ID_BITS),
            _int_to_bits(self.meta.date, config.DATE_BITS),
        ])

    def canonical_bytes(self) -> bytes:
        return np.packbits(self.bits()).tobytes()

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return self.meta == other.meta and np.array_equal(self.bits(), other.bits())


@dataclass(frozen=True, eq=False)
class Signature:
    descriptor: Descriptor
    mac: bytes

    def __post_init__(self):
        if len(self.mac) * 8 != config.MAC_BITS:
            raise LengthError(f"MAC must be {config.MAC_BITS} bits, got {len(self.mac) * 8}")

    def __eq__(self, other):
        if not isinstance(other, Signature):
            return NotImplemented
        return self.descriptor == other.descriptor and self.mac == other.mac


@dataclass(frozen=True)
class KeyMaterial:
    """Pre-shared 128-bit HMAC key plus the 64-bit seed of the LSH hyperplanes."""
    key: bytes = field(repr=False)
    lsh_seed: int

    def __post_init__(self):
        if len(self.key) != config.KEY_BYTES:
            raise InvalidArgumentError(f"Key must be {config.KEY_BYTES} bytes, got {len(self.key)}")
        if not 0 <= self.lsh_seed < 2 ** 64:
            raise InvalidArgumentError("LSH seed must be an unsigned 64-bit integer")


def _int_to_bits(value: int, width: int) -> np.ndarray:
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def _bits_to_int(bits: np.ndarray) -> int:
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


################################################################################################
#                                   Feature vectors                                           #
################################################################################################
@dataclass(frozen=True, eq=False)
class DynamicVector:
    values: np.ndarray
    degenerate: bool


def build_dynamic_vector(track: FeatureTrack, window_start_frame: int,
                         n_frames: int = config.WINDOW_FRAMES) -> DynamicVector:
    """Smooths, standardizes and channel-major concatenates one window of the track."""
    if n_frames < 2:
        raise InvalidArgumentError(f"A window needs at least 2 frames, got {n_frames}")
    if window_start_frame < 0 or window_start_frame + n_frames > track.n_frames:
        raise InvalidArgumentError(
            f"Window [{window_start_frame}, {window_start_frame + n_frames}) is outside the "
            f"{track.n_frames}-frame track")
    window = track.frames[window_start_frame:window_start_frame + n_frames]
    smoothed = ndimage.uniform_filter1d(window, size=config.SMOOTHING_WIDTH, axis=0, mode="nearest")
    std = smoothed.std(axis=0)
    flat = std < 1e-12
    standardized = np.zeros_like(smoothed)
    live = ~flat
    standardized[:, live] = (smoothed[:, live] - smoothed[:, live].mean(axis=0)) / std[live]
    if flat.any():
        logger.debug("Window at frame %d has %d constant channels", window_start_frame, flat.sum())
    return DynamicVector(values=standardized.T.ravel(), degenerate=bool(flat.any()))


def dynamic_hash(track: FeatureTrack, window_start_frame: int, hasher: Hasher) -> np.ndarray:
    n_frames = hasher.input_dim // config.N_CHANNELS
    vector = build_dynamic_vector(track, window_start_frame, n_frames)
    return hasher.hash(zero_mean(vector.values))


def make_descriptor(track: FeatureTrack, meta: WindowMeta, hashers: Tuple[Hasher, Hasher],
                    window_start_frame: int = 0, sentinel_on_degenerate: bool = False) -> Descriptor:
    """Hashes one content window. Even window numbers carry identity bits 0-74, odd ones 75-149.

    With sentinel_on_degenerate, a window whose dynamic vector is all zeros gets an all-zero
    dyn hash and is flagged instead of raising DegenerateInputError.
    """
    dyn_hasher, id_hasher = hashers
    if dyn_hasher.input_dim % config.N_CHANNELS:
        raise InvalidArgumentError(
            f"Dynamic hasher dim {dyn_hasher.input_dim} is not a multiple of {config.N_CHANNELS}")
    if id_hasher.input_dim != config.IDENTITY_DIM:
        raise InvalidArgumentError(f"Identity hasher dim must be {config.IDENTITY_DIM}")
    n_frames = dyn_hasher.input_dim // config.N_CHANNELS
    degenerate = False
    try:
        dyn = dynamic_hash(track, window_start_frame, dyn_hasher)
    except DegenerateInputError:
        if not sentinel_on_degenerate:
            raise
        logger.warning("Window %d has a degenerate dynamic vector, using sentinel hash",
                       meta.window_no)
        dyn = np.zeros(dyn_hasher.k, dtype=np.uint8)
        degenerate = True
    id_hash = id_hasher.hash(track.window_identity(window_start_frame, n_frames))
    return Descriptor(dyn_hash=dyn, id_hash_half=identity_half(id_hash, meta.window_no),
                      meta=meta, degenerate=degenerate)


def identity_half(id_hash: np.ndarray, window_no: int) -> np.ndarray:
    half = id_hash.size // 2
    return id_hash[:half] if window_no % 2 == 0 else id_hash[half:]


def dyn_distance_scan(track: FeatureTrack, start_frame: int, recovered_hash: np.ndarray,
                      hasher: Hasher, epsilon: int = config.ALIGNMENT_EPSILON) -> Tuple[int, int]:
    """Minimum dyn-hash distance over window starts start_frame - eps ... start_frame + eps.

    Returns (distance, offset); ties go to the offset closest to zero. Offsets whose window
    falls outside the track or is degenerate are skipped.
    """
    best = None
    for offset in sorted(range(-epsilon, epsilon + 1), key=abs):
        try:
            candidate = dynamic_hash(track, start_frame + offset, hasher)
        except (InvalidArgumentError, DegenerateInputError):
            continue
        distance = hamming(candidate, recovered_hash)
        if best is None or distance < best[0]:
            best = (distance, offset)
    if best is None:
        raise InvalidArgumentError(f"No usable window within {epsilon} frames of {start_frame}")
    return best


################################################################################################
#                                   MAC and serialization                                     #
################################################################################################
def _key_bytes(key: Union[KeyMaterial, bytes]) -> bytes:
    raw = key.key if isinstance(key, KeyMaterial) else bytes(key)
    if len(raw) != config.KEY_BYTES:
        raise InvalidArgumentError(f"Key must be {config.KEY_BYTES} bytes, got {len(raw)}")
    return raw


def mac_tag(key: bytes, message: bytes, bits: int = config.MAC_BITS) -> bytes:
    """HMAC-SHA256 truncated to its first `bits` bits (a multiple of 8)."""
    if bits % 8 or not 0 < bits <= 256:
        raise InvalidArgumentError(f"Tag length must be a multiple of 8 up to 256, got {bits}")
    return hmac.new(key, message, hashlib.sha256).digest()[:bits // 8]


def seal(descriptor: Descriptor, key: Union[KeyMaterial, bytes]) -> Signature:
    return Signature(descriptor=descriptor,
                     mac=mac_tag(_key_bytes(key), descriptor.canonical_bytes()))


def verify_mac(signature: Signature, key: Union[KeyMaterial, bytes]) -> bool:
    expected = mac_tag(_key_bytes(key), signature.descriptor.canonical_bytes())
    return hmac.compare_digest(expected, signature.mac)


def serialize(signature: Signature) -> np.ndarray:
    mac_bits = np.unpackbits(np.frombuffer(signature.mac, dtype=np.uint8))
    return np.concatenate([signature.descriptor.bits(), mac_bits])


def deserialize(bits) -> Signature:
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size != config.SIGNATURE_BITS:
        raise LengthError(f"Signature payload must be {config.SIGNATURE_BITS} bits, got {bits.size}")
    if np.any(bits > 1):
        raise InvalidArgumentError("Signature payload must be binary")
    fields = {}
    pos = 0
    for name, width in _FIELD_WIDTHS:
        fields[name] = bits[pos:pos + width]
        pos += width
    meta = WindowMeta(window_no=_bits_to_int(fields["window_no"]),
                      unit_id=_bits_to_int(fields["unit_id"]),
                      date=_bits_to_int(fields["date"]))
    descriptor = Descriptor(dyn_hash=fields["dyn_hash"].copy(),
                            id_hash_half=fields["id_hash_half"].copy(), meta=meta,
                            degenerate=not fields["dyn_hash"].any())
    return Signature(descriptor=descriptor, mac=np.packbits(fields["mac"]).tobytes())


################################################################################################
#                                   Key files                                                 #
################################################################################################
_KEY_HEX_CHARS = 2 * config.KEY_BYTES
_SEED_HEX_CHARS = 16
_HEX = re.compile(r"[0-9a-fA-F]+")


def generate_key(seed: Optional[int] = None) -> KeyMaterial:
    """Fresh key material; seeded generation is only meant for reproducible test runs."""
    if seed is None:
        return KeyMaterial(key=secrets.token_bytes(config.KEY_BYTES),
                           lsh_seed=secrets.randbits(64))
    rng = np.random.default_rng(seed)
    return KeyMaterial(key=rng.bytes(config.KEY_BYTES),
                       lsh_seed=int(rng.integers(0, 2 ** 63, dtype=np.int64)))


def parse_key(text: str) -> KeyMaterial:
    compact = "".join(text.split())
    if len(compact) != _KEY_HEX_CHARS + _SEED_HEX_CHARS:
        raise SchemaError(
            f"Key file must hold {_KEY_HEX_CHARS} + {_SEED_HEX_CHARS} hex characters, "
            f"found {len(compact)}", field="key")
    if not _HEX.fullmatch(compact):
        raise SchemaError("Key file holds non-hex characters", field="key")
    return KeyMaterial(key=bytes.fromhex(compact[:_KEY_HEX_CHARS]),
                       lsh_seed=int(compact[_KEY_HEX_CHARS:], 16))


def load_key(path: Optional[str] = None) -> KeyMaterial:
    """Reads a key file from `path`, falling back to the path in $OPTICAL_SIGNATURE_KEY."""
    if path is None:
        path = os.environ.get(config.KEY_ENV_VAR)
        if not path:
            raise InvalidArgumentError(
                f"No key file given and {config.KEY_ENV_VAR} is not set")
    with open(path, "r", encoding="utf-8") as f:
        return parse_key(f.read())


def save_key(key: KeyMaterial, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{key.key.hex()}\n{key.lsh_seed:016x}\n")
