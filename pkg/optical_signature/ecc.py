"""Concatenated error correction: outer RS(64, 45) over GF(2^8), inner K=7 rate-1/2 code.

Window budget:

    353 signature bits + 7 pad        = 360 bits = 45 bytes
    RS(64, 45)                        = 64 bytes = 512 bits
    + 4 pad bits                      = 516 bits
    + 6 tail bits, rate 1/2           = 2 * 522 = 1044 coded bits = 87 cells * 12 bits

Soft values follow the demodulator: +1 is a confident 0, -1 a confident 1.
"""
import functools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from reedsolo import ReedSolomonError, RSCodec

from optical_signature import config
from optical_signature.errors import DecodeFailure, InvalidArgumentError, LengthError

logger = logging.getLogger(__name__)

LOW_CONFIDENCE = 0.1
_N_STATES = 1 << (config.CONV_K - 1)
_INIT_METRIC = -1e12


@dataclass(frozen=True)
class RsParams:
    n: int = config.RS_N
    k: int = config.RS_K

    def __post_init__(self):
        if not 0 < self.k < self.n <= 255:
            raise InvalidArgumentError(f"RS parameters must satisfy 0 < k < n <= 255, got "
                                       f"({self.n}, {self.k})")

    @property
    def nsym(self) -> int:
        return self.n - self.k

    @property
    def t(self) -> int:
        return self.nsym // 2


RS = RsParams()


@functools.lru_cache(maxsize=None)
def _codec(params: RsParams) -> RSCodec:
    return RSCodec(params.nsym, nsize=params.n)


def rs_encode(payload: bytes, params: RsParams = RS) -> bytes:
    if len(payload) != params.k:
        raise LengthError(f"RS payload must be {params.k} bytes, got {len(payload)}")
    return bytes(_codec(params).encode(bytes(payload)))


def _rs_decode(codeword: bytes, params: RsParams,
               erase_pos: Optional[Sequence[int]] = None) -> Tuple[bytes, bytes]:
    if len(codeword) != params.n:
        raise LengthError(f"RS codeword must be {params.n} bytes, got {len(codeword)}")
    try:
        decoded, decoded_full, _ = _codec(params).decode(
            bytearray(codeword), erase_pos=list(erase_pos) if erase_pos else None)
    except ReedSolomonError as e:
        raise DecodeFailure(f"Uncorrectable RS codeword: {e}") from e
    return bytes(decoded), bytes(decoded_full)


def rs_decode(codeword: bytes, erase_pos: Optional[Sequence[int]] = None,
              params: RsParams = RS) -> bytes:
    """Corrects up to t byte errors (or e errors and f erasures with 2e + f <= n - k)."""
    return _rs_decode(codeword, params, erase_pos)[0]


################################################################################################
#                                   Convolutional code                                        #
################################################################################################
def _parity(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    out = np.zeros_like(x)
    while np.any(x):
        out ^= x & 1
        x = x >> 1
    return out


def _taps(poly: int) -> np.ndarray:
    # delay d multiplies the register bit 6 - d; the newest input sits in bit 6
    return np.array([(poly >> (config.CONV_K - 1 - d)) & 1 for d in range(config.CONV_K)],
                    dtype=np.int64)


def _trellis():
    ns = np.arange(_N_STATES)
    pred = np.stack([((ns & 0x1F) << 1) | j for j in (0, 1)], axis=1)  # (64, 2)
    bit = ns >> (config.CONV_K - 2)
    reg = (bit[:, None] << (config.CONV_K - 1)) | pred
    signs = np.stack([1 - 2 * _parity(reg & g) for g in config.CONV_POLYS], axis=0)  # (2, 64, 2)
    return pred, bit.astype(np.uint8), signs.astype(np.float64)


_PRED, _INPUT_BIT, _BRANCH_SIGNS = _trellis()


def conv_encode(bits) -> np.ndarray:
    """Rate-1/2 K=7 (171, 133) encoding of 516 bits plus a 6-bit zero tail."""
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size != config.CONV_INPUT_BITS:
        raise LengthError(f"Convolutional input must be {config.CONV_INPUT_BITS} bits, "
                          f"got {bits.size}")
    u = np.concatenate([bits, np.zeros(config.CONV_TAIL_BITS, dtype=np.int64)])
    coded = np.empty((u.size, 2), dtype=np.uint8)
    for i, poly in enumerate(config.CONV_POLYS):
        coded[:, i] = np.convolve(u, _taps(poly))[:u.size] % 2
    return coded.ravel()


def _viterbi(soft: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched correlation-metric Viterbi. Returns decoded bits and survivor metric gaps."""
    batch, n_coded = soft.shape
    steps = n_coded // 2
    r = soft.reshape(batch, steps, 2)
    metrics = np.full((batch, _N_STATES), _INIT_METRIC)
    metrics[:, 0] = 0.0
    decisions = np.empty((steps, batch, _N_STATES), dtype=np.uint8)
    gaps = np.empty((steps, batch, _N_STATES))
    for i in range(steps):
        branch = (r[:, i, 0, None, None] * _BRANCH_SIGNS[0]
                  + r[:, i, 1, None, None] * _BRANCH_SIGNS[1])  # (B, 64, 2)
        cand = metrics[:, _PRED] + branch
        choice = np.argmax(cand, axis=2)
        decisions[i] = choice
        gaps[i] = np.abs(cand[:, :, 0] - cand[:, :, 1])
        metrics = np.take_along_axis(cand, choice[:, :, None], axis=2)[:, :, 0]
        metrics -= metrics.max(axis=1, keepdims=True)
    bits = np.empty((batch, steps), dtype=np.uint8)
    path_gaps = np.empty((batch, steps))
    state = np.zeros(batch, dtype=np.int64)  # tail-flushed: end in state 0
    rows = np.arange(batch)
    for i in range(steps - 1, -1, -1):
        bits[:, i] = _INPUT_BIT[state]
        path_gaps[:, i] = gaps[i, rows, state]
        state = _PRED[state, decisions[i, rows, state]]
    return bits, path_gaps


def _check_soft(soft_bits) -> Tuple[np.ndarray, bool]:
    soft = np.asarray(soft_bits, dtype=np.float64)
    single = soft.ndim == 1
    soft = np.atleast_2d(soft)
    if soft.ndim != 2 or soft.shape[1] != config.CODED_BITS:
        raise LengthError(f"Expected {config.CODED_BITS} soft values per window, "
                          f"got shape {np.shape(soft_bits)}")
    if not np.all(np.isfinite(soft)):
        raise InvalidArgumentError("Soft values must be finite")
    return np.clip(soft, -1.0, 1.0), single


def viterbi_soft(soft_bits) -> np.ndarray:
    """Maximum-likelihood 516 input bits for one window (1044,) or a batch (B, 1044)."""
    soft, single = _check_soft(soft_bits)
    bits, _ = _viterbi(soft)
    bits = bits[:, :config.CONV_INPUT_BITS]
    return bits[0] if single else bits


################################################################################################
#                                   Window codec                                              #
################################################################################################
@dataclass(frozen=True, eq=False)
class WindowDecode:
    signature_bits: Optional[np.ndarray]
    viterbi_bits: np.ndarray
    corrected_bytes: int
    erasures: int
    low_confidence: bool

    @property
    def ok(self) -> bool:
        return self.signature_bits is not None


def encode_window(signature_bits) -> np.ndarray:
    bits = np.asarray(signature_bits, dtype=np.uint8).ravel()
    if bits.size != config.SIGNATURE_BITS:
        raise LengthError(f"Signature must be {config.SIGNATURE_BITS} bits, got {bits.size}")
    padded = np.zeros(config.RS_PAYLOAD_BITS, dtype=np.uint8)
    padded[:bits.size] = bits
    codeword = rs_encode(np.packbits(padded).tobytes())
    cw_bits = np.unpackbits(np.frombuffer(codeword, dtype=np.uint8))
    return conv_encode(np.concatenate([cw_bits, np.zeros(config.CONV_PAD_BITS, dtype=np.uint8)]))


def _byte_reliability(path_gaps: np.ndarray) -> np.ndarray:
    """Smallest survivor/competitor gap over each codeword byte and the span that follows it."""
    span = 8 + config.CONV_K - 1
    return np.array([path_gaps[8 * m:8 * m + span].min() for m in range(config.RS_N)])


def _unpack_payload(payload: bytes) -> Optional[np.ndarray]:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    # nonzero pad bits mean RS converged on the wrong codeword
    if np.any(bits[config.SIGNATURE_BITS:]):
        return None
    return bits[:config.SIGNATURE_BITS].copy()


def _decode_one(soft: np.ndarray, viterbi_bits: np.ndarray, path_gaps: np.ndarray) -> WindowDecode:
    low_confidence = float(np.mean(np.abs(soft))) < LOW_CONFIDENCE
    codeword = np.packbits(viterbi_bits[:config.RS_CODEWORD_BITS]).tobytes()
    attempts = [()]
    order = np.argsort(_byte_reliability(path_gaps), kind="stable")
    attempts += [tuple(sorted(order[:n].tolist())) for n in range(2, config.MAX_ERASURES + 1, 2)]
    for erase_pos in attempts:
        try:
            payload, corrected = _rs_decode(codeword, RS, erase_pos)
        except DecodeFailure:
            continue
        bits = _unpack_payload(payload)
        if bits is None:
            logger.warning("RS decode with %d erasures left nonzero pad bits, "
                           "treating as miscorrection", len(erase_pos))
            continue
        n_corrected = sum(a != b for a, b in zip(codeword, corrected))
        if erase_pos:
            logger.info("Window recovered with %d erasures", len(erase_pos))
        return WindowDecode(signature_bits=bits, viterbi_bits=viterbi_bits,
                            corrected_bytes=n_corrected, erasures=len(erase_pos),
                            low_confidence=low_confidence)
    return WindowDecode(signature_bits=None, viterbi_bits=viterbi_bits, corrected_bytes=0,
                        erasures=0, low_confidence=low_confidence)


def decode_window(soft_bits) -> WindowDecode:
    """Viterbi, then RS with an errors-and-erasures retry. A failed window has no bits."""
    soft, single = _check_soft(soft_bits)
    if not single:
        raise LengthError("decode_window takes one window, use decode_windows for a batch")
    return decode_windows(soft)[0]


def decode_windows(soft_bits) -> list:
    soft, _ = _check_soft(soft_bits)
    bits, gaps = _viterbi(soft)
    return [_decode_one(soft[i], bits[i, :config.CONV_INPUT_BITS], gaps[i])
            for i in range(soft.shape[0])]


def hard_to_soft(bits) -> np.ndarray:
    """Noiseless soft values: 0 -> +1, 1 -> -1."""
    return 1.0 - 2.0 * np.asarray(bits, dtype=np.float64)
