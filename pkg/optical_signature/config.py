"""Protocol constants shared by the core unit and the verifier.

Everything the two sides must agree on bit-for-bit lives here. Values that follow from
others are computed rather than repeated.
"""
import math

SCHEMA_VERSION = "1.0"
KEY_ENV_VAR = "OPTICAL_SIGNATURE_KEY"

################################################################################################
#                                   Optical embedding                                         #
################################################################################################
SLM_W = 640
SLM_H = 360
GRID_COLS = 16
GRID_ROWS = 9
CELL_PX = SLM_W // GRID_COLS  # 40
LOC_BLOCK_CELLS = 2  # localization blocks are 2x2 unit cells

N_DATA_CELLS = 87
N_SYNC_CELLS = 32
N_LOC_BLOCKS = 4
N_GUARD_CELLS = GRID_COLS * GRID_ROWS - N_DATA_CELLS - N_SYNC_CELLS \
    - N_LOC_BLOCKS * LOC_BLOCK_CELLS ** 2  # 9

F_D = 3.0  # data / sync modulation frequency, Hz
F_L = 6.0  # localization beacon frequency, Hz
SLOT_RATE = 2 * F_D  # bitmap refresh, Hz
DISPLAY_RATE = 2 * F_L  # sub-frame rate needed to toggle the beacon
SUBFRAMES_PER_SLOT = int(DISPLAY_RATE // SLOT_RATE)

WINDOW_S = 4.5
DOWNTIME_S = 0.5
MODULATION_S = WINDOW_S - DOWNTIME_S
DOWNTIME_SLOTS = int(round(DOWNTIME_S * SLOT_RATE))  # 3
MODULATION_SLOTS = int(round(MODULATION_S * SLOT_RATE))  # 24
WINDOW_SLOTS = DOWNTIME_SLOTS + MODULATION_SLOTS  # 27
DATA_BITS_PER_CELL = int(round(MODULATION_S * F_D))  # 12
CODED_BITS = N_DATA_CELLS * DATA_BITS_PER_CELL  # 1044

################################################################################################
#                                   Descriptor / signature                                    #
################################################################################################
CORE_FPS = 24.0
N_CHANNELS = 16
N_LIP_DISTANCES = 5
N_BLENDSHAPES = 11
IDENTITY_DIM = 512
WINDOW_FRAMES = int(round(WINDOW_S * CORE_FPS))  # 108
SMOOTHING_WIDTH = 5

HASH_K = 150
ID_HALF_BITS = HASH_K // 2
WINDOW_NO_BITS = 16
UNIT_ID_BITS = 16
DATE_BITS = 16
DATE_EPOCH = "2020-01-01"
META_BITS = WINDOW_NO_BITS + UNIT_ID_BITS + DATE_BITS
DESCRIPTOR_BITS = HASH_K + ID_HALF_BITS + META_BITS  # 273
MAC_BITS = 80
SIGNATURE_BITS = DESCRIPTOR_BITS + MAC_BITS  # 353
KEY_BYTES = 16

# raw-feature angular thresholds and their Hamming equivalents at k = 150
DYN_THETA = 1.17
ID_THETA = 0.88
DYN_THRESH = int(round(HASH_K * DYN_THETA / math.pi))  # 56
ID_THRESH = int(round(HASH_K * ID_THETA / math.pi))  # 42
ALIGNMENT_EPSILON = 2  # frames at CORE_FPS

################################################################################################
#                                   Error correction                                          #
################################################################################################
RS_N = 64
RS_K = 45
CONV_K = 7
CONV_POLYS = (0o171, 0o133)
CONV_FREE_DISTANCE = 10
RS_PAYLOAD_BITS = RS_K * 8  # 360
RS_CODEWORD_BITS = RS_N * 8  # 512
CONV_PAD_BITS = 4
CONV_INPUT_BITS = RS_CODEWORD_BITS + CONV_PAD_BITS  # 516
CONV_TAIL_BITS = CONV_K - 1
MAX_ERASURES = RS_N - RS_K - 1  # 18, keeps one parity symbol for error detection

################################################################################################
#                                   Adaptive embedding                                        #
################################################################################################
BETA_MAX = 0.0
PHI_MAX = 5.0
DELTA_I = 5
I_INIT = 45
I_MIN = 0
I_MAX = 765

################################################################################################
#                                   Verification                                              #
################################################################################################
FRAME_BUDGET = 800
HEATMAP_THRESHOLD_FACTOR = 5.0
HEATMAP_BLUR_KSIZE = 5
MIN_BLOB_AREA = 16
CELL_INSET = 0.10
MIN_CELL_AREA = 4.0
DETREND_S = 2.0
ENVELOPE_FRACTION = 0.5
