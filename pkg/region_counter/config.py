ALPHA = 0.3
MIN_CONFIDENCE = 0.5
SIGMA_FACTOR = 0.15
DIVISION_MODE = "envelope"
HEIGHT_ANCHOR = "center"
DENSITY_NORMALIZATION = "per_kernel"
M_MIN = 2.0

BRANCH_WIDTHS = (16, 32, 32)
TAIL_CHANNELS = 32
INIT_BIAS = 1e-2
LEARNING_RATE = 1e-5
TRAIN_STEPS = 2000
BATCH_SIZE = 1
SEED = 0
TRAIN_FRACTION = 0.7
WORKERS = 4

CONFIG_VERSION = 1
CHECKPOINT_MAGIC = b"IDCN"
CHECKPOINT_VERSION = 1
