APP_NAME = 'TwinCount'
APP_DESC = 'Semi-supervised cell counting with a twin variational autoencoder'
VERSION = '1.0.0'

# Environment variable used as a seed fallback
ENV_SEED = 'TWINCOUNT_SEED'

# Working resolution of every image in the pipeline
IMAGE_SIZE = 128
MIN_COUNT = 1
MAX_COUNT = 30

# Domain tags
DOMAIN_NAT = 'nat'
DOMAIN_SYN = 'syn'
DOMAINS = [DOMAIN_NAT, DOMAIN_SYN]

# Generator styles and the domain tag they produce
STYLE_SYN_PC = 'syn-pc'
STYLE_SYN_BF = 'syn-bf'
STYLE_PSEUDO_NAT_PC = 'pseudo-nat-pc'
STYLE_PSEUDO_NAT_BF = 'pseudo-nat-bf'
STYLES = [STYLE_SYN_PC, STYLE_SYN_BF, STYLE_PSEUDO_NAT_PC, STYLE_PSEUDO_NAT_BF]
STYLE_DOMAIN = {STYLE_SYN_PC: DOMAIN_SYN, STYLE_SYN_BF: DOMAIN_SYN,
                STYLE_PSEUDO_NAT_PC: DOMAIN_NAT, STYLE_PSEUDO_NAT_BF: DOMAIN_NAT}

# Per-style rendering defaults. Phase-contrast: bright membrane halo over a dark chamber.
# Bright-field: dark membrane over a lighter chamber.
STYLE_DEFAULTS = {
    STYLE_SYN_PC: {'background_level': 0.40,
                   'interior_range': (0.62, 0.78),
                   'membrane_range': (0.82, 0.98),
                   'brightness_scale_range': (0.9, 1.1),
                   'deformation_range': (0.0, 0.05),
                   'texture_range': (0.0, 0.0),
                   'smudge_count_range': (0, 0)},
    STYLE_SYN_BF: {'background_level': 0.62,
                   'interior_range': (0.30, 0.45),
                   'membrane_range': (0.08, 0.22),
                   'brightness_scale_range': (0.9, 1.1),
                   'deformation_range': (0.0, 0.05),
                   'texture_range': (0.0, 0.0),
                   'smudge_count_range': (0, 0)},
    STYLE_PSEUDO_NAT_PC: {'background_level': 0.36,
                          'interior_range': (0.50, 0.75),
                          'membrane_range': (0.75, 1.0),
                          'brightness_scale_range': (0.7, 1.3),
                          'deformation_range': (0.05, 0.2),
                          'texture_range': (0.04, 0.12),
                          'smudge_count_range': (0, 4)},
    STYLE_PSEUDO_NAT_BF: {'background_level': 0.60,
                          'interior_range': (0.28, 0.50),
                          'membrane_range': (0.05, 0.30),
                          'brightness_scale_range': (0.7, 1.3),
                          'deformation_range': (0.05, 0.2),
                          'texture_range': (0.04, 0.12),
                          'smudge_count_range': (0, 4)}
}

# Generator defaults shared by all styles (pixels unless stated otherwise)
GEN_RADIUS_RANGE = (4.0, 10.0)
GEN_ASPECT_RANGE = (0.75, 1.0)
GEN_MEMBRANE_WIDTH_RANGE = (1.0, 2.0)
GEN_CELL_BLUR_RANGE = (0.0, 1.5)
GEN_GLOBAL_BLUR_RANGE = (0.0, 0.8)
GEN_NOISE_RANGE = (0.0, 0.05)
GEN_GEOMETRIC_P = 0.1
GEN_MAX_OVERLAP = 0.3
GEN_MIN_DISTANCE_FACTOR = 1.0
GEN_MAX_PLACEMENT_ATTEMPTS = 500
GEN_SMUDGE_RADIUS_RANGE = (1.5, 4.0)
GEN_SMUDGE_ALPHA = 0.35
GEN_CHAMBER_MARGIN = 4
GEN_BACKGROUND_MAX_COUNT = 3
OVERLAP_FORBID = 'forbid'
OVERLAP_ALLOW = 'allow'
BACKGROUND_PROCEDURAL = 'procedural'
BACKGROUND_MEAN = 'mean'

# Independent random streams derived from one scene seed
STREAM_CONTOUR = 1
STREAM_TEXTURE = 2
STREAM_NOISE = 3
STREAM_LABEL_MASK = 4

# Dataset files
MANIFEST_FILENAME = 'manifest.csv'
MANIFEST_COLUMNS = ['filename', 'count', 'domain', 'seed']
SCENES_FILENAME = 'scenes.json'
GENERATOR_FILENAME = 'generator.json'

# Augmentation defaults
AUG_FLIP_PROB = 0.5
AUG_CROP_SCALE = 0.9
AUG_NOISE_AMPLITUDE = 0.02

# Model defaults
MODEL_ENCODER_CHANNELS = [32, 64, 128, 256]
MODEL_SHARED_CHANNELS = 512
MODEL_BOTTLENECK_UNITS = 512
MODEL_LATENT_DIM = 256
MODEL_DECODER_CHANNELS = [128, 64, 32, 32]
MODEL_SHARED_DECODER_CHANNELS = 256
# per-domain decoder, after the shared transposed convolution (kernel 5, stride 2)
MODEL_DECODER_KERNELS = [5, 5, 5, 2, 6]
MODEL_DECODER_STRIDES = [2, 2, 2, 1, 2]
MODEL_REGRESSOR_UNITS = [256, 128]
MODEL_KERNEL = 5
MODEL_STRIDE = 2
MODEL_PADDING = 2
MODEL_DROPOUT = 0.1
MODEL_LEAKY_SLOPE = 0.2
REGRESSOR_TAP_LATENT = 'latent'
REGRESSOR_TAP_DECODER = 'decoder'
ENCODER_CHAIN = [128, 64, 32, 16, 8, 4]
DECODER_CHAIN = [1, 5, 13, 29, 61, 62, 128]

# Checkpoint container
CHECKPOINT_MAGIC = b'TWCKPT\x00\x01'
CHECKPOINT_VERSION = 1
CHECKPOINT_DTYPES = {'float32': '<f4', 'float64': '<f8', 'int64': '<i8', 'uint8': '|u1'}

# Loss and optimizer defaults
LOSS_W_REC = 100.0
LOSS_W_REGR = 3.0
LOSS_W_KLD = 2.0
LOSS_MSE = 'mse'
LOSS_BCE = 'bce'
BCE_DECAY_RATE = 3e-5
BCE_DECAY_MULTIPLICATIVE = 'multiplicative'
BCE_DECAY_ADDITIVE = 'additive'
BCE_CLAMP = 1e-7
OPT_ADAM = 'adam'
OPT_RADAM = 'radam'
OPT_LEARNING_RATE = 1.3e-4
OPT_BETAS = (0.9, 0.999)
OPT_EPSILON = 1e-8
OPT_WEIGHT_DECAY = 1e-5
WEIGHT_DECAY_EPOCH = 'epoch'
WEIGHT_DECAY_STEP = 'step'
RADAM_RHO_THRESHOLD = 4.0

# Training schedule defaults
TRAIN_MAX_EPOCHS = 50000
TRAIN_REGRESSOR_START = 100
TRAIN_PATIENCE = 2000
TRAIN_MIN_IMPROVEMENT = 1e-4
TRAIN_VALIDATION_SPLIT = 0.1

# Presets for the two published regimes
PRESETS = {'pc': {'rec_kind': LOSS_MSE, 'optimizer': OPT_ADAM, 'batch_size': 128},
           'bf': {'rec_kind': LOSS_BCE, 'optimizer': OPT_RADAM, 'batch_size': 64}}

# Run directory files
LOSS_LOG_FILENAME = 'loss_log.csv'
LOSS_LOG_COLUMNS = ['epoch', 'total', 'rec_nat', 'rec_syn', 'regr_nat', 'regr_syn', 'kld_nat', 'kld_syn', 'lr', 'w_rec_eff']
VALIDATION_LOG_FILENAME = 'validation_log.csv'
VALIDATION_LOG_COLUMNS = ['epoch', 'val_total', 'val_mae_nat', 'val_mae_syn']
BEST_CHECKPOINT_FILENAME = 'best.ckpt'
LAST_CHECKPOINT_FILENAME = 'last.ckpt'
TRAIN_CONFIG_FILENAME = 'train_config.json'
RUN_RECORD_FILENAME = 'run.json'
RUN_LOCK_FILENAME = '.lock'
LOSS_GRAPH_FILENAME = 'loss_graph.html'

# Evaluation files
METRICS_FILENAME = 'metrics.json'
PER_COUNT_FILENAME = 'per_count.csv'
PER_COUNT_COLUMNS = ['count', 'n', 'mae', 'mre', 'acc']
PER_COUNT_GRAPH_FILENAME = 'per_count.html'
LATENTS_FILENAME = 'latents.csv'
TRANSLATIONS_FILENAME = 'translations.jsonl'

# Baseline files and calibrated defaults
POLARITY_BRIGHT = 'cells-bright'
POLARITY_DARK = 'cells-dark'
GRID_RESULTS_FILENAME = 'grid_results.csv'
GRID_BEST_FILENAME = 'best_params.json'
GRID_EXCEL_FILENAME = 'grid_results'
WATERSHED_FIELDS = ['crop_margin', 'blur_kernel', 'threshold', 'polarity', 'distance_peak_min', 'min_region_area']
WATERSHED_DEFAULTS = {
    STYLE_SYN_PC: {'crop_margin': 0, 'blur_kernel': 3, 'threshold': 0.55, 'polarity': POLARITY_BRIGHT,
                   'distance_peak_min': 4, 'min_region_area': 12},
    STYLE_SYN_BF: {'crop_margin': GEN_CHAMBER_MARGIN + 2, 'blur_kernel': 3, 'threshold': 0.5, 'polarity': POLARITY_DARK,
                   'distance_peak_min': 4, 'min_region_area': 12},
    STYLE_PSEUDO_NAT_PC: {'crop_margin': 0, 'blur_kernel': 3, 'threshold': 0.55, 'polarity': POLARITY_BRIGHT,
                          'distance_peak_min': 5, 'min_region_area': 16},
    STYLE_PSEUDO_NAT_BF: {'crop_margin': GEN_CHAMBER_MARGIN + 2, 'blur_kernel': 3, 'threshold': 0.48, 'polarity': POLARITY_DARK,
                          'distance_peak_min': 5, 'min_region_area': 16}
}
WATERSHED_DEFAULT_GRID = {'crop_margin': [0, GEN_CHAMBER_MARGIN + 2],
                          'blur_kernel': [1, 3, 5],
                          'threshold': [0.45, 0.5, 0.55, 0.6, 0.65],
                          'polarity': [POLARITY_BRIGHT, POLARITY_DARK],
                          'distance_peak_min': [3, 4, 6],
                          'min_region_area': [8, 16]}

# Hyperparameter search
HPO_INITIAL_POINTS = 5
HPO_CANDIDATES = 2048
HPO_LOCAL_CANDIDATES = 256
HPO_LOCAL_SIGMA = 0.05
HPO_SEARCH_EPOCHS = 200
HPO_HISTORY_FILENAME = 'history.jsonl'
HPO_BEST_FILENAME = 'best_trial.json'
GP_JITTER_FLOOR = 1e-8
GP_JITTER_MAX = 1e-2
GP_RESTARTS = 8
GP_LOG_LENGTH_BOUNDS = (-6.9, 6.9)
GP_LOG_SIGNAL_BOUNDS = (-9.2, 9.2)
TRIAL_COMPLETED = 'completed'
TRIAL_FAILED = 'failed'
SCALE_LOG = 'log'
SCALE_LINEAR = 'linear'
HPO_DEFAULT_SPACE = [
    {'name': 'learning_rate', 'low': 1e-5, 'high': 1e-3, 'scale': SCALE_LOG, 'integer': False},
    {'name': 'latent_dim', 'low': 32, 'high': 512, 'scale': SCALE_LOG, 'integer': True},
    {'name': 'shared_conv_channels', 'low': 64, 'high': 1024, 'scale': SCALE_LOG, 'integer': True},
    {'name': 'w_rec', 'low': 10.0, 'high': 1000.0, 'scale': SCALE_LOG, 'integer': False},
    {'name': 'w_regr', 'low': 0.3, 'high': 30.0, 'scale': SCALE_LOG, 'integer': False},
    {'name': 'w_kld', 'low': 0.2, 'high': 20.0, 'scale': SCALE_LOG, 'integer': False}
]

# Exit codes of the command line interface
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

# RunConfig file version and sections
RUN_CONFIG_VERSION = 1.0
RUN_CONFIG_SECTIONS = ['version', 'seed', 'generator', 'augmentation', 'model', 'train', 'weights', 'optimizer',
                       'search', 'hpo', 'watershed', 'paths']

# Graph colours
COLOR_NAT = '#2e7d32'            # green, as the natural branch
COLOR_SYN = '#1565c0'            # blue, as the synthetic branch
COLOR_TOTAL = '#c62828'          # red
COLOR_MEAN_BAR = '#f9a825'       # orange

# Text printed when a config file fails its health check
HEALTH_ERROR_TXT = '[!] The below configuration file contains errors. It\'s recommended to check it via the ' \
                   '\'--health\' argument: \n    - '
