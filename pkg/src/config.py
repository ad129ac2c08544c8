"""Configuration settings for the small-group learning engine."""

import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Environment-level settings and library-wide constants."""

    # Application settings
    DEBUG = os.getenv("SGL_DEBUG", "False").lower() == "true"
    LOG_LEVEL = os.getenv("SGL_LOG_LEVEL", "INFO")
    LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"

    # Run defaults (overridable on the command line)
    OUTPUT_DIR = os.getenv("SGL_OUTPUT_DIR", "runs")
    WORKERS = int(os.getenv("SGL_WORKERS", 1))
    PRECISION = os.getenv("SGL_PRECISION", "f64")

    PRECISIONS = {"f64": "float64", "f32": "float32"}

    # Numerical tolerances
    PROB_TOL = 1e-6
    PROB_TOL_F64 = 1e-12
    LOG_FLOOR = 1e-12
    SOFT_LABEL_TOL = 1e-4
    NULL_DIRECTION_NORM = 1e-12

    # Hypergradient oracle
    GRADCHECK_STEP = 1e-4
    GRADCHECK_TOLERANCE = 1e-3
    ORACLE_MAX_WEIGHTS = 200
    ORACLE_MAX_ARCH_COORDS = 60
    ORACLE_MAX_BATCH = 16

    # Search defaults
    DEFAULT_LAMBDA = 0.1
    DEFAULT_FD_SCALE = 0.01
    DEFAULT_SEEDS = list(range(1, 11))
    ADAM_LR = 3e-4
    ADAM_WEIGHT_DECAY = 1e-3
    ADAM_BETAS = (0.5, 0.999)
    ADAM_EPS = 1e-8

    # Persistence
    METRICS_SCHEMA_VERSION = 1
    CHECKPOINT_VERSION = 1
    LEARNER_SEED_STRIDE = 100


config = Config()
