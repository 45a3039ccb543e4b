import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class Config:
    """Runtime settings read from the environment (.env supported).

    Study parameters (phantom, geometry, reconstruction variants) are not set here;
    they live in the study file validated by the pipeline schema.
    """

    # Execution
    THREADS = max(1, int(os.getenv("SPECT_THREADS", "1")))
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()

    # Output Settings
    OUTPUT_DIR = os.getenv("SPECT_OUTPUT_DIR", "study_output")
    MANIFEST_NAME = os.getenv("SPECT_MANIFEST_NAME", "manifest.json")

    # Simulation defaults
    DEFAULT_SEED = int(os.getenv("SPECT_DEFAULT_SEED", "20240601"))
    DEFAULT_PITCH_MM = float(os.getenv("SPECT_DEFAULT_PITCH_MM", "4.0"))

    # Dense system-matrix oracle is only built for grids up to this many voxels
    EXPLICIT_MATRIX_MAX_VOXELS = int(os.getenv("EXPLICIT_MATRIX_MAX_VOXELS", "4096"))

    # Per-view attenuation factors are cached while they fit in this budget
    PROJECTOR_CACHE_MB = float(os.getenv("SPECT_PROJECTOR_CACHE_MB", "1024"))

    # Poisson sampler block size (bins per independent random stream)
    NOISE_BLOCK_SIZE = int(os.getenv("SPECT_NOISE_BLOCK_SIZE", "65536"))


# Global config instance
config = Config()
