"""
Central configuration for the garment deformation engine.
All tuneable parameters in one place.
"""

import os
from pathlib import Path

# ── Paths ──────────────────────────────────────────────────────────────────
PROJECT_ROOT = Path(__file__).resolve().parent
OUTPUT_DIR = PROJECT_ROOT / "output"
CACHE_DIR = PROJECT_ROOT / ".cache"

# ── Mesh ───────────────────────────────────────────────────────────────────
MIN_FACE_AREA = 1e-12              # m², faces at or below are degenerate
TESTED_FACE_BUDGET = 50_000        # documented range, not enforced

# ── Deformation (Adam on Jacobians) ────────────────────────────────────────
ITERATIONS = 2000
LEARNING_RATE = 1e-3
LEARNING_RATE_MIN = 1e-4           # cosine decay floor
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CAMERAS_PER_ITER = 4               # K views per iteration
SURFACE_SAMPLES = 5000             # points per mesh per iteration
CHAMFER_TARGET = "samples"         # "samples": fresh guide samples per iteration; "surface": exact guide surface
CHECKPOINT_EVERY = 200
EARLY_STOP_PATIENCE = 300
SEED = 0
LOG_EVERY = 100
SHOW_PROGRESS = True

# ── Loss weights ───────────────────────────────────────────────────────────
W_CD = 1.0
W_LAP = 0.05
W_TRIAG = 0.01
W_2D = 0.5
W_E = 0.1
TRIAG_EDGE_WEIGHT = 1.0            # internal edge-length term weight
TRIAG_AREA_EPS_FACTOR = 1e-3       # eps_A = (factor * mean_edge)^4

# ── Rendering ─────────────────────────────────────────────────────────────
LOSS_RESOLUTION = (256, 256)
METRIC_RESOLUTION = (512, 512)
RENDER_SOFTNESS = 1.0              # pixels
CAMERA_FOV_DEG = 60.0
CAMERA_DISTANCE_FACTOR = 2.2       # x bounding-sphere radius
ELEVATION_RANGE_DEG = (-20.0, 40.0)
MAX_WORKERS = 4                    # per-view thread pool

# ── Embedding provider ────────────────────────────────────────────────────
PROVIDER = "stub"                  # "stub" | "remote"
STUB_GRID = 32                     # stub features: 32x32 grayscale -> D = 1024
EMBED_ENDPOINT_ENV = "GARMENT3D_EMBED_ENDPOINT"
EMBED_ENDPOINT = os.environ.get(EMBED_ENDPOINT_ENV, "http://127.0.0.1:5001")
EMBED_TIMEOUT = 10.0               # seconds
EMBED_RETRIES = 3
EMBED_BACKOFF = 0.5                # seconds, doubled per retry
EMBED_CACHE_DIR = CACHE_DIR / "embeddings"

# ── Texture ───────────────────────────────────────────────────────────────
TEXTURE_SIZE = 1024
TEXTURE_DILATION = 4               # texels of seam bleed
DEPTH_TOLERANCE_FACTOR = 1e-3      # x bounding-sphere radius
FACING_THRESHOLD = 0.2             # min cos(theta) to write a texel
NEUTRAL_GRAY = 0.5
TEXEL_CACHE_DIR = CACHE_DIR / "texels"

# ── Body fit ──────────────────────────────────────────────────────────────
COLLISION_MARGIN = 0.003           # m
FIT_STAGE_ITERATIONS = (300, 500, 200)
FIT_SAMPLES = 2000                 # garment surface samples
FIT_LR_RIGID = 5e-3
FIT_LR_SHAPE = 5e-2
FIT_LR_POSE = 1e-2
FIT_COLLISION_WEIGHT = 10.0
FIT_LR_DECAY = 0.01                # final lr as a fraction of each stage lr
FIT_WEIGHT_TOLERANCE = 1e-6        # skinning weight rows must sum to 1

# ── Evaluation ────────────────────────────────────────────────────────────
EVAL_VIEWS = 36

# ── Embedding service ─────────────────────────────────────────────────────
SERVICE_HOST = "127.0.0.1"
SERVICE_PORT = 5001
SERVICE_BACKEND = "stub"           # "stub" | "clip"
CLIP_MODEL = "clip-ViT-B-32"       # sentence-transformers model name
