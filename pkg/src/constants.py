
# 상수 정의

# ---------- 파일 포맷 ----------
PF2_MAGIC = "PF2"
FMAP_MAGIC = "FMAP"
CKPT_MAGIC = b"SDFCKPT\x00"
CKPT_VERSION = 1

CAMERAS_FILE = "cameras.json"
SCENE_FILE = "scene.json"
KEYPOINTS_FILE = "keypoints.txt"
IMAGES_DIR = "images"
DEPTH_GT_DIR = "depth_gt"
PRIORS_DIR = "priors"
FEATURES_DIR = "features"

CHECKPOINT_FILE = "checkpoint.bin"
METRICS_LOG_FILE = "metrics.log"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"
REGISTRY_FILE = "runs.sqlite"

# ---------- 장면 ----------
SCENE_BOUND_RADIUS = 1.0
ALLOWED_FEATURE_SCALES = (1.0, 0.5, 0.25)

# ---------- 필드 ----------
SDF_HIDDEN_LAYERS = 4
SDF_HIDDEN_DIM = 128
SDF_POS_BANDS = 6
SDF_SKIP_LAYERS = (2,)
SDF_FEATURE_DIM = 64
COLOR_HIDDEN_LAYERS = 2
COLOR_HIDDEN_DIM = 64
COLOR_DIR_BANDS = 4
GEOMETRIC_INIT_RADIUS = 0.6
# s = exp(10 * variance), NeuS 기본값 0.3
INIT_VARIANCE = 0.3
VARIANCE_SCALE = 10.0

# ---------- 옵티마이저 ----------
LEARNING_RATE = 5e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WARMUP_FRACTION = 0.05

# ---------- 렌더링 ----------
N_COARSE = 64
N_IMPORTANCE = 32
UPSAMPLE_MIN_S = 64.0
DEPTH_EPS = 1e-6
WEIGHT_SUM_VALID = 0.01

# ---------- 손실 ----------
ALPHA_DEPTH = 0.5
BETA_EIKONAL = 0.1
TAU_MASK = 0.0
PATCH_START_FRACTION = 0.2
MASK_WARMUP_FRACTION = 0.025
PATCH_HALF = 2  # 5x5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
COSINE_EPS = 1e-8

# sample_normalized 는 paper_literal 의 별칭
FEATURE_MODES = ("accumulate", "paper_literal", "sample_normalized", "l1", "l2", "on_surface")
DEPTH_MODES = ("uncertainty", "mono")

# ---------- 학습 ----------
TOTAL_STEPS = 5000
RAYS_PER_BATCH = 512
LOG_INTERVAL = 100
CKPT_INTERVAL = 1000
MESH_RESOLUTION = 128
CHAMFER_SAMPLES = 20000

# ---------- 합성 ----------
SPHERE_TRACE_STEPS = 256
SPHERE_TRACE_EPS = 1e-6
LIGHT_DIRECTION = (0.4, 0.5, 1.0)
AMBIENT = 0.25
SYNTH_PRESETS = ("sphere3", "spherebox3", "lowtex3", "sphere3-wide")

# ---------- CLI 종료 코드 ----------
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
