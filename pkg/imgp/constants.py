ALLOWED_EXTENSIONS = ("csv",)
CONFIG_EXTENSIONS = ("json",)

# Below this kernel density estimate an ambient point is considered detached
# from the graph and the Euclidean model has to take over.
DETACH_THRESHOLD = 1e-300

# Nystrom extension divides by 1 - lambda_l.
EIGENVALUE_ONE_GAP = 1e-8

VARIANCE_FLOOR = 1e-12
NEGATIVE_VARIANCE_TOLERANCE = 1e-10

DENSE_EIGEN_THRESHOLD = 2000
DENSE_LOGDET_THRESHOLD = 2000
RFF_THRESHOLD = 5000
RFF_FIT_SUBSAMPLE = 2000

CG_TOL = 1e-8
CG_MAX_ITERS_FACTOR = 10

LANCZOS_OVERSAMPLING = 3
LANCZOS_TOL = 1e-10

GRAM_JITTER = 1e-10

BLEND_RADIUS_FACTOR = 3.0

DUMBBELL_TEST_MESH = 2000

PARAM_NAMES = ("alpha", "kappa", "sigma2", "noise2")

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3
EXIT_IO_ERROR = 4
