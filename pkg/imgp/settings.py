import os


class Config:
    TESTING = False
    THREADS = int(os.environ.get("IMGP_THREADS", os.cpu_count() or 1))
    LOG_LEVEL = os.environ.get("IMGP_LOG_LEVEL", "INFO")
    OUTPUT_FOLDER = os.environ.get("IMGP_OUTPUT_FOLDER", "statics/runs")


class TestingConfig(Config):
    TESTING = True
    THREADS = 1
    LOG_LEVEL = "WARNING"


def worker_count(requested=None):
    """Cap a requested degree of parallelism by IMGP_THREADS."""
    cap = max(1, Config.THREADS)
    if requested is None:
        return cap
    return max(1, min(int(requested), cap))
