import numpy as np

from imgp.constants import ALLOWED_EXTENSIONS, CONFIG_EXTENSIONS


def allowed_file(filename, extensions=ALLOWED_EXTENSIONS):
    return "." in filename and filename.rsplit(".", 1)[1].lower() in extensions


def is_config_file(filename):
    return allowed_file(filename, CONFIG_EXTENSIONS)


def row_chunks(n_rows, size):
    """Consecutive slices of at most `size` rows covering range(n_rows)."""
    return [slice(start, min(start + size, n_rows)) for start in range(0, n_rows, size)]


def make_rng(seed, *stream):
    """
    Independent generator for a (seed, stream...) tuple, e.g. one per restart
    or per optimizer step, so results do not depend on call order.
    """
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])
