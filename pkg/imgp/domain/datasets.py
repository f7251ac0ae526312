import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger

from imgp.constants import DUMBBELL_TEST_MESH
from imgp.errors import ConfigError, DimensionMismatch, EmptyCloud, ParseError
from imgp.models import PointCloud
from imgp.services.utils import make_rng

MIN_GENERATED_POINTS = 10


# ============================================================
# Dumbbell curve
# ============================================================
class DumbbellCurve:
    """
    Figure-eight shaped closed curve: unit circles centered at (+-2.5, 0)
    joined by their two inner common tangents, which cross at the origin.
    Traversal: tangent S1 from the upper left to the lower right, the outer
    arc of the right circle counterclockwise, tangent S2 from the upper right
    to the lower left, then the outer arc of the left circle clockwise.
    """

    center = 2.5
    radius = 1.0

    def __init__(self):
        cos_psi = self.radius / self.center
        self.psi = math.acos(cos_psi)
        self.tangent_x = self.center - self.radius * cos_psi
        self.tangent_y = self.radius * math.sin(self.psi)
        self.segment = 2.0 * math.hypot(self.tangent_x, self.tangent_y)
        self.arc = 2.0 * (math.pi - self.psi) * self.radius
        self.length = 2.0 * self.segment + 2.0 * self.arc
        # top of the left circle, reached on the final arc
        self.anchor = self.segment + self.arc + self.segment + (1.5 * math.pi - self.psi) * self.radius
        self.anchor_point = np.array([-self.center, self.radius])

    def point(self, s):
        """Points at arclength positions s (wrapped to [0, length))."""
        s = np.mod(np.asarray(s, dtype=np.float64), self.length)
        out = np.empty(s.shape + (2,))
        bounds = np.cumsum([self.segment, self.arc, self.segment])
        tx, ty = self.tangent_x, self.tangent_y

        first = s < bounds[0]
        u = s[first] / self.segment
        out[first] = np.stack([-tx + 2 * tx * u, ty - 2 * ty * u], axis=-1)

        right = (s >= bounds[0]) & (s < bounds[1])
        angle = -(math.pi - self.psi) + (s[right] - bounds[0]) / self.radius
        out[right] = np.stack(
            [self.center + self.radius * np.cos(angle), self.radius * np.sin(angle)], axis=-1
        )

        second = (s >= bounds[1]) & (s < bounds[2])
        u = (s[second] - bounds[1]) / self.segment
        out[second] = np.stack([tx - 2 * tx * u, ty - 2 * ty * u], axis=-1)

        left = s >= bounds[2]
        angle = -self.psi - (s[left] - bounds[2]) / self.radius
        out[left] = np.stack(
            [-self.center + self.radius * np.cos(angle), self.radius * np.sin(angle)], axis=-1
        )
        return out

    def geodesic(self, s, t):
        """Intrinsic distance between arclength positions on the closed curve."""
        gap = np.abs(np.mod(np.asarray(s), self.length) - np.mod(np.asarray(t), self.length))
        return np.minimum(gap, self.length - gap)


@dataclass
class GeneratedData:
    cloud: PointCloud
    truth: np.ndarray
    arclength: np.ndarray
    test_points: np.ndarray
    test_values: np.ndarray


def _check_generator_size(N, n_labeled=0):
    if N < MIN_GENERATED_POINTS:
        raise ConfigError(f"generators need at least {MIN_GENERATED_POINTS} points, got {N}")
    if not 0 <= n_labeled <= N:
        raise ConfigError(f"cannot label {n_labeled} of {N} points")


def gen_dumbbell(N, beta=0.0, n_labeled=10, seed=0, test_mesh=DUMBBELL_TEST_MESH):
    """
    N points uniform in arclength on the dumbbell curve with f(x) = sin(d(x*, x)),
    d the geodesic distance to the top of the left circle. Labels get N(0, beta^2)
    noise, coordinates get N(0, beta^2 I) noise; the test mesh is noiseless.
    """
    _check_generator_size(N, n_labeled)
    curve = DumbbellCurve()
    rng = make_rng(seed)
    arclength = rng.uniform(0.0, curve.length, size=N)
    clean = curve.point(arclength)
    truth = np.sin(curve.geodesic(arclength, curve.anchor))

    points = clean + beta * rng.standard_normal(clean.shape)
    labels = truth + beta * rng.standard_normal(N)
    labeled_idx = np.sort(rng.choice(N, size=n_labeled, replace=False))

    mesh = np.linspace(0.0, curve.length, test_mesh, endpoint=False)
    cloud = PointCloud.from_raw(points, labeled_idx, labels[labeled_idx])
    logger.info("Generated dumbbell: N={}, n={}, beta={}", N, n_labeled, beta)
    return GeneratedData(
        cloud=cloud,
        truth=truth,
        arclength=arclength,
        test_points=curve.point(mesh),
        test_values=np.sin(curve.geodesic(mesh, curve.anchor)),
    )


def gen_circle(N, radius=1.0, seed=0, equispaced=False):
    """Uniform samples on a circle; equispaced puts them at angles 2 pi k / N."""
    if equispaced:
        angles = 2.0 * np.pi * np.arange(N) / N
    else:
        _check_generator_size(N)
        angles = make_rng(seed).uniform(0.0, 2.0 * np.pi, size=N)
    points = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return PointCloud.from_raw(points)


GENERATORS = {
    "dumbbell": gen_dumbbell,
}


# ============================================================
# CSV
# ============================================================
def _parse_float(text, line, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"column {column}: cannot parse {text!r} as a number", line) from None
    if not math.isfinite(value):
        raise ParseError(f"column {column}: non-finite value {text!r}", line)
    return value


def _coordinate_columns(fieldnames):
    if not fieldnames:
        raise ParseError("missing header row", 1)
    names = list(fieldnames)
    has_labels = names[-1] == "y"
    coordinates = names[:-1] if has_labels else names
    expected = [f"x{i + 1}" for i in range(len(coordinates))]
    if not coordinates or coordinates != expected:
        raise ParseError(f"header must be x1..xd[,y], got {','.join(names)}", 1)
    return coordinates, has_labels


def ingest_csv(path):
    """
    Read a point cloud from a CSV file with header x1,...,xd[,y]. Rows with an
    empty or absent y are unlabeled.
    """
    points, labeled_idx, labels = [], [], []
    line = 1
    with open(path, "r", encoding="utf-8", newline="") as csvfile:
        reader = csv.DictReader(csvfile, skipinitialspace=True)
        try:
            coordinates, has_labels = _coordinate_columns(reader.fieldnames)
            for row in reader:
                line = reader.line_num
                if None in row or any(row.get(name) is None for name in coordinates):
                    raise DimensionMismatch(
                        f"line {line}: expected {len(coordinates)} coordinates"
                        + (" and a label" if has_labels else "")
                    )
                points.append([_parse_float(row[name], line, name) for name in coordinates])
                label = row.get("y") if has_labels else None
                if label is not None and label.strip() != "":
                    labeled_idx.append(len(points) - 1)
                    labels.append(_parse_float(label, line, "y"))
        except UnicodeDecodeError as error:
            raise ParseError(f"not valid UTF-8: {error.reason}", line) from None

    if not points:
        raise EmptyCloud(f"{path} holds no data rows")
    logger.info("Read {}: N={}, d={}, n={}", path, len(points), len(coordinates), len(labels))
    return PointCloud.from_raw(np.array(points), np.array(labeled_idx, dtype=np.int64), np.array(labels))


def export_csv(cloud, path):
    """Write a cloud in the ingest format with raw (de-normalized) labels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = {int(i): float(v) for i, v in zip(cloud.labeled_idx, cloud.raw_labels)}
    with open(path, "w", encoding="utf-8", newline="") as csvfile:
        writer = csv.writer(csvfile)
        writer.writerow([f"x{i + 1}" for i in range(cloud.d)] + ["y"])
        for i, point in enumerate(cloud.points):
            label = repr(labels[i]) if i in labels else ""
            writer.writerow([repr(float(v)) for v in point] + [label])
    return path
