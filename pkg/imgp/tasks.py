import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from loguru import logger

from imgp.domain.experiment import run_experiment
from imgp.errors import ConfigError
from imgp.models import AblationAxis, ModelKind
from imgp.settings import Config, worker_count

ABLATION_COLUMNS = ("axis", "value", "model", "rmse", "nll", "runtime_seconds", "error")


@dataclass
class AblationRow:
    axis: str
    value: float
    model: str
    rmse: float | None = None
    nll: float | None = None
    runtime_seconds: float = 0.0
    error: str | None = None

    def as_row(self):
        return [self.axis, self.value, self.model, self.rmse, self.nll, self.runtime_seconds, self.error or ""]


def _grid_config(config, axis, value, model, out_dir):
    match axis:
        case AblationAxis.eigenpairs:
            changes = {"L": int(value)}
        case AblationAxis.labeled_fraction:
            changes = {"labeled_fraction": float(value), "n_labeled": None}
        case AblationAxis.noise:
            changes = {"beta": float(value)}
    return config.replace(model=model, out=str(out_dir / f"{axis}-{value}" / str(model)), **changes)


# ============================================================
# Grid point: one experiment, failures recorded
# ============================================================
def run_grid_point(config, axis, value, model, out_dir):
    started = time.perf_counter()
    row = AblationRow(axis=str(axis), value=value, model=str(model))
    try:
        report = run_experiment(_grid_config(config, axis, value, model, out_dir))
        row.rmse, row.nll = report.rmse, report.nll
    except Exception as error:
        row.error = f"{type(error).__name__}: {error}"
        logger.error("{}={} {} failed: {}", axis, value, model, row.error)
    row.runtime_seconds = time.perf_counter() - started
    return row


# ============================================================
# Ablation: fan the grid out over worker threads
# ============================================================
def ablate(config, axis, grid, models=None, out=None, threads=None):
    """
    Rerun the experiment for every grid value (and every model in `models`,
    default the configured one) with the data seed held fixed. Writes
    ablation.csv with one row per run and returns the rows in grid order.
    """
    axis = AblationAxis(axis)
    grid = list(grid)
    if not grid:
        raise ConfigError("ablation grid is empty")
    models = [ModelKind(m) for m in (models or [config.model])]
    out_dir = Path(out or config.out or Path(Config.OUTPUT_FOLDER) / f"ablate-{axis}")

    jobs = [(value, model) for value in grid for model in models]
    logger.info("Ablating {} over {} ({} runs)", axis, grid, len(jobs))
    workers = worker_count(threads if threads is not None else len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda job: run_grid_point(config, axis, job[0], job[1], out_dir), jobs))
    else:
        rows = [run_grid_point(config, axis, value, model, out_dir) for value, model in jobs]

    write_ablation_table(out_dir / "ablation.csv", rows)
    return rows


def write_ablation_table(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as csvfile:
        writer = csv.writer(csvfile)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow(row.as_row())
    logger.info("Wrote {} ablation rows to {}", len(rows), path)
    return path
