import argparse
import json
import sys
from pathlib import Path

from loguru import logger

from imgp.constants import EXIT_CONFIG_ERROR, EXIT_IO_ERROR, EXIT_NUMERICAL_FAILURE, EXIT_OK
from imgp.domain.datasets import export_csv, gen_circle, gen_dumbbell
from imgp.domain.experiment import run_experiment
from imgp.errors import ConfigError, ImgpError
from imgp.models import AblationAxis, ExperimentConfig, ModelKind
from imgp.services.utils import allowed_file, is_config_file
from imgp.settings import Config
from imgp.tasks import ablate

# flag -> (section, key, type); section None means the top level of the config
FLAG_FIELDS = {
    "nu": (None, "nu", int),
    "knn": (None, "K", int),
    "eigenpairs": (None, "L", int),
    "beta": (None, "beta", float),
    "seed": (None, "seed", int),
    "model": (None, "model", str),
    "tau": (None, "tau", float),
    "out": (None, "out", str),
    "csv": (None, "csv_path", str),
    "points": (None, "n_points", int),
    "eigensolver": (None, "eigensolver", str),
    "iters": ("train", "iters", int),
    "lr": ("train", "learning_rate", float),
    "restarts": ("train", "restarts", int),
}


def configure_logging(level=None):
    logger.remove()
    logger.add(sys.stderr, level=level or Config.LOG_LEVEL)


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _add_experiment_flags(parser):
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--nu", type=int, help="graph Matern smoothness (positive integer)")
    parser.add_argument("--knn", type=int, help="number of nearest neighbors K")
    parser.add_argument("--eigenpairs", type=int, help="number of eigenpairs L")
    parser.add_argument("--iters", type=int, help="optimizer iterations")
    parser.add_argument("--lr", type=float, help="optimizer learning rate")
    parser.add_argument("--restarts", type=int, help="optimizer restarts")
    parser.add_argument("--beta", type=float, help="input and output noise level")
    parser.add_argument(
        "--labeled", type=float, help="labeled points: a count, or a fraction when below 1"
    )
    parser.add_argument("--points", type=int, help="generated cloud size N")
    parser.add_argument("--seed", type=int, help="seed for data and optimizer")
    parser.add_argument("--model", choices=[str(m) for m in ModelKind])
    parser.add_argument("--tau", type=float, help="bandwidth prior tail weight in (0, 1)")
    parser.add_argument("--blend", type=_on_off, help="blend with the Euclidean model: on|off")
    parser.add_argument("--eigensolver", choices=["lanczos", "dense"])
    parser.add_argument("--csv", help="input CSV with header x1..xd[,y]")
    parser.add_argument("--out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="imgp", description="Implicit manifold Gaussian process regression"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="fit, predict and evaluate one experiment")
    _add_experiment_flags(run)

    sweep = commands.add_parser("ablate", help="rerun an experiment over a parameter grid")
    _add_experiment_flags(sweep)
    sweep.add_argument("--axis", required=True, choices=[str(a) for a in AblationAxis])
    sweep.add_argument("--grid", required=True, type=_float_list, help="comma separated values")
    sweep.add_argument(
        "--models", help="comma separated models to compare, default the configured one"
    )

    generate = commands.add_parser("generate", help="write a synthetic cloud as CSV")
    generate.add_argument("--generator", choices=["dumbbell", "circle"], default="dumbbell")
    generate.add_argument("--points", type=int, default=1556)
    generate.add_argument("--labeled", type=int, default=10)
    generate.add_argument("--beta", type=float, default=0.0)
    generate.add_argument("--radius", type=float, default=1.0)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--out", required=True, help="CSV file to write")
    return parser


def load_config(args):
    """Config file (if any) with command line flags applied on top."""
    document = {}
    if args.config:
        path = Path(args.config)
        if not is_config_file(path.name):
            raise ConfigError(f"config must be a .json file: {path}")
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as error:
            raise ConfigError(f"{path}: {error}") from error
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: expected a JSON object")

    document = dict(document)
    document["train"] = dict(document.get("train", {}))
    for flag, (section, key, cast) in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = document if section is None else document[section]
        target[key] = cast(value)
    if args.labeled is not None:
        if args.labeled < 1:
            document["labeled_fraction"] = args.labeled
            document["n_labeled"] = None
        else:
            document["n_labeled"] = int(args.labeled)
            document["labeled_fraction"] = None
    if args.blend is not None:
        document["blend"] = args.blend

    try:
        config = ExperimentConfig.from_dict(document)
    except (TypeError, ValueError) as error:
        raise ConfigError(str(error)) from error
    if config.csv_path is not None:
        if not allowed_file(config.csv_path):
            raise ConfigError(f"input must be a .csv file: {config.csv_path}")
        if not Path(config.csv_path).exists():
            raise ConfigError(f"input file not found: {config.csv_path}")
    return config


def _run(args):
    report = run_experiment(load_config(args))
    print(json.dumps({"rmse": report.rmse, "nll": report.nll, "checkpoint": report.checkpoint}))


def _ablate(args):
    config = load_config(args)
    models = args.models.split(",") if args.models else None
    try:
        rows = ablate(config, args.axis, args.grid, models=models)
    except ValueError as error:
        raise ConfigError(str(error)) from error
    for row in rows:
        print(json.dumps(row.__dict__))


def _generate(args):
    if args.generator == "circle":
        cloud = gen_circle(args.points, radius=args.radius, seed=args.seed)
    else:
        cloud = gen_dumbbell(args.points, beta=args.beta, n_labeled=args.labeled, seed=args.seed).cloud
    path = export_csv(cloud, args.out)
    logger.info("Wrote {} points to {}", cloud.N, path)


HANDLERS = {"run": _run, "ablate": _ablate, "generate": _generate}


def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        HANDLERS[args.command](args)
    except ImgpError as error:
        logger.error("{}", error)
        return error.exit_code
    except OSError as error:
        logger.error("I/O error: {}", error)
        return EXIT_IO_ERROR
    except (ValueError, TypeError) as error:
        logger.error("invalid configuration: {}", error)
        return EXIT_CONFIG_ERROR
    except Exception:
        logger.exception("unexpected failure")
        return EXIT_NUMERICAL_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
