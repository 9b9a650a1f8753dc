"""
Configuration related package.

Two kinds of configuration live here:

- The module list (JSON) that decides which subcommands the CLI loads.
- The run configuration: line-oriented ``key = value`` text describing one training, attack or suite run. Values are
  YAML scalars or flow lists, ``#`` starts a comment. The built-in defaults ship as ``run-defaults.conf``.
"""

import json
import logging
import os
import traceback
from typing import Any, Dict, Iterable, List, Optional

import yaml
from importlib_resources import files

from transfer_attack_tools.utils.errors import UsageError

CONFIG_LOCATIONS = [
    "/etc/transfer-attack-tools.json",
    "$XDG_CONFIG_HOME/transfer-attack-tools.json",
    "$TRANSFER_ATTACK_TOOLS_FILE",
]

logger = logging.getLogger()


def load_modules() -> List[str]:
    """
    Method that loads all modules from the config and returns them to the application.
    """
    module_list = []
    config_found = False
    for location in CONFIG_LOCATIONS:
        if "$" in location:
            real_location = os.path.expandvars(location)
        else:
            real_location = location
        if os.path.isfile(real_location):
            module_list = load_config(real_location)
            config_found = True
        else:
            logger.debug('"%s" was skipped.', real_location)
    if not config_found:
        backup_config_path = str(files("transfer_attack_tools.config").joinpath("transfer-attack-tools.json"))
        module_list = load_config(backup_config_path)
        logger.debug("Built-In Configuration was used!")
    return module_list


def load_config(path: str) -> List[str]:
    """
    Loads the JSON config file.

    :param path: This path is excepted to exist. It should be the absolute path to the config file.
    :return: The list of modules that should be loaded.
    """
    with open(path, "rt", encoding="UTF-8") as json_fp:
        try:
            json_dict = json.load(json_fp)
            logger.debug('JSON config loaded from "%s".', path)
            return json_dict.get("modules")
        except json.JSONDecodeError:
            logger.debug("JSON syntax error! Fix syntax to load modules.")
            traceback.print_exc()
            return []


# Declared type of every run configuration key. Lists are written as YAML flow lists or comma separated values.
RUN_KEYS: Dict[str, str] = {
    # data and artifacts
    "dataset": "str",
    "data_dir": "str",
    "model_dir": "str",
    "out_dir": "str",
    "archs": "str_list",
    "model_seed": "int",
    "sibling_seed": "int",
    # training
    "arch": "str",
    "epochs": "int",
    "batch_size": "int",
    "lr": "float",
    "lr_decay_epochs": "int_list",
    "lr_decay_factor": "float",
    "momentum": "float",
    "weight_decay": "float",
    "flip": "bool",
    # losses
    "loss": "str",
    "losses": "str_list",
    "cw_confidence": "float",
    "cw_confidences": "float_list",
    "po_trip_lambda": "float",
    "triplet_margin": "float",
    "xi": "float",
    # attack, epsilon and step sizes in 1/255 units
    "epsilon": "float",
    "alpha": "float",
    "alphas": "float_list",
    "iterations": "int",
    "checkpoints": "int_list",
    "use_mi": "bool",
    "mi_decay": "float",
    "use_ti": "bool",
    "ti_kernel": "int",
    "use_di": "bool",
    "di_prob": "float",
    "di_resize_band": "int_list",
    "norm": "str",
    "unbounded": "bool",
    "init": "str",
    "init_sigma": "float",
    "seed": "int",
    # experiments
    "source": "str",
    "targets": "str_list",
    "n_images": "int",
    "trend_images": "int",
    "ranks": "int_list",
    "jobs": "int",
    "chunk_size": "int",
    "min_accuracy": "float",
    "gate_images": "int",
    "include_whitebox": "bool",
}

_SCALARS = {"int": int, "float": float, "str": str}


def _coerce_scalar(key: str, value: Any, kind: str) -> Any:
    if kind == "bool":
        if isinstance(value, bool):
            return value
        raise UsageError(f"{key} expects true or false, got {value!r}")
    if kind == "str":
        return "" if value is None else str(value)
    if isinstance(value, str):
        # YAML 1.1 reads exponent notation without a dot ("1e-05") as a string
        try:
            value = float(value)
        except ValueError as error:
            raise UsageError(f"{key} expects a number, got {value!r}") from error
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise UsageError(f"{key} expects a number, got {value!r}")
    if kind == "int" and float(value) != int(value):
        raise UsageError(f"{key} expects an integer, got {value!r}")
    return _SCALARS[kind](value)


def coerce_value(key: str, value: Any) -> Any:
    """
    Converts a raw value (a string from a file or the command line, or an already typed value) to the declared type
    of ``key``.

    :raises UsageError: Unknown key or a value that does not fit the type.
    """
    if key not in RUN_KEYS:
        raise UsageError(f'Unknown configuration key "{key}"')
    kind = RUN_KEYS[key]
    if kind == "str" and isinstance(value, str):
        return value.strip()
    if isinstance(value, str):
        try:
            value = yaml.safe_load(value) if value.strip() else None
        except yaml.YAMLError as error:
            raise UsageError(f"{key}: cannot parse {value!r}") from error
    if not kind.endswith("_list"):
        return _coerce_scalar(key, value, kind)
    element = kind[: -len("_list")]
    if value is None:
        return []
    if isinstance(value, str):
        value = [yaml.safe_load(part) for part in value.split(",") if part.strip()]
    elif not isinstance(value, (list, tuple)):
        value = [value]
    return [_coerce_scalar(key, item, element) for item in value]


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "[" + ", ".join(_render(item) for item in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_run_config(text: str, origin: str = "<string>") -> Dict[str, Any]:
    """
    Parses ``key = value`` lines.

    :param text: File content.
    :param origin: Name used in error messages.
    :return: The typed values by key.
    """
    values: Dict[str, Any] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f'{origin}:{number}: expected "key = value", got "{raw_line.strip()}"')
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = coerce_value(key, value)
        except UsageError as error:
            raise UsageError(f"{origin}:{number}: {error}") from error
    return values


class RunConfig:
    """
    Fully resolved run configuration. Lookup by attribute or item: ``cfg.epsilon``, ``cfg["epsilon"]``.
    """

    def __init__(self, values: Dict[str, Any]):
        missing = set(RUN_KEYS) - set(values)
        if missing:
            raise UsageError(f"Run configuration lacks: {', '.join(sorted(missing))}")
        self.values = {key: coerce_value(key, value) for key, value in values.items()}

    @classmethod
    def defaults(cls) -> "RunConfig":
        """
        The packaged ``run-defaults.conf``.
        """
        text = files("transfer_attack_tools.config").joinpath("run-defaults.conf").read_text(encoding="UTF-8")
        return cls(parse_run_config(text, "run-defaults.conf"))

    @classmethod
    def resolve(cls, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """
        Built-in defaults, then ``config_file``, then ``overrides`` (command-line flags; ``None`` values skipped).
        """
        run_config = cls.defaults()
        if config_file:
            run_config.update_from_file(config_file)
        run_config.update(overrides or {})
        return run_config

    def update_from_file(self, path: str) -> None:
        if not os.path.isfile(path):
            raise FileNotFoundError(f'Run configuration "{path}" does not exist.')
        with open(path, "rt", encoding="UTF-8") as conf_fp:
            self.update(parse_run_config(conf_fp.read(), path))
        logger.debug('Run configuration loaded from "%s".', path)

    def update(self, overrides: Dict[str, Any]) -> None:
        for key, value in overrides.items():
            if value is not None:
                self.values[key] = coerce_value(key, value)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __getattr__(self, key: str) -> Any:
        try:
            return self.__dict__["values"][key]
        except KeyError as error:
            raise AttributeError(key) from error

    def dumps(self) -> str:
        return "".join(f"{key} = {_render(self.values[key])}\n" for key in sorted(self.values))

    def write(self, directory: str, name: str = "run.conf") -> str:
        """
        Writes every key, sorted, to ``directory/name``; feeding the file back via ``--config`` reproduces the run.
        """
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, name)
        with open(path, "wt", encoding="UTF-8") as conf_fp:
            conf_fp.write(self.dumps())
        return path


def add_run_arguments(parser, keys: Iterable[str]) -> None:
    """
    Adds ``--config`` and the generic ``--set KEY=VALUE`` override to a subcommand parser. ``keys`` only documents
    which keys the subcommand reads.
    """
    parser.add_argument("--config", dest="config_file", help="Run configuration file (key = value lines).")
    parser.add_argument(
        "--set",
        dest="set_values",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help=f"Override any run configuration key. Relevant keys: {', '.join(sorted(keys))}.",
    )


def overrides_from_args(args) -> Dict[str, Any]:
    """
    Collects run configuration values from an argparse namespace: every attribute named like a run key plus the
    ``--set`` pairs, which win.
    """
    overrides = {key: value for key, value in vars(args).items() if key in RUN_KEYS and value is not None}
    for pair in getattr(args, "set_values", []):
        if "=" not in pair:
            raise UsageError(f'--set expects KEY=VALUE, got "{pair}"')
        key, value = (part.strip() for part in pair.split("=", 1))
        overrides[key] = coerce_value(key, value)
    return overrides


def loss_spec(run: RunConfig, kind: Optional[str] = None, cw_confidence: Optional[float] = None):
    """
    :param kind: Loss name, defaults to the ``loss`` key.
    :param cw_confidence: C&W ``K``, defaults to the ``cw_confidence`` key.
    """
    # pylint: disable=C0415
    from transfer_attack_tools.utils.losses import LossSpec

    return LossSpec(
        kind=kind or run.loss,
        cw_confidence=run.cw_confidence if cw_confidence is None else cw_confidence,
        po_trip_lambda=run.po_trip_lambda,
        triplet_margin=run.triplet_margin,
        xi=run.xi,
    )


def attack_config(run: RunConfig, spec=None, **changes):
    """
    The AttackConfig of a run; ``epsilon`` and ``alpha`` are converted from 1/255 to [0,1] units. Checkpoints beyond
    ``iterations`` are dropped and ``iterations`` itself is always a checkpoint.

    :param spec: LossSpec to use instead of the one described by the run keys.
    :param changes: Run keys to replace before building, e.g. ``unbounded=True``.
    """
    # pylint: disable=C0415
    from transfer_attack_tools.utils.attack_engine import AttackConfig

    values = dict(run.values)
    values.update(changes)
    band = values["di_resize_band"]
    if band and len(band) != 2:
        raise UsageError(f"di_resize_band needs two values, got {band}")
    iterations = values["iterations"]
    return AttackConfig(
        loss=spec or loss_spec(run),
        epsilon=values["epsilon"] / 255,
        alpha=values["alpha"] / 255,
        iterations=iterations,
        checkpoints=tuple(sorted({c for c in values["checkpoints"] if c <= iterations} | {iterations})),
        use_mi=values["use_mi"],
        mi_decay=values["mi_decay"],
        use_ti=values["use_ti"],
        ti_kernel=values["ti_kernel"],
        use_di=values["use_di"],
        di_prob=values["di_prob"],
        di_resize_band=tuple(band) if band else None,
        norm=values["norm"],
        unbounded=values["unbounded"],
        init=None if values["init"] == "auto" else values["init"],
        init_sigma=values["init_sigma"],
        seed=values["seed"],
    )


def train_config(run: RunConfig):
    # pylint: disable=C0415
    from transfer_attack_tools.utils.model_zoo import TrainConfig

    return TrainConfig(
        epochs=run.epochs,
        batch_size=run.batch_size,
        lr=run.lr,
        lr_decay_epochs=tuple(run.lr_decay_epochs),
        lr_decay_factor=run.lr_decay_factor,
        momentum=run.momentum,
        weight_decay=run.weight_decay,
        seed=run.seed,
        flip=run.flip,
    )


def evaluation_config(run: RunConfig, n_images: Optional[int] = None):
    """
    :param n_images: Replaces the ``n_images`` key, e.g. with ``trend_images`` for trend runs.
    """
    # pylint: disable=C0415
    from transfer_attack_tools.utils.evaluation import EvaluationConfig

    return EvaluationConfig(
        n_images=run.n_images if n_images is None else n_images,
        seed=run.seed,
        jobs=run.jobs,
        chunk_size=run.chunk_size,
        min_accuracy=run.min_accuracy,
        gate_images=run.gate_images,
        include_whitebox=run.include_whitebox,
    )
