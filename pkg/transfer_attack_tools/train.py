"""
Trains one model of the zoo and stores it as ``<arch>_s<seed>.mzw`` in the model directory.
"""

import logging
import os

from transfer_attack_tools import config
from transfer_attack_tools.utils.data import load_dataset
from transfer_attack_tools.utils.errors import UsageError
from transfer_attack_tools.utils.model_zoo import ARCHITECTURES, build_model, save_weights, train, weight_path

METRICS_FILE = "train_metrics.csv"
METRICS_HEADER = "arch,seed,epochs,test_acc"

logger = logging.getLogger()


def build_parser(parent_parser):
    """
    Builds the parser for this script. This is executed by the main CLI dynamically.

    :param parent_parser: The subparsers object from argparse.
    """
    subparser = parent_parser.add_parser("train", help="Train a model of the zoo on CIFAR-10 or MNIST.")
    subparser.add_argument("--arch", dest="arch", help=f"Architecture: {', '.join(ARCHITECTURES)}.")
    subparser.add_argument("--data", dest="data_dir", help="Dataset directory.")
    subparser.add_argument("--dataset", dest="dataset", help="cifar10 or mnist.")
    subparser.add_argument("--out", dest="model_dir", help="Directory the weight file is written to.")
    subparser.add_argument("--seed", dest="seed", type=int, help="Seeds initialization and data order.")
    subparser.add_argument("--epochs", dest="epochs", type=int, help="Number of epochs.")
    subparser.add_argument("--batch-size", dest="batch_size", type=int, help="Mini-batch size.")
    subparser.add_argument("--lr", dest="lr", type=float, help="Initial learning rate.")
    config.add_run_arguments(
        subparser,
        ["arch", "dataset", "data_dir", "model_dir", "seed", "epochs", "batch_size", "lr", "lr_decay_epochs",
         "lr_decay_factor", "momentum", "weight_decay", "flip"],
    )
    subparser.set_defaults(func=main_cli)


def append_metrics(model_dir: str, line: str) -> None:
    """
    Appends one ``arch,seed,epochs,test_acc`` line, writing the header if the file is new.
    """
    path = os.path.join(model_dir, METRICS_FILE)
    is_new = not os.path.isfile(path)
    with open(path, "at", encoding="UTF-8") as metrics_fp:
        if is_new:
            metrics_fp.write(METRICS_HEADER + "\n")
        metrics_fp.write(line + "\n")


def main(run: config.RunConfig) -> str:
    """
    Main routine executes the non-CLI related logic.

    :param run: The resolved run configuration.
    :return: The path of the written weight file.
    """
    if run.arch not in ARCHITECTURES:
        raise UsageError(f"Unknown architecture {run.arch!r}, valid: {', '.join(ARCHITECTURES)}")
    train_set, test_set = load_dataset(run.dataset, run.data_dir)
    model = build_model(
        run.arch, num_classes=train_set.num_classes, seed=run.seed, in_channels=train_set.image_shape[0]
    )
    logger.info("Training %s (%d parameters) on %d images", run.arch, model.parameter_count(), len(train_set))
    model, metrics = train(model, train_set, test_set, config.train_config(run))
    os.makedirs(run.model_dir, exist_ok=True)
    path = weight_path(run.model_dir, run.arch, run.seed)
    save_weights(model, path)
    run.write(run.model_dir, f"{run.arch}_s{run.seed}.conf")
    line = f"{run.arch},{run.seed},{metrics['epochs']},{metrics['test_acc']:.4f}"
    append_metrics(run.model_dir, line)
    print(line)
    return path


def main_cli(args):
    """
    Main routine that executes the script

    :param args: Argparse Namespace that has all the arguments
    """
    main(config.RunConfig.resolve(args.config_file, config.overrides_from_args(args)))
