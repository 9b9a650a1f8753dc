"""
Runs the targeted attack from one source model over the evaluation sample and evaluates the adversarial images on a
list of target models.

Outputs in the output directory:

- ``report.csv``: one row per target model per checkpoint.
- ``trajectory.csv``: per image and iteration loss, input-gradient L1 norm, target logit, probability and rank.
- ``adv_ckpt<i>.npy``: the adversarial images ``[N,C,H,W]`` at checkpoint ``i``.
- ``eval_images.csv``: dataset index, clean class and target class of every evaluation image.
- ``run.conf``: the resolved run configuration.
"""

import argparse
import logging
import os

import numpy as np

from transfer_attack_tools import config
from transfer_attack_tools.utils.data import load_dataset
from transfer_attack_tools.utils.evaluation import (
    SampleRow,
    TrajectoryRow,
    TransferReport,
    attack_sample,
    check_accuracy_gate,
    evaluate_transfer,
    sample_rows,
    select_evaluation_images,
    trajectory_rows,
    write_rows,
)
from transfer_attack_tools.utils.model_zoo import load_zoo

logger = logging.getLogger()


def add_attack_arguments(subparser) -> None:
    """
    Flags shared by ``attack`` and ``suite``; every flag maps to the run configuration key named by its ``dest``.
    """
    # pylint: disable=R0801
    subparser.add_argument("--data", dest="data_dir", help="Dataset directory.")
    subparser.add_argument("--dataset", dest="dataset", help="cifar10 or mnist.")
    subparser.add_argument("--models", dest="model_dir", help="Directory with the trained weight files.")
    subparser.add_argument("--out", dest="out_dir", help="Output directory.")
    subparser.add_argument("--loss", dest="loss", help="ce, logit, po_trip or cw.")
    subparser.add_argument("--mi", dest="use_mi", action=argparse.BooleanOptionalAction, help="Momentum.")
    subparser.add_argument("--ti", dest="use_ti", action=argparse.BooleanOptionalAction, help="Gradient smoothing.")
    subparser.add_argument("--di", dest="use_di", action=argparse.BooleanOptionalAction, help="Diverse inputs.")
    subparser.add_argument("--iters", dest="iterations", type=int, help="Attack iterations.")
    subparser.add_argument("--eps", dest="epsilon", type=float, help="Perturbation bound in 1/255 units.")
    subparser.add_argument("--alpha", dest="alpha", type=float, help="Step size in 1/255 units.")
    subparser.add_argument("--norm", dest="norm", help="linf or l2.")
    subparser.add_argument(
        "--unbounded", dest="unbounded", action=argparse.BooleanOptionalAction, help="Skip the epsilon ball."
    )
    subparser.add_argument("--lambda", dest="po_trip_lambda", type=float, help="Po+Trip triplet weight.")
    subparser.add_argument("--gamma", dest="triplet_margin", type=float, help="Po+Trip triplet margin.")
    subparser.add_argument("--cw-k", dest="cw_confidence", type=float, help="C&W confidence K.")
    subparser.add_argument("--seed", dest="seed", type=int, help="Seeds targets and attack randomness.")
    subparser.add_argument("--n-images", dest="n_images", type=int, help="Evaluation images.")
    subparser.add_argument("--jobs", dest="jobs", type=int, help="Worker threads.")


def build_parser(parent_parser):
    """
    Builds the parser for this script. This is executed by the main CLI dynamically.

    :param parent_parser: The subparsers object from argparse.
    """
    subparser = parent_parser.add_parser("attack", help="Attack one source model and evaluate transfer.")
    subparser.add_argument("--source", dest="source", help="Architecture id of the source model.")
    subparser.add_argument("--targets", dest="targets", help="Comma separated architecture ids of the targets.")
    add_attack_arguments(subparser)
    config.add_run_arguments(subparser, config.RUN_KEYS)
    subparser.set_defaults(func=main_cli)


def main(run: config.RunConfig) -> TransferReport:
    """
    Main routine executes the non-CLI related logic.

    :param run: The resolved run configuration.
    :return: The transfer report that was written to ``report.csv``.
    """
    attack_cfg = config.attack_config(run)
    eval_cfg = config.evaluation_config(run)
    attack_cfg.validate()
    eval_cfg.validate()
    _, test_set = load_dataset(run.dataset, run.data_dir)
    source = load_zoo(run.model_dir, [run.source], run.model_seed)[0]
    targets = load_zoo(run.model_dir, run.targets, run.model_seed)
    check_accuracy_gate([source] + targets, test_set, eval_cfg)

    sample = select_evaluation_images([source], test_set, eval_cfg)
    logger.info("Attacking %s on %d images (%s, %s)", source.name, len(sample), attack_cfg.loss.label, attack_cfg.methods)
    result = attack_sample([source], sample, attack_cfg, eval_cfg)
    report = TransferReport()
    for target in targets:
        report.extend(evaluate_transfer(source.name, target, sample, result, attack_cfg))

    os.makedirs(run.out_dir, exist_ok=True)
    report.to_csv(os.path.join(run.out_dir, "report.csv"))
    write_rows(os.path.join(run.out_dir, "trajectory.csv"), TrajectoryRow._fields, trajectory_rows(result, sample))
    write_rows(os.path.join(run.out_dir, "eval_images.csv"), SampleRow._fields, sample_rows(sample))
    for checkpoint, images in result.snapshots.items():
        np.save(os.path.join(run.out_dir, f"adv_ckpt{checkpoint}.npy"), images)
    run.write(run.out_dir)
    logger.info("Results written to %s", run.out_dir)
    return report


def main_cli(args):
    """
    Main routine that executes the script

    :param args: Argparse Namespace that has all the arguments
    """
    main(config.RunConfig.resolve(args.config_file, config.overrides_from_args(args)))
