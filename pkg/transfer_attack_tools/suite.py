"""
Experiment suites. Each suite writes ``<out_dir>/<suite>/<suite>.csv`` and the resolved ``run.conf``.

- ``single``: every ordered source/target pair of the zoo, per loss and checkpoint.
- ``ensemble-hard``: each model held out in turn, the other architectures form the source ensemble.
- ``ensemble-easy``: like ``ensemble-hard`` with a second-seed sibling of the held-out architecture in the ensemble.
- ``ranksweep``: targets taken at given ranks of the source's clean prediction.
- ``stepsweep``: step sizes ``alphas``, plus ``stepsweep_spread.csv``.
- ``trends``: white-box loss, gradient and target-logit trends for all four losses.
- ``uap``: data-free targeted universal perturbations per model, loss and target class.
- ``cwsweep``: C&W transfer from ``source`` over the confidences ``cw_confidences``.
- ``unbounded``: single-model transfer without the epsilon ball, gaussian start and no momentum.
"""

import logging
import os

from transfer_attack_tools import config
from transfer_attack_tools.attack import add_attack_arguments
from transfer_attack_tools.utils.data import load_dataset
from transfer_attack_tools.utils.errors import UsageError
from transfer_attack_tools.utils.evaluation import (
    SpreadRow,
    TrendRow,
    run_ensemble_transfer,
    run_rank_sweep,
    run_single_transfer,
    run_source_transfer,
    run_stepsize_sweep,
    run_trend_analysis,
    write_rows,
)
from transfer_attack_tools.utils.losses import LOSS_KINDS
from transfer_attack_tools.utils.model_zoo import load_zoo
from transfer_attack_tools.utils.uap import run_uap_suite

SUITES = (
    "single",
    "ensemble-easy",
    "ensemble-hard",
    "ranksweep",
    "stepsweep",
    "trends",
    "uap",
    "cwsweep",
    "unbounded",
)

logger = logging.getLogger()


def build_parser(parent_parser):
    """
    Builds the parser for this script. This is executed by the main CLI dynamically.

    :param parent_parser: The subparsers object from argparse.
    """
    subparser = parent_parser.add_parser("suite", help="Run an experiment suite over the trained model zoo.")
    subparser.add_argument("suite", metavar="suite", choices=SUITES, help=f"One of: {', '.join(SUITES)}.")
    subparser.add_argument("--losses", dest="losses", help="Comma separated losses.")
    subparser.add_argument("--source", dest="source", help="Source architecture of pair suites.")
    subparser.add_argument("--targets", dest="targets", help="Target architectures of pair suites.")
    subparser.add_argument("--ranks", dest="ranks", help="Comma separated target ranks (ranksweep).")
    subparser.add_argument("--alphas", dest="alphas", help="Comma separated step sizes in 1/255 units (stepsweep).")
    subparser.add_argument(
        "--include-whitebox",
        dest="include_whitebox",
        action="store_true",
        default=None,
        help="Add source == target cells to the single suite.",
    )
    add_attack_arguments(subparser)
    config.add_run_arguments(subparser, config.RUN_KEYS)
    subparser.set_defaults(func=main_cli)


def _pick(models, arch_id: str):
    for model in models:
        if model.arch_id == arch_id:
            return model
    raise UsageError(f"{arch_id} is not part of archs ({', '.join(model.arch_id for model in models)})")


def main(run: config.RunConfig, suite: str) -> str:
    """
    Main routine executes the non-CLI related logic.

    :param run: The resolved run configuration.
    :param suite: One of ``SUITES``.
    :return: Path of the suite's CSV file.
    """
    if suite not in SUITES:
        raise UsageError(f"Unknown suite {suite!r}, valid: {', '.join(SUITES)}")
    out_dir = os.path.join(run.out_dir, suite)
    attack_cfg = config.attack_config(run)
    eval_cfg = config.evaluation_config(run)
    losses = [config.loss_spec(run, kind) for kind in run.losses]
    _, test_set = load_dataset(run.dataset, run.data_dir)
    models = load_zoo(run.model_dir, run.archs, run.model_seed)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{suite}.csv")
    logger.info("Running suite %s with %d models", suite, len(models))

    if suite == "single":
        report = run_single_transfer(models, test_set, attack_cfg, eval_cfg, losses)
    elif suite == "ensemble-hard":
        report = run_ensemble_transfer(models, test_set, attack_cfg, eval_cfg, "hard", losses=losses)
    elif suite == "ensemble-easy":
        siblings = load_zoo(run.model_dir, run.archs, run.sibling_seed, suffix=f"_s{run.sibling_seed}")
        by_holdout = {model.name: sibling for model, sibling in zip(models, siblings)}
        report = run_ensemble_transfer(models, test_set, attack_cfg, eval_cfg, "easy", by_holdout, losses)
    elif suite == "ranksweep":
        source, target = _pick(models, run.source), _pick(models, run.targets[0])
        report = run_rank_sweep(source, target, test_set, run.ranks, attack_cfg, eval_cfg, losses)
    elif suite == "stepsweep":
        source, target = _pick(models, run.source), _pick(models, run.targets[0])
        alphas = [alpha / 255 for alpha in run.alphas]
        report, spreads = run_stepsize_sweep(source, target, test_set, alphas, attack_cfg, eval_cfg, losses)
        write_rows(os.path.join(out_dir, "stepsweep_spread.csv"), SpreadRow._fields, spreads)
    elif suite == "trends":
        trend_losses = [config.loss_spec(run, kind) for kind in LOSS_KINDS]
        trend_cfg = config.evaluation_config(run, n_images=run.trend_images)
        rows = run_trend_analysis(_pick(models, run.source), test_set, trend_losses, attack_cfg, trend_cfg)
        write_rows(csv_path, TrendRow._fields, rows)
        report = None
    elif suite == "uap":
        report = run_uap_suite(models, test_set, losses, attack_cfg, eval_cfg, out_dir=out_dir)
    elif suite == "cwsweep":
        source = _pick(models, run.source)
        targets = [model for model in models if model is not source]
        cw_losses = [config.loss_spec(run, "cw", confidence) for confidence in run.cw_confidences]
        report = run_source_transfer(source, targets, test_set, attack_cfg, eval_cfg, cw_losses)
    else:
        unbounded_cfg = config.attack_config(run, unbounded=True, init="gaussian", use_mi=False)
        report = run_single_transfer(models, test_set, unbounded_cfg, eval_cfg, losses)

    if report is not None:
        report.to_csv(csv_path)
    run.write(out_dir)
    logger.info("Suite %s written to %s", suite, csv_path)
    return csv_path


def main_cli(args):
    """
    Main routine that executes the script

    :param args: Argparse Namespace that has all the arguments
    """
    main(config.RunConfig.resolve(args.config_file, config.overrides_from_args(args)), args.suite)
