# PYTHON_ARGCOMPLETE_OK
"""
This is the wrapper script that specifies the CLI entry point that can load the scripts from a config file.

The config file has the following format: { "modules": [ "module1", "module2" ] }

Valid locations for the configuration file are:

- "/etc/transfer-attack-tools.json"
- "$XDG_CONFIG_HOME/transfer-attack-tools.json"
- "$TRANSFER_ATTACK_TOOLS_FILE"

A module must have a "build_parser" method that takes a single argument. The method is responsible to assign with
"set_default" the func kwarg. The CLI entrypoint is called "main_cli" and has a single arguments that is an argparse
namespace. This should be just a wrapper to the "main" function that has the actual arguments defined.

If no config is supplied the built-in configuration is used.

Example usage of the CLI for development (from git project root):

  > . venv/bin/activate
  > export TRANSFER_ATTACK_TOOLS_FILE="transfer_attack_tools/config/transfer-attack-tools.json"
  > python3 -m transfer_attack_tools.cli -h
"""

import argparse
import importlib
import logging
import sys

import argcomplete  # type: ignore

from transfer_attack_tools import config
from transfer_attack_tools.utils.errors import TransferAttackError

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

logger = logging.getLogger()


def build_main_parser():
    """
    The top-level parser with the global options and an empty set of subcommands.

    :return: The parser and its subparsers object that plugins add their subcommand to.
    """
    parser = argparse.ArgumentParser(
        prog="transfer-attack-tools", formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    parser.add_argument(
        "--log-level",
        dest="log_level",
        choices=LOG_LEVELS,
        default="WARNING",
        help="Verbosity of the log output on stderr.",
    )
    subparsers = parser.add_subparsers(help="Help for the subprograms that this tool offers.")
    return parser, subparsers


def import_plugin(subparsers, name: str):
    """
    This method imports a plugin

    :param subparsers: The subparsers object of the main parser.
    :param name: The name of the module in the "transfer_attack_tools" module.
    """
    plugin = importlib.import_module(f".{name}", package="transfer_attack_tools")
    plugin.build_parser(subparsers)


def main(argv=None):
    """
    The main entrypoint for the library.

    :param argv: Arguments without the program name, defaults to ``sys.argv[1:]``.
    """
    parser, subparsers = build_main_parser()
    import_plugin(subparsers, "version")
    for module in config.load_modules():
        import_plugin(subparsers, module)
    argcomplete.autocomplete(parser)
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    if "func" in vars(args):
        # Run a subprogramm only if the parser detected it correctly.
        try:
            args.func(args)
        except (TransferAttackError, OSError) as error:
            logger.debug("Subcommand failed", exc_info=True)
            print(f"Error: {error}", file=sys.stderr)
            sys.exit(1)
        return
    parser.print_help()
    sys.exit(1)


if __name__ == "__main__":
    main()
