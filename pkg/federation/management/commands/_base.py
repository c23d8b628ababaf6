import json
import logging
import sys
from typing import Any, Dict, List, Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from federation.config import ExperimentConfig, build_config, merged_document
from lorafed.exceptions import EXIT_RUNTIME, EXIT_USAGE, LoraFedError

VERBOSITY_LEVELS = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG, 3: logging.DEBUG}


def parse_assignment(text: str) -> Dict[str, Any]:
    """``section.field=value``; the value is JSON, or a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise CommandError(f"--set expects KEY=VALUE, got {text!r}", returncode=EXIT_USAGE)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key.strip(): value}


class ExperimentCommand(BaseCommand):
    """Shared config flags, logging verbosity and exit codes."""

    requires_system_checks = []  # type: List[str]

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)

        def error(message):
            # usage errors exit 1, not argparse's 2
            if parser.called_from_command_line:
                parser.print_usage(sys.stderr)
                parser.exit(EXIT_USAGE, f"{parser.prog}: error: {message}\n")
            raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)

        parser.error = error
        return parser

    def add_config_arguments(self, parser):
        parser.add_argument("--config", help="JSON experiment config file")
        parser.add_argument(
            "--set",
            dest="assignments",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override one config field, e.g. --set training.rounds=50",
        )
        parser.add_argument("--seed", type=int)
        parser.add_argument("--out-dir", dest="out_dir")
        parser.add_argument("--rounds", type=int)
        parser.add_argument("--clients", type=int)
        parser.add_argument("--strategy")

    def cli_overrides(self, options: Dict) -> Dict[str, Any]:
        """``--set`` assignments, then the dedicated flags on top."""
        overrides = {}  # type: Dict[str, Any]
        for text in options.get("assignments") or []:
            overrides.update(parse_assignment(text))
        shortcuts = {
            "seed": options.get("seed"),
            "out_dir": options.get("out_dir"),
            "training.rounds": options.get("rounds"),
            "partition.clients": options.get("clients"),
            "strategy.name": options.get("strategy"),
        }
        overrides.update({k: v for k, v in shortcuts.items() if v is not None})
        return overrides

    def config_document(self, options: Dict, document: Optional[Dict] = None) -> Dict:
        """Defaults, the --config file, ``document``, then command-line overrides."""
        return merged_document(options.get("config"), self.cli_overrides(options), document)

    def load_config(self, options: Dict) -> ExperimentConfig:
        return build_config(self.config_document(options))

    def configure_logging(self, verbosity: int):
        level = VERBOSITY_LEVELS.get(verbosity, logging.DEBUG)
        for name in settings.LOGGING.get("loggers", {}):
            logging.getLogger(name).setLevel(level)

    def execute(self, *args, **options):
        self.configure_logging(options.get("verbosity", 1))
        try:
            return super().execute(*args, **options)
        except CommandError:
            raise
        except LoraFedError as e:
            raise CommandError(str(e), returncode=e.exit_code) from e
        except Exception as e:  # pylint: disable=broad-except
            if options.get("traceback"):
                raise
            raise CommandError(f"{type(e).__name__}: {e}", returncode=EXIT_RUNTIME) from e
