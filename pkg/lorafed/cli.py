"""``lorafed <subcommand>``: the management commands under hyphenated names."""
import os
import sys
from typing import List, Optional

COMMANDS = {
    "run": "run",
    "partition-inspect": "partition_inspect",
    "list-strategies": "list_strategies",
    "sweep": "sweep",
}

USAGE = "usage: lorafed {%s} [options]\n" % ",".join(COMMANDS)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    import django
    from django.core.management import load_command_class

    from lorafed.exceptions import EXIT_OK, EXIT_USAGE

    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] in ("-h", "--help"):
        sys.stdout.write(USAGE)
        return EXIT_OK
    if not argv or argv[0] not in COMMANDS:
        sys.stderr.write(USAGE)
        if argv:
            sys.stderr.write(f"lorafed: unknown subcommand '{argv[0]}'\n")
        return EXIT_USAGE

    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "lorafed.settings.development")
    django.setup()
    command = load_command_class("federation", COMMANDS[argv[0]])
    try:
        command.run_from_argv(["lorafed", argv[0]] + argv[1:])
    except SystemExit as e:
        if e.code is None:
            return EXIT_OK
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    return EXIT_OK
