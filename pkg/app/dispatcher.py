import argparse
import logging
import sys
import time

from config import ConfigError
from repository.checkpoint_repository import CheckpointError
from repository.dataset_repository import DatasetError
from service.analysis_service import AnalysisError
from service.model import ModelConfigError
from service.patching import PatchingError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

USAGE_ERRORS = (ConfigError, FileNotFoundError, DatasetError, PatchingError, ModelConfigError, CheckpointError,
                AnalysisError)


class UsageError(ValueError):
    """Raised by handlers for invalid command arguments (for example an input of the wrong length)."""


class Command:
    """
    A parsed command line: the command name (with subcommand, e.g. 'analyze sweep') and its arguments.
    """
    def __init__(self, args):
        """
        Initializes a Command from an argparse namespace.

        Args:
            args (argparse.Namespace): Parsed arguments with `command` and optional `action`.
        """
        self.args = args
        action = getattr(args, 'action', None)
        self.name = f"{args.command} {action}" if action else args.command

    def __repr__(self):
        return f"<Command name='{self.name}'>"


class CommandDispatcher:
    """
    Routes parsed commands to handlers and maps their outcome to an exit code.
    """
    def __init__(self, context=None):
        """
        Initializes the CommandDispatcher.

        Args:
            context (dict, optional): Context dictionary shared with every handler.
        """
        self.command_handlers = {}
        self.context = context if context is not None else {}
        self.context['dispatcher'] = self

    def register_command_handler(self, command, handler):
        """
        Registers a handler for a command name (e.g. 'train' or 'analyze nmi').

        Args:
            command (str): The command string.
            handler (callable): Called as handler(command, context); returns nothing.
        """
        self.command_handlers[command] = handler

    def dispatch(self, args):
        """
        Runs the handler for `args` and returns the process exit code.

        Args:
            args (argparse.Namespace): Parsed command line.

        Returns:
            int: 0 on success, 2 for usage or configuration errors, 1 for anything else.
        """
        command = Command(args)
        handler = self.command_handlers.get(command.name)
        if handler is None:
            self._report(f"unknown command '{command.name}'")
            return EXIT_USAGE

        logger.info(f"Dispatching {command.name}")
        try:
            start_time = time.perf_counter()
            handler(command, self.context)
            duration = time.perf_counter() - start_time
            logger.info(f"Handler {handler.__name__} - execution took {duration:.6f} seconds.")
            return EXIT_OK
        except (UsageError, argparse.ArgumentTypeError, *USAGE_ERRORS) as e:
            logger.error(f"Invalid input for '{command.name}': {e}", exc_info=True)
            self._report(e)
            return EXIT_USAGE
        except Exception as e:
            logger.error(f"Error in command handler '{command.name}': {e}", exc_info=True)
            self._report(e)
            return EXIT_RUNTIME

    @staticmethod
    def _report(cause):
        print(f"error: {cause}", file=sys.stderr)
