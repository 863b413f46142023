import logging
import os
from pathlib import Path
from typing import Optional

from PartAlign.errors import EnvironmentVariableNotFoundError

logger = logging.getLogger(__name__)

LOG_LEVEL_VARIABLE = "PARTALIGN_LOG_LEVEL"
LOG_DIR_VARIABLE = "PARTALIGN_LOG_DIR"
BENCH_WORKERS_VARIABLE = "PARTALIGN_BENCH_WORKERS"
COLOR_VARIABLE = "PARTALIGN_COLOR"


def get_log_directory(env_variable: str = LOG_DIR_VARIABLE) -> Path | None:
    """
    Retrieve the directory for tool logs (gradcheck, bench, gen-data) from an environment variable.

    Returns None when the variable is not set, in which case only the
    console handler is used. Training runs always log to their own output
    directory and ignore this variable.

    Raises:
        EnvironmentVariableNotFoundError: If the variable is set but the path does not exist.
    """
    log_directory: Optional[str] = os.getenv(key=env_variable)

    if log_directory is None:
        return None
    if not os.path.exists(path=log_directory):
        raise EnvironmentVariableNotFoundError(
            variable_name=env_variable,
            message=f"Environment variable '{env_variable}' points to a missing directory: {log_directory}",
        )
    return Path(log_directory)


def get_integer_from_env(env_variable: str, default_value: int) -> int:
    """
    Retrieve an integer from an environment variable, with a fallback to a default value.

    Unset variables fall back silently; values that are not integers
    fall back with a warning. No exception is raised.
    """
    env_value: Optional[str] = os.getenv(key=env_variable)

    if env_value is None:
        return default_value

    try:
        return int(env_value)
    except ValueError:
        logger.warning(f"{env_variable}='{env_value}' is not a valid integer. Defaulting to {default_value}.")
        return default_value


def get_string_from_env(env_variable: str, default_value: str = "", error_on_missing_value: bool = False) -> str:
    env_value: Optional[str] = os.getenv(key=env_variable)

    if env_value is None:
        if error_on_missing_value:
            raise EnvironmentVariableNotFoundError(variable_name=env_variable)
        return default_value
    return env_value


def get_boolean_from_env(env_variable: str, default_value: bool) -> bool:
    """
    Retrieve a boolean value from an environment variable.

    'true', '1', 'yes' and 'on' (case insensitive) read as True; 'false',
    '0', 'no' and 'off' as False. Anything else falls back to the default
    with a warning.
    """
    env_value: Optional[str] = os.getenv(key=env_variable)

    if env_value is None:
        return default_value

    lower_env_value = env_value.lower()
    if lower_env_value in ('true', '1', 'yes', 'on'):
        return True
    elif lower_env_value in ('false', '0', 'no', 'off'):
        return False
    else:
        logger.warning(f"{env_variable}='{env_value}' is not a valid boolean. Defaulting to {default_value}.")
        return default_value
