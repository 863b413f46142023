from typing import Any

from PartAlign.environment import COLOR_VARIABLE, get_boolean_from_env

AVAILABLE_COLORS: dict[str, str] = {
    "white": "\033[97m",
    "green": "\033[92m",
    "red": "\033[91m",
    "blue": "\033[94m",
    "yellow": "\033[93m",
    "magenta": "\033[95m",
    "cyan": "\033[96m",
}
END_OF_COLORED_PART: str = "\033[00m"


def colorize(message: Any, color: str = "white") -> str:
    """
    Wrap ``message`` in the escape codes of ``color``.

    Returns the plain text when PARTALIGN_COLOR is false.

    Raises:
        ValueError: If an invalid color is provided.
    """
    if color not in AVAILABLE_COLORS:
        raise ValueError(f"Invalid color: {color}. Available colors: {list(AVAILABLE_COLORS)}")
    if not get_boolean_from_env(COLOR_VARIABLE, True):
        return str(message)
    return f"{AVAILABLE_COLORS[color]}{message}{END_OF_COLORED_PART}"


def print_in_color(message: Any, color: str = "white") -> None:
    """
    Prints the given message in the specified color.
    Args:
        message (str): The message to be printed.
        color (str, optional): The color in which the message should be printed. Defaults to "white".
            Available colors: "white", "green", "red", "blue", "yellow", "magenta", "cyan".
    Raises:
        ValueError: If an invalid color is provided.
    """
    print(colorize(message, color))


def status_color(passed: bool) -> str:
    return "green" if passed else "red"


def delta_color(delta: float) -> str:
    if delta > 0:
        return "green"
    if delta < 0:
        return "red"
    return "white"
