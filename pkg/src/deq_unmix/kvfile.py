"""Plain-text ``key = value`` files shared by scene specs and run configs."""

from __future__ import annotations

import configparser
from pathlib import Path

_SECTION = "root"


class KeyValueError(ValueError):
    pass


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` and ``;`` start comments, duplicates are rejected."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.DuplicateOptionError as exc:
        # the injected section header shifts every line by one
        raise KeyValueError(f"line {exc.lineno - 1}: duplicate key {exc.option!r}") from exc
    except configparser.DuplicateSectionError as exc:
        raise KeyValueError("section headers are not allowed") from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0]
        raise KeyValueError(f"line {lineno - 1}: expected 'key = value'") from exc
    except configparser.Error as exc:
        raise KeyValueError(str(exc)) from exc
    if len(parser.sections()) != 1:
        raise KeyValueError("section headers are not allowed")
    return dict(parser[_SECTION])


def read_key_values(path: str | Path) -> dict[str, str]:
    return parse_key_values(Path(path).read_text())


def format_key_values(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
