"""Ini-file configuration and logging setup.

Settings live as dotted keys under ``[app:main]`` (``e2bows.train.alpha =
0.2``); the same file may carry ``[loggers]``/``[handlers]``/``[formatters]``
sections for ``logging.config.fileConfig``.
"""
import configparser
import logging
import logging.config
import os
import sys
from typing import Any, Optional

from e2bows.errors import ConfigError

APP_SECTION = "app:main"
CONFIG_ENV = "E2BOWS_CONFIG"
LOG_FORMAT = "%(asctime)s %(levelname)-5.5s [%(name)s] %(message)s"

log = logging.getLogger(__name__)


class Config(dict):
    """Flat mapping of dotted keys to raw string values."""

    path: Optional[str] = None

    def get(self, key: str, default: Any = None) -> Any:
        value = super().get(key)
        return default if value in (None, "") else value


def _parser(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(defaults={"here": os.path.dirname(os.path.abspath(path))})
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    except (configparser.Error, UnicodeDecodeError) as e:
        raise ConfigError(f"malformed config file {path}: {e}")
    return parser


def load_config(path=None) -> Config:
    """Read ``[app:main]`` of ``path``; without a path the config is empty."""
    config = Config()
    if path is None:
        return config
    parser = _parser(path)
    if parser.has_section(APP_SECTION):
        for key, value in parser.items(APP_SECTION):
            if key != "here" and not key.startswith("use"):
                config[key] = value.strip()
    config.path = str(path)
    return config


def resolve_config_path(flag: Optional[str]) -> Optional[str]:
    return flag or os.environ.get(CONFIG_ENV) or None


def configure_logging(path=None, verbose: bool = False) -> None:
    if path is not None and _parser(path).has_section("loggers"):
        logging.config.fileConfig(path, disable_existing_loggers=False)
    else:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root = logging.getLogger("e2bows")
        root.handlers = [handler]
        root.setLevel(logging.INFO)
        root.propagate = False
    if verbose:
        logging.getLogger("e2bows").setLevel(logging.DEBUG)
