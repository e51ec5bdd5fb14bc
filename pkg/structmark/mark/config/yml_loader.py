"""
Run configuration: YAML (or JSON) blocks merged over the packaged defaults.
"""
import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from yaml import YAMLError, load
try:
  from yaml import CSafeLoader as Loader
except ImportError:
  from yaml import SafeLoader as Loader

from structmark.mark.errors import ConfigError, MissingArtifactError

LOGGER = logging.getLogger(__name__)

DEFAULTS_PATH = Path(__file__).parent / 'defaults.yml'
BLOCKS = ('corpus', 'codec', 'genmodel', 'waterlora', 'finetune', 'attacks', 'eval')


def parse_yaml(text: str, origin: str = '<string>') -> dict:
  try:
    data = load(text, Loader=Loader)
  except YAMLError as err:
    raise ConfigError(f'Cannot parse configuration {origin}: {err}') from err
  if data is None:
    return {}
  if not isinstance(data, dict):
    raise ConfigError(f'Configuration {origin} must be a mapping at the top level.')
  return data


def flatten(data: dict, parent_key: str = '') -> dict:
  """
  Dot-delimited view of a nested mapping. Lists are leaves.

  Args:
      data (dict): Nested configuration.
      parent_key (str): Prefix for every key.
  """
  flat = {}
  queue = [(data, parent_key)]
  while queue:
    cur, key = queue.pop()
    if isinstance(cur, dict) and cur:
      for name, value in cur.items():
        queue.append((value, f'{key}.{name}' if key else str(name)))
    else:
      flat[key] = cur
  return flat


class RunConfig:
  """
  Merged configuration. Every key must already exist in the defaults; a key
  the defaults do not know is a configuration error naming that key.
  """

  _defaults: Optional[dict] = None

  def __init__(self, overrides: Optional[dict] = None, origin: str = '<defaults>'):
    self.origin = origin
    self.data = copy.deepcopy(self.defaults())
    known = flatten(self.data)
    for key, value in sorted(flatten(overrides or {}).items()):
      if key not in known:
        raise ConfigError(f"Unknown configuration key '{key}' in {origin}")
      self.set_value(key, value)

  @classmethod
  def defaults(cls) -> dict:
    if cls._defaults is None:
      cls._defaults = parse_yaml(DEFAULTS_PATH.read_text(encoding='utf-8'), str(DEFAULTS_PATH))
    return cls._defaults

  @classmethod
  def load(cls, path: Optional[Union[str, Path]]) -> 'RunConfig':
    if path is None:
      return cls()
    path = Path(path)
    if not path.is_file():
      raise MissingArtifactError(f'Configuration file "{path}" does not exist.')
    return cls(parse_yaml(path.read_text(encoding='utf-8'), str(path)), str(path))

  def set_value(self, key: str, value: Any):
    """
    Sets a value for a provided dot-delimited key.

    Args:
        key (str): Dot-delimited key (i.e., `codec.gamma`)
        value (Any): Value to assign for the specified key.
    """
    parts = key.split('.')
    current = self.data
    for part in parts[:-1]:
      current = current.setdefault(part, {})
    current[parts[-1]] = value

  def get_value(self, key: str, default: Any = None) -> Any:
    current = self.data
    for part in key.split('.'):
      if not isinstance(current, dict) or part not in current:
        return default
      current = current[part]
    return current

  def apply_overrides(self, assignments: Iterable[str]) -> 'RunConfig':
    """
    Applies `key=value` overrides from the command line; values are parsed as
    YAML scalars.
    """
    known = flatten(self.defaults())
    for assignment in assignments:
      key, sep, raw = assignment.partition('=')
      if not sep:
        raise ConfigError(f"Override '{assignment}' is not of the form key=value")
      key = key.strip()
      if key not in known:
        raise ConfigError(f"Unknown configuration key '{key}'")
      self.set_value(key, load(raw, Loader=Loader))
    return self

  def block(self, name: str) -> dict:
    if name not in BLOCKS:
      raise ConfigError(f"Unknown configuration block '{name}'")
    return copy.deepcopy(self.data.get(name, {}))

  def to_dict(self) -> dict:
    return copy.deepcopy(self.data)

  @property
  def config_hash(self) -> str:
    canonical = json.dumps(self.data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

  def __repr__(self):
    return f'<RunConfig {self.origin} {self.config_hash}>'
