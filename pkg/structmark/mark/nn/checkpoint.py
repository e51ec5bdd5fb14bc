"""
Checkpoint container: one magic line, one compact JSON manifest line, then a
raw block of little-endian float64 parameters.

Parameters are grouped in namespaces (base, waterlora, encoder, decoder) so a
container can ship adapters without base weights.
"""
from collections import OrderedDict
import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from structmark.mark.errors import CheckpointError, MissingArtifactError

LOGGER = logging.getLogger(__name__)

MAGIC = b'STRUCTMARK-CHECKPOINT\n'
FORMAT_VERSION = 1
NAMESPACES = ('base', 'waterlora', 'encoder', 'decoder')


class Checkpoint:

  def __init__(self, config_hash: str = '', created: str = ''):
    self.config_hash = config_hash
    self.created = created
    self.arrays: 'OrderedDict[str, OrderedDict[str, np.ndarray]]' = OrderedDict()
    self.arch: dict[str, dict] = {}

  @property
  def namespaces(self) -> list[str]:
    return list(self.arrays)

  def add_namespace(self, namespace: str, state: dict, arch: Optional[dict] = None):
    """
    Stores a parameter state dict under a namespace.

    Args:
        namespace (str): One of NAMESPACES.
        state (dict): {parameter name: array}.
        arch (dict): Constructor arguments needed to rebuild the model.
    """
    if namespace not in NAMESPACES:
      raise CheckpointError(f"Unknown checkpoint namespace '{namespace}'")
    self.arrays[namespace] = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in state.items())
    self.arch[namespace] = dict(arch or {})

  def state(self, namespace: str) -> 'OrderedDict[str, np.ndarray]':
    if namespace not in self.arrays:
      raise MissingArtifactError(f"Checkpoint has no '{namespace}' namespace (has {self.namespaces})")
    return self.arrays[namespace]

  def manifest(self) -> dict:
    parameters = []
    offset = 0
    for namespace, state in self.arrays.items():
      for name, value in state.items():
        nbytes = value.size * 8
        parameters.append(dict(namespace=namespace, name=name, shape=list(value.shape),
                               dtype='<f8', offset=offset, nbytes=nbytes))
        offset += nbytes
    return dict(format_version=FORMAT_VERSION, created=self.created, config_hash=self.config_hash,
                namespaces=self.namespaces, arch=self.arch, parameters=parameters)

  def to_bytes(self) -> bytes:
    header = json.dumps(self.manifest(), sort_keys=True, separators=(',', ':')).encode('utf-8')
    blocks = [np.ascontiguousarray(v, dtype='<f8').tobytes()
              for state in self.arrays.values() for v in state.values()]
    return MAGIC + header + b'\n' + b''.join(blocks)

  def save(self, path: Path):
    Path(path).write_bytes(self.to_bytes())
    LOGGER.info(f'Wrote checkpoint {path} (namespaces: {", ".join(self.namespaces)})')

  def digest(self) -> str:
    return hashlib.sha256(self.to_bytes()).hexdigest()

  @classmethod
  def from_bytes(cls, blob: bytes) -> 'Checkpoint':
    if not blob.startswith(MAGIC):
      raise CheckpointError('Not a structmark checkpoint (bad magic line).')
    header_end = blob.index(b'\n', len(MAGIC))
    manifest = json.loads(blob[len(MAGIC):header_end].decode('utf-8'))
    if manifest.get('format_version') != FORMAT_VERSION:
      raise CheckpointError(f"Unsupported checkpoint format version {manifest.get('format_version')}")
    raw = memoryview(blob)[header_end + 1:]

    ckpt = cls(manifest.get('config_hash', ''), manifest.get('created', ''))
    for namespace in manifest['namespaces']:
      ckpt.arrays[namespace] = OrderedDict()
      ckpt.arch[namespace] = manifest.get('arch', {}).get(namespace, {})
    for entry in manifest['parameters']:
      start, stop = entry['offset'], entry['offset'] + entry['nbytes']
      if stop > len(raw):
        raise CheckpointError(f"Checkpoint is truncated inside parameter '{entry['name']}'")
      value = np.frombuffer(raw[start:stop], dtype='<f8').reshape(entry['shape']).astype(np.float64)
      ckpt.arrays[entry['namespace']][entry['name']] = value
    return ckpt

  @classmethod
  def load(cls, path: Path) -> 'Checkpoint':
    path = Path(path)
    if not path.is_file():
      raise MissingArtifactError(f'Checkpoint "{path}" does not exist.')
    return cls.from_bytes(path.read_bytes())

  def merge(self, other: 'Checkpoint') -> 'Checkpoint':
    for namespace in other.namespaces:
      self.arrays[namespace] = other.arrays[namespace]
      self.arch[namespace] = other.arch[namespace]
    return self
