"""
Command dispatcher and the artifact plumbing shared by all subcommands.
"""
import argparse
import json
import logging
import signal
import sys
from pathlib import Path
from typing import Optional, Sequence

from structmark.mark.config.yml_loader import RunConfig
from structmark.mark.errors import ConfigError, MissingArtifactError, StructMarkError
from structmark.mark.models.codec import WatermarkDecoder, WatermarkEncoder
from structmark.mark.models.genmodel import EpsNet
from structmark.mark.models.waterlora import WaterLoRAModel, attach
from structmark.mark.nn.checkpoint import Checkpoint
from structmark.mark.pluginmgr import StructMarkBehavior
from structmark.mark.structure.struct_io import Dataset, Structure, read_pdb, write_pdb
import structmark.mark.commands  # noqa: F401  (registers the subcommands)

LOGGER = logging.getLogger(__name__)

HASH_REMARK = 'STRUCTMARK CONFIG'


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(prog='structmark',
                                   description='Watermarking for protein backbone generators.')
  parser.add_argument('-v', '--verbose', action='store_true', help='Log debug messages.')
  parser.add_argument('-q', '--quiet', action='store_true', help='Only log warnings and errors.')
  subparsers = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)
  for name, (_, configure) in StructMarkBehavior.COMMAND_HANDLERS.items():
    sub = subparsers.add_parser(name)
    sub.add_argument('--config', type=Path, default=None, help='YAML or JSON run configuration.')
    sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                     help='Override one configuration key, e.g. codec.epochs=5.')
    configure(sub)
  return parser


class StructMarkApp:
  """
  One command-line invocation: the parsed arguments, the merged run
  configuration and helpers to read and write artifacts stamped with its hash.
  """

  def __init__(self, args: argparse.Namespace):
    self.args = args
    self.config = RunConfig.load(args.config).apply_overrides(args.overrides)
    self.config_hash = self.config.config_hash

    def handle_sigint(signum, frame):
      LOGGER.warning('SIGINT received. Exiting gracefully...')
      sys.exit(130)

    signal.signal(signal.SIGINT, handle_sigint)

  def exec(self) -> int:
    handler, _ = StructMarkBehavior.COMMAND_HANDLERS[self.args.command]
    LOGGER.debug(f'Running {self.args.command} with config {self.config_hash}')
    try:
      return int(handler(self, self.args) or 0)
    except StructMarkError as err:
      LOGGER.error(f'{type(err).__name__}: {err}')
      return err.exit_code

  #### Seeds ####

  def seed(self, required: bool = True) -> Optional[int]:
    seed = getattr(self.args, 'seed', None)
    if seed is None and required:
      raise ConfigError(f'{self.args.command} needs an explicit --seed.')
    return seed

  #### Checkpoints ####

  def new_checkpoint(self) -> Checkpoint:
    return Checkpoint(self.config_hash, created=f'{self.args.command}/s{self.seed(required=False)}')

  def load_checkpoint(self, path: Path) -> Checkpoint:
    if path is None:
      raise ConfigError(f'{self.args.command} needs a checkpoint path.')
    ckpt = Checkpoint.load(path)
    if ckpt.config_hash and ckpt.config_hash != self.config_hash:
      LOGGER.warning(f'Checkpoint "{path}" was produced by config {ckpt.config_hash}, '
                     f'running with {self.config_hash}.')
    return ckpt

  @staticmethod
  def restore_encoder(ckpt: Checkpoint) -> WatermarkEncoder:
    state = ckpt.state('encoder')
    encoder = WatermarkEncoder(**ckpt.arch['encoder'])
    encoder.load_state_dict(state)
    return encoder

  @staticmethod
  def restore_decoder(ckpt: Checkpoint) -> WatermarkDecoder:
    state = ckpt.state('decoder')
    decoder = WatermarkDecoder(**ckpt.arch['decoder'])
    decoder.load_state_dict(state)
    return decoder

  @staticmethod
  def restore_base(ckpt: Checkpoint) -> EpsNet:
    state = ckpt.state('base')
    base = EpsNet(**ckpt.arch['base'])
    base.load_state_dict(state)
    return base

  @classmethod
  def restore_wrapped(cls, ckpt: Checkpoint) -> WaterLoRAModel:
    state = ckpt.state('waterlora')
    wrapped = attach(cls.restore_base(ckpt), **ckpt.arch['waterlora'])
    wrapped.load_state_dict(state)
    return wrapped

  #### Structures ####

  @staticmethod
  def manifest_hash(path: Path) -> str:
    path = Path(path)
    if not path.is_file():
      raise MissingArtifactError(f'Corpus manifest "{path}" does not exist.')
    return json.loads(path.read_text()).get('config_hash', '')

  @staticmethod
  def pdb_hash(path: Path) -> str:
    for line in Path(path).read_text(errors='replace').splitlines():
      if line.startswith('REMARK 250') and HASH_REMARK in line:
        return line.split(HASH_REMARK, 1)[1].strip()
    return ''

  def load_corpus(self, path: Path) -> Dataset:
    if path is None:
      raise ConfigError(f'{self.args.command} needs --corpus.')
    corpus_hash = self.manifest_hash(path)
    if corpus_hash and corpus_hash != self.config_hash:
      LOGGER.warning(f'Corpus "{path}" was produced by config {corpus_hash}, running with {self.config_hash}.')
    return Dataset.load_manifest(path)

  @staticmethod
  def read_structure(path: Path) -> Structure:
    path = Path(path)
    if not path.is_file():
      raise MissingArtifactError(f'Structure "{path}" does not exist.')
    return read_pdb(path)

  def write_structure(self, s: Structure, path: Path, remarks: Sequence[str] = ()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_pdb(s, [f'{HASH_REMARK} {self.config_hash}', *remarks]))
    LOGGER.info(f'Wrote {path}')

  def log_path(self, out: Path, explicit: Optional[Path] = None) -> Path:
    """
    Fresh JSON-lines training log next to `out` (or at `explicit`), opened
    with one header record naming the command, seed and config hash.
    """
    path = Path(explicit) if explicit else Path(out).with_suffix('.log.jsonl')
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(command=self.args.command, seed=self.seed(required=False), config_hash=self.config_hash)
    path.write_text(json.dumps(header, sort_keys=True) + '\n', encoding='utf-8')
    return path
