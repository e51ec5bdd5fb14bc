from pathlib import Path

import pytest

from structmark.mark.config.yml_loader import RunConfig, flatten, parse_yaml
from structmark.mark.errors import ConfigError, MissingArtifactError
from structmark.mark.evaluation.attacks import AttackManager, default_suite
from structmark.mark.models.codec import CodecConfig
from structmark.mark.models.finetune import FinetuneConfig
from structmark.mark.models.genmodel import GenConfig

DESK_CONFIG = Path(__file__).parents[1] / 'configs' / 'desk.yml'


def test_defaults():
  cfg = RunConfig()
  assert cfg.get_value('codec.gamma') == 2.0
  assert cfg.get_value('genmodel.steps') == 100
  assert cfg.get_value('codec.missing', 5) == 5
  assert RunConfig.load(None).config_hash == cfg.config_hash


def test_unknown_key_is_named(tmp_path):
  with pytest.raises(ConfigError, match='codec.gama'):
    RunConfig(dict(codec=dict(gama=1.0)))
  path = tmp_path / 'bad.yml'
  path.write_text('finetune:\n  etta: 1.0\n')
  with pytest.raises(ConfigError, match='finetune.etta'):
    RunConfig.load(path)


def test_missing_file():
  with pytest.raises(MissingArtifactError) as err:
    RunConfig.load('/nonexistent/run.yml')
  assert err.value.exit_code == 2


def test_malformed_yaml():
  with pytest.raises(ConfigError):
    parse_yaml('codec: [1, 2')
  with pytest.raises(ConfigError):
    parse_yaml('- 1\n- 2\n')
  assert parse_yaml('') == {}


def test_command_line_overrides():
  cfg = RunConfig().apply_overrides(['codec.gamma=0.5', 'eval.populations=[10, 20]', 'finetune.weight_mode=literal'])
  assert cfg.get_value('codec.gamma') == 0.5
  assert cfg.get_value('eval.populations') == [10, 20]
  assert cfg.get_value('finetune.weight_mode') == 'literal'
  with pytest.raises(ConfigError):
    RunConfig().apply_overrides(['codec.gamma'])
  with pytest.raises(ConfigError, match='codec.sigma'):
    RunConfig().apply_overrides(['codec.sigma=1'])


def test_flatten():
  nested = dict(a=dict(b=1, c=[1, 2]), d={}, e='x')
  assert flatten(nested) == {'a.b': 1, 'a.c': [1, 2], 'd': {}, 'e': 'x'}


def test_blocks_are_copies():
  cfg = RunConfig()
  block = cfg.block('codec')
  block['gamma'] = 99.0
  assert cfg.get_value('codec.gamma') == 2.0
  with pytest.raises(ConfigError):
    cfg.block('optimizer')


def test_blocks_build_model_configs():
  cfg = RunConfig()
  assert GenConfig.from_dict(cfg.block('genmodel')).steps == 100
  assert CodecConfig.from_dict(cfg.block('codec')).gamma == 2.0
  finetune = FinetuneConfig.from_dict(dict(cfg.block('finetune'), **cfg.block('waterlora')))
  assert (finetune.eta, finetune.rank) == (2.0, 16)


def test_desk_configuration():
  cfg = RunConfig.load(DESK_CONFIG)
  assert cfg.get_value('codec.epochs') == 4
  assert cfg.get_value('codec.gamma') == 2.0
  assert cfg.get_value('corpus.n_structures') == 240
  assert cfg.config_hash != RunConfig().config_hash


def test_default_attack_suite_deserializes():
  suite = [AttackManager.deserialize(spec) for spec in RunConfig().get_value('attacks.suite')]
  assert [a.kind for a in suite] == [a.kind for a in default_suite()]
  assert suite[1].keep == 0.5
  assert suite[3].sigma == 0.2


def test_config_hash_is_canonical():
  first = RunConfig(dict(codec=dict(lr=1e-3, gamma=1.0)))
  second = RunConfig(dict(codec=dict(gamma=1.0, lr=1e-3)))
  assert first.config_hash == second.config_hash
  assert len(first.config_hash) == 16
  assert first.config_hash != RunConfig().config_hash
