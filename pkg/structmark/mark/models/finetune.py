"""
Stage-2 consistency-preserving fine-tuning of WaterLoRA adapters and the
watermark decoder against a frozen reference generator.
"""
import copy
from dataclasses import dataclass, field
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from structmark.mark.errors import ConfigError, StructMarkError, StructureError
from structmark.mark.models.codec import WatermarkDecoder
from structmark.mark.models.genmodel import COORD_SCALE, EpsNet, forward_noise, predict_x0, sample_many, scaled_coords
from structmark.mark.models.waterlora import DEFAULT_RANK, WaterLoRAModel, attach
from structmark.mark.nn import tensor as T
from structmark.mark.nn.layers import Module
from structmark.mark.nn.optim import AdamState
from structmark.mark.nn.tensor import Tape, Tensor, backward
from structmark.mark.structure import geom
from structmark.mark.structure.struct_io import Dataset, Structure, batch_by_length
from structmark.mark.widgets.progress import StatusLogger

LOGGER = logging.getLogger(__name__)

WEIGHT_MODES = ('linear', 'literal', 'uniform')
CONSISTENCY_INPUTS = ('same', 'denoised')


def time_weight(t, steps: int, mode: str = 'linear') -> np.ndarray:
  """
  Weight of the retrieval term at step t.

  linear: (T - t) / T, largest near the clean end of the chain.
  literal: (t - T) / T, non-positive.
  uniform: 1.
  """
  t = np.asarray(t, dtype=np.float64)
  if mode == 'linear':
    return (steps - t) / steps
  if mode == 'literal':
    return (t - steps) / steps
  if mode == 'uniform':
    return np.ones_like(t)
  raise ConfigError(f"Unknown finetune.weight_mode '{mode}'")


@dataclass
class FinetuneConfig:
  eta: float = 2.0
  epochs: int = 10
  weight_mode: str = 'linear'
  consistency_input: str = 'same'
  batch_size: int = 64
  lr: float = 1e-4
  rank: int = DEFAULT_RANK
  alpha: float = 1.0
  keep_best: bool = True
  eval_samples: int = 16
  eval_length: int = 56
  seed: int = 0

  def __post_init__(self):
    if self.eta < 0:
      raise ConfigError(f'finetune.eta must be non-negative, got {self.eta}')
    if self.weight_mode not in WEIGHT_MODES:
      raise ConfigError(f"finetune.weight_mode must be one of {WEIGHT_MODES}, got '{self.weight_mode}'")
    if self.consistency_input not in CONSISTENCY_INPUTS:
      raise ConfigError(f"finetune.consistency_input must be one of {CONSISTENCY_INPUTS}, got '{self.consistency_input}'")

  @classmethod
  def from_dict(cls, values: dict) -> 'FinetuneConfig':
    return cls(**{k: v for k, v in values.items() if k in cls.__dataclass_fields__})


def state_digest(module: Module) -> str:
  digest = hashlib.sha256()
  for name, param in module.named_parameters().items():
    digest.update(name.encode('utf-8'))
    digest.update(np.ascontiguousarray(param.data, dtype='<f8').tobytes())
  return digest.hexdigest()


class ReferenceModel:
  """
  Frozen deep copy of the base generator taken before fine-tuning.
  """

  def __init__(self, base: EpsNet):
    self.model = copy.deepcopy(base)
    self.model.set_trainable(False)
    self.digest = state_digest(self.model)

  def __call__(self, x_t: np.ndarray, t) -> np.ndarray:
    return self.model(x_t, t).data

  def verify(self):
    if state_digest(self.model) != self.digest:
      raise StructMarkError('Reference model parameters changed during fine-tuning.')


@dataclass
class FinetuneLoss:
  total: Tensor
  consistency: float
  retrieval: float
  logits: np.ndarray


def finetune_loss(wrapped: WaterLoRAModel, decoder: WatermarkDecoder, reference: ReferenceModel,
                  x0: np.ndarray, codes: np.ndarray, t: np.ndarray, noise: np.ndarray, eta: float = 2.0,
                  weight_mode: str = 'linear', consistency_input: str = 'same') -> FinetuneLoss:
  """
  L_c(ε̂, ε_ref(x_t)) + η·mean_b[w(t_b)·L_m(D(x̂_t), m_b)].

  Args:
      x0 (np.ndarray): (B, n, 3) clean scaled coordinates.
      codes (np.ndarray): (B, l) 0/1 codes, one per item.
      t (np.ndarray): (B,) steps.
      noise (np.ndarray): Standard normal noise like x0.
      consistency_input (str): 'same' compares both predictions at x_t;
          'denoised' evaluates the watermarked model at x̂_t instead.
  """
  base = wrapped.base
  schedule = base.schedule
  batch = x0.shape[0]
  x_t = forward_noise(x0, t, noise, schedule)
  modulation = wrapped.context(codes).modulation(batch)

  eps_hat = base(x_t, t, modulation)
  x0_hat = predict_x0(x_t, t, eps_hat, schedule)
  eps_ref = reference(x_t, t)
  if consistency_input == 'same':
    consistency = T.mse_per_residue(eps_hat, eps_ref)
  else:
    consistency = T.mse_per_residue(base(x0_hat.data, t, modulation), eps_ref)

  logits = decoder(x0_hat * COORD_SCALE)
  per_item = T.mean(T.bce_with_logits(logits, codes), axis=-1)
  weights = time_weight(t, schedule.steps, weight_mode)
  retrieval = T.mean(per_item * weights)
  total = consistency + retrieval * eta
  return FinetuneLoss(total, float(consistency.data), float(np.mean(per_item.data)), logits.data)


@dataclass
class FinetuneResult:
  wrapped: WaterLoRAModel
  decoder: WatermarkDecoder
  reference: ReferenceModel
  log: list = field(default_factory=list)
  best_epoch: int = -1


def sample_metrics(wrapped: WaterLoRAModel, decoder: WatermarkDecoder, n_samples: int, n_residues: int,
                   seed) -> dict:
  """
  Bit accuracy of watermarked samples under random codes and their RMSD to
  reference samples drawn with the same seeds.
  """
  rng = np.random.default_rng(seed)
  codes = rng.integers(0, 2, size=(n_samples, wrapped.code_length)).astype(np.float64)
  seeds = [[int(s), 7] for s in rng.integers(0, 2 ** 31, size=n_samples)]
  marked = sample_many(wrapped.base, n_residues, seeds, wrapped.context(codes))
  clean = sample_many(wrapped.base, n_residues, seeds)
  logits = decoder(np.stack([s.ca for s in marked])).data
  bitacc = float(np.mean((logits > 0) == (codes > 0.5)))
  rmsd = float(np.mean([geom.kabsch(a.ca, b.ca)[1] for a, b in zip(marked, clean)]))
  return dict(sample_bitacc=bitacc, sample_rmsd=rmsd)


def run_finetune(base: EpsNet, decoder: WatermarkDecoder, d: Union[Dataset, Sequence[Structure]],
                 cfg: Optional[FinetuneConfig] = None, log_path: Optional[Path] = None,
                 wrapped: Optional[WaterLoRAModel] = None) -> FinetuneResult:
  """
  Trains the adapters and the decoder; the base weights, the reference copy
  and the Stage-1 encoder stay fixed.

  Args:
      base (EpsNet): Trained generator.
      decoder (WatermarkDecoder): Stage-1 decoder, updated in place.
      d: Clean training structures.
      cfg (FinetuneConfig): Settings.
      log_path (Path): JSON-lines log, one record per epoch.
      wrapped (WaterLoRAModel): Existing adapters to continue from.
  """
  cfg = cfg or FinetuneConfig()
  if isinstance(d, Dataset):
    train = d.split('train').structures() or d.structures()
  else:
    train = list(d)
  if not train:
    raise StructureError('Cannot fine-tune on an empty dataset.')

  reference = ReferenceModel(base)
  if wrapped is None:
    wrapped = attach(base, decoder.code_length, cfg.rank, cfg.alpha, cfg.seed)
  base_digest = state_digest(base)
  decoder.set_trainable(True)
  optimizer = AdamState(wrapped.parameters() + decoder.parameters(), lr=cfg.lr)
  steps = base.schedule.steps

  log = []
  best = (-math.inf, -1, None)
  for epoch in range(cfg.epochs):
    batches = batch_by_length(train, cfg.batch_size, np.random.default_rng([cfg.seed, epoch, 2]))
    consistency_sum = retrieval_sum = 0.0
    with StatusLogger(f'finetune epoch {epoch + 1}/{cfg.epochs}', total=len(batches), logger=LOGGER) as status:
      for idx, batch in enumerate(batches):
        rng = np.random.default_rng([cfg.seed, epoch, idx, 2])
        x0 = scaled_coords(batch.coords())
        codes = rng.integers(0, 2, size=(len(batch), decoder.code_length)).astype(np.float64)
        t = rng.integers(1, steps + 1, size=len(batch))
        noise = rng.standard_normal(x0.shape)
        with Tape() as tape:
          loss = finetune_loss(wrapped, decoder, reference, x0, codes, t, noise, cfg.eta,
                               cfg.weight_mode, cfg.consistency_input)
        backward(tape, loss.total)
        optimizer.step()
        consistency_sum += loss.consistency
        retrieval_sum += loss.retrieval
        status.update(consistency=loss.consistency, retrieval=loss.retrieval)

    metrics = sample_metrics(wrapped, decoder, cfg.eval_samples, cfg.eval_length, [cfg.seed, epoch, 0xF1])
    record = dict(epoch=epoch, consistency_loss=consistency_sum / len(batches),
                  retrieval_loss=retrieval_sum / len(batches), eta=cfg.eta, weight_mode=cfg.weight_mode,
                  **metrics)
    log.append(record)
    if log_path is not None:
      with open(log_path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True) + '\n')
    LOGGER.info(f"Epoch {epoch}: L_c {record['consistency_loss']:.5f}, L_m {record['retrieval_loss']:.4f}, "
                f"sample bitacc {record['sample_bitacc']:.3f}, sample rmsd {record['sample_rmsd']:.3f}")
    # Higher bit accuracy wins; lower consistency loss breaks ties.
    score = metrics['sample_bitacc'] - 1e-6 * record['consistency_loss']
    if score > best[0]:
      best = (score, epoch, (wrapped.state_dict(), decoder.state_dict()))

  best_epoch = len(log) - 1
  if cfg.keep_best and best[2] is not None:
    wrapped.load_state_dict(best[2][0])
    decoder.load_state_dict(best[2][1])
    best_epoch = best[1]
    LOGGER.info(f'Keeping adapters and decoder from epoch {best_epoch}.')

  reference.verify()
  if state_digest(base) != base_digest:
    raise StructMarkError('Base generator weights changed during fine-tuning.')
  return FinetuneResult(wrapped, decoder, reference, log, best_epoch)
