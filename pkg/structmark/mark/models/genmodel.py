"""
Toy denoising-diffusion generator over C-alpha chains.

Coordinates are divided by COORD_SCALE before diffusion so unit-variance noise
is commensurate with a chain. The noise predictor reads invariant features of
x_t (in Angstrom) plus a time embedding and emits one 3-vector per residue in
the local frames of x_t, so predictions rotate with the input.
"""
from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from structmark.mark.errors import ShapeError, StructureError
from structmark.mark.models.codec import frame_bases
from structmark.mark.nn import tensor as T
from structmark.mark.nn.features import DEFAULT_K_NEIGHBORS, MessagePassingStack, invariant_features
from structmark.mark.nn.layers import AttentionLayer, LinearLayer, Module, sinusoidal_embedding
from structmark.mark.nn.optim import AdamState
from structmark.mark.nn.tensor import Tape, Tensor, backward
from structmark.mark.structure import geom
from structmark.mark.structure.struct_io import Dataset, Structure, batch_by_length
from structmark.mark.widgets.progress import StatusLogger

LOGGER = logging.getLogger(__name__)

COORD_SCALE = 10.0


@dataclass
class DiffusionSchedule:
  """
  Linear beta schedule. Steps are 1-indexed: t ∈ {1, ..., T}.
  """
  steps: int = 100
  beta_start: float = 1e-4
  beta_end: float = 0.02

  def __post_init__(self):
    self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
    self.alphas = 1.0 - self.betas
    self.alpha_bars = np.cumprod(self.alphas)
    if not (0.0 < self.betas[0] <= self.betas[-1] < 1.0):
      raise ShapeError(f'Invalid beta range [{self.beta_start}, {self.beta_end}].')
    if np.any(np.diff(self.alpha_bars) >= 0.0):
      raise ShapeError('Cumulative alpha products must be strictly decreasing.')
    if self.alpha_bars[-1] >= 0.05:
      LOGGER.warning(f'Final alpha_bar {self.alpha_bars[-1]:.4f} leaves signal at t=T; sampling from N(0, I) will be biased.')

  @property
  def T(self) -> int:
    return self.steps

  def check_step(self, t):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > self.steps):
      raise ShapeError(f'Diffusion step {t} outside 1..{self.steps}.')

  def alpha_bar(self, t) -> np.ndarray:
    self.check_step(t)
    return self.alpha_bars[np.asarray(t) - 1]

  def alpha_bar_prev(self, t: int) -> float:
    return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

  def posterior(self, t: int) -> tuple[float, float, float]:
    """
    Coefficients of q(x_{t-1} | x_t, x0): (coef on x0, coef on x_t, variance).
    """
    self.check_step(t)
    beta = self.betas[t - 1]
    alpha_bar = self.alpha_bars[t - 1]
    alpha_bar_prev = self.alpha_bar_prev(t)
    coef_x0 = math.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)
    coef_xt = math.sqrt(self.alphas[t - 1]) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return coef_x0, coef_xt, variance


def _per_item(values, ndim: int) -> np.ndarray:
  values = np.asarray(values, dtype=np.float64)
  return values.reshape(values.shape + (1,) * (ndim - values.ndim)) if values.ndim else values


def forward_noise(x0: np.ndarray, t, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
  """
  x_t = sqrt(alpha_bar_t)·x0 + sqrt(1 - alpha_bar_t)·noise, per coordinate.

  Args:
      x0 (np.ndarray): (n, 3) or (B, n, 3) clean coordinates.
      t: Step or (B,) steps in 1..T.
      noise (np.ndarray): Standard normal noise, same shape as x0.
  """
  x0 = np.asarray(x0, dtype=np.float64)
  alpha_bar = _per_item(schedule.alpha_bar(t), x0.ndim)
  return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise


def predict_x0(x_t, t, eps_pred, schedule: DiffusionSchedule):
  """
  One reverse step to the clean estimate: (x_t - sqrt(1 - alpha_bar_t)·eps) / sqrt(alpha_bar_t).
  Accepts arrays or Tensors for `eps_pred`; a Tensor keeps the result differentiable.
  """
  ndim = len(np.shape(x_t.data if isinstance(x_t, Tensor) else x_t))
  alpha_bar = _per_item(schedule.alpha_bar(t), ndim)
  if isinstance(eps_pred, Tensor) or isinstance(x_t, Tensor):
    return (T.as_tensor(x_t) - T.as_tensor(eps_pred) * np.sqrt(1.0 - alpha_bar)) * (1.0 / np.sqrt(alpha_bar))
  return (np.asarray(x_t) - np.sqrt(1.0 - alpha_bar) * np.asarray(eps_pred)) / np.sqrt(alpha_bar)


class EpsNet(Module):
  """
  ε_θ(x_t, t) on scaled coordinates. The head is zero-initialized, so an
  untrained network predicts zero noise.
  """

  def __init__(self, width: int = 32, rounds: int = 2, heads: int = 4, attention_layers: int = 1,
               k_neighbors: int = DEFAULT_K_NEIGHBORS, time_channels: int = 16, steps: int = 100,
               beta_start: float = 1e-4, beta_end: float = 0.02, seed: int = 0):
    super().__init__('base')
    rng = np.random.default_rng([seed, 21])
    self.width = width
    self.rounds = rounds
    self.heads = heads
    self.k_neighbors = k_neighbors
    self.time_channels = time_channels
    self.seed = seed
    self.schedule = DiffusionSchedule(steps, beta_start, beta_end)
    self.time_embed = self.add_child('time_embed', LinearLayer('base.time_embed', time_channels, width, rng))
    self.trunk = self.add_child('trunk', MessagePassingStack('base.trunk', width, rounds, rng))
    self.attention = [self.add_child(f'attention{i}', AttentionLayer(f'base.attention{i}', width, heads, rng))
                      for i in range(attention_layers)]
    self.head = self.add_child('head', LinearLayer('base.head', width, 3, zero_init=True))

  def arch(self) -> dict:
    return dict(width=self.width, rounds=self.rounds, heads=self.heads, attention_layers=len(self.attention),
                k_neighbors=self.k_neighbors, time_channels=self.time_channels, steps=self.schedule.steps,
                beta_start=self.schedule.beta_start, beta_end=self.schedule.beta_end, seed=self.seed)

  def __call__(self, x_t: np.ndarray, t, modulation=None) -> Tensor:
    """
    Args:
        x_t (np.ndarray): (B, n, 3) noisy scaled coordinates.
        t: (B,) steps in 1..T.
        modulation: Optional per-sample effective weights (see models.waterlora).

    Returns:
        Tensor: (B, n, 3) predicted noise.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.ndim != 3:
      raise ShapeError(f'EpsNet expects [B, n, 3] input, got {x_t.shape}')
    batch = x_t.shape[0]
    steps = np.broadcast_to(np.asarray(t), (batch,))
    self.schedule.check_step(steps)

    feats = invariant_features(x_t * COORD_SCALE, self.k_neighbors)
    temb = sinusoidal_embedding(steps, self.time_channels).reshape(batch, 1, self.time_channels)
    h = self.trunk(feats, node_input=self.time_embed(temb, modulation), modulation=modulation)
    for attention in self.attention:
      h = T.layer_norm(h + attention(h, modulation))
    local = self.head(h, modulation)
    bases = frame_bases(x_t)
    return T.tsum(T.mul(bases, T.reshape(local, local.shape[:2] + (1, 3))), axis=-1)


@dataclass
class GenConfig:
  width: int = 32
  rounds: int = 2
  heads: int = 4
  attention_layers: int = 1
  k_neighbors: int = DEFAULT_K_NEIGHBORS
  time_channels: int = 16
  steps: int = 100
  beta_start: float = 1e-4
  beta_end: float = 0.02
  lr: float = 1e-4
  batch_size: int = 64
  epochs: int = 20
  seed: int = 0

  @classmethod
  def from_dict(cls, values: dict) -> 'GenConfig':
    return cls(**{k: v for k, v in values.items() if k in cls.__dataclass_fields__})

  def build(self) -> EpsNet:
    return EpsNet(self.width, self.rounds, self.heads, self.attention_layers, self.k_neighbors,
                  self.time_channels, self.steps, self.beta_start, self.beta_end, self.seed)


@dataclass
class BaseTrainResult:
  model: EpsNet
  log: list = field(default_factory=list)


def denoising_loss(model: EpsNet, x0: np.ndarray, t: np.ndarray, noise: np.ndarray, modulation=None) -> Tensor:
  x_t = forward_noise(x0, t, noise, model.schedule)
  return T.mse_per_residue(model(x_t, t, modulation), noise)


def scaled_coords(coords: np.ndarray) -> np.ndarray:
  coords = np.asarray(coords, dtype=np.float64)
  return (coords - coords.mean(axis=-2, keepdims=True)) / COORD_SCALE


def train_base(d: Union[Dataset, Sequence[Structure]], cfg: Optional[GenConfig] = None,
               log_path: Optional[Path] = None) -> BaseTrainResult:
  """
  Fits ε_θ by the standard noise-matching objective with uniform t.

  Args:
      d: Dataset (train split when present) or list of structures.
      cfg (GenConfig): Architecture and optimizer settings.
      log_path (Path): JSON-lines log, one record per epoch.
  """
  cfg = cfg or GenConfig()
  if isinstance(d, Dataset):
    train = d.split('train').structures() or d.structures()
  else:
    train = list(d)
  if not train:
    raise StructureError('Cannot train the generator on an empty dataset.')

  model = cfg.build()
  optimizer = AdamState(model.parameters(), lr=cfg.lr)
  log = []
  for epoch in range(cfg.epochs):
    batches = batch_by_length(train, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))
    total = 0.0
    with StatusLogger(f'train-base epoch {epoch + 1}/{cfg.epochs}', total=len(batches), logger=LOGGER) as status:
      for idx, batch in enumerate(batches):
        rng = np.random.default_rng([cfg.seed, epoch, idx])
        x0 = scaled_coords(batch.coords())
        t = rng.integers(1, model.schedule.steps + 1, size=len(batch))
        noise = rng.standard_normal(x0.shape)
        with Tape() as tape:
          loss = denoising_loss(model, x0, t, noise)
        backward(tape, loss)
        optimizer.step()
        total += float(loss.data)
        status.update(loss=float(loss.data))
    record = dict(epoch=epoch, loss=total / len(batches))
    log.append(record)
    if log_path is not None:
      with open(log_path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True) + '\n')
    LOGGER.info(f"Epoch {epoch}: denoising loss {record['loss']:.4f}")
  return BaseTrainResult(model, log)


def sample_many(model: EpsNet, n_residues: int, seeds: Sequence, lora=None, name: str = 'sample') -> list[Structure]:
  """
  Ancestral sampling of one chain per seed, batched. Each chain draws its
  initial state and step noise from its own generator.

  Args:
      model (EpsNet): Noise predictor.
      n_residues (int): Chain length.
      seeds (Sequence): One seed per chain.
      lora: Optional WaterLoRA context; its codes modulate every linear layer.
  """
  if n_residues < 3:
    raise StructureError('Samples need at least 3 residues.')
  seeds = list(seeds)
  batch = len(seeds)
  modulation = None if lora is None else lora.modulation(batch)
  schedule = model.schedule
  rngs = [np.random.default_rng(seed) for seed in seeds]
  x = np.stack([rng.standard_normal((n_residues, 3)) for rng in rngs])
  for t in range(schedule.steps, 0, -1):
    eps = model(x, np.full(batch, t), modulation).data
    x0_hat = predict_x0(x, t, eps, schedule)
    coef_x0, coef_xt, variance = schedule.posterior(t)
    x = coef_x0 * x0_hat + coef_xt * x
    if t > 1:
      x = x + math.sqrt(variance) * np.stack([rng.standard_normal((n_residues, 3)) for rng in rngs])

  out = []
  for seed, coords in zip(seeds, x):
    label = seed if np.isscalar(seed) else '-'.join(str(s) for s in np.ravel(seed))
    out.append(Structure(geom.center(coords * COORD_SCALE), name=f'{name}-{label}').validate())
  return out


def sample(model: EpsNet, n_residues: int, seed, lora=None) -> Structure:
  return sample_many(model, n_residues, [seed], lora)[0]


def mean_bond_length(structures: Sequence[Structure]) -> float:
  return float(np.mean(np.concatenate([s.bond_lengths() for s in structures])))
