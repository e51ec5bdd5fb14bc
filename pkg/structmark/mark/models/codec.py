"""
Watermark encoder/decoder pair, the structure augmentation pool and Stage-1
codec pretraining.

The encoder moves every residue by a bounded displacement expressed in a local
frame built from the chain itself, so it is SE(3)-equivariant. The decoder only
sees invariant features and is therefore SE(3)-invariant.
"""
from collections import defaultdict
from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from structmark.mark.errors import CodeLengthError, GeometryError, StructureError
from structmark.mark.nn import tensor as T
from structmark.mark.nn.features import DEFAULT_K_NEIGHBORS, MessagePassingStack, invariant_features
from structmark.mark.nn.layers import LinearLayer, Module
from structmark.mark.nn.optim import AdamState
from structmark.mark.nn.tensor import Tape, Tensor, backward
from structmark.mark.pluginmgr import StructMarkBehavior
from structmark.mark.structure import geom
from structmark.mark.structure.struct_io import Dataset, Structure, batch_by_length
from structmark.mark.widgets.progress import StatusLogger

LOGGER = logging.getLogger(__name__)

SUPPORTED_CODE_LENGTHS = (4, 8, 16, 32)
DELTA_MAX = 1.0
FRAME_COLLINEAR_TOL = 1e-8


#### Watermark Codes ####

@dataclass(frozen=True)
class WatermarkCode:
  bits: tuple

  def __post_init__(self):
    bits = tuple(int(b) for b in self.bits)
    if len(bits) not in SUPPORTED_CODE_LENGTHS:
      raise CodeLengthError(f'Watermark codes must have {SUPPORTED_CODE_LENGTHS} bits, got {len(bits)}.')
    if any(b not in (0, 1) for b in bits):
      raise CodeLengthError(f'Watermark bits must be 0 or 1, got {bits}.')
    object.__setattr__(self, 'bits', bits)

  @classmethod
  def from_string(cls, text: str) -> 'WatermarkCode':
    text = text.strip()
    if set(text) - {'0', '1'}:
      raise CodeLengthError(f'"{text}" is not a bit string.')
    return cls(tuple(int(c) for c in text))

  @classmethod
  def random(cls, rng: np.random.Generator, length: int) -> 'WatermarkCode':
    return cls(tuple(rng.integers(0, 2, size=length)))

  @property
  def length(self) -> int:
    return len(self.bits)

  def __len__(self):
    return len(self.bits)

  def as_array(self) -> np.ndarray:
    return np.array(self.bits, dtype=np.float64)

  def as_signed(self) -> np.ndarray:
    return 2.0 * self.as_array() - 1.0

  def to_string(self) -> str:
    return ''.join(str(b) for b in self.bits)

  def __str__(self):
    return self.to_string()


def code_matrix(codes: Union[Sequence[WatermarkCode], np.ndarray]) -> np.ndarray:
  """
  Stacks codes into a (B, l) 0/1 float array.
  """
  if isinstance(codes, np.ndarray):
    return np.asarray(codes, dtype=np.float64)
  return np.stack([c.as_array() for c in codes])


#### Local Frames ####

@dataclass
class LocalFrame:
  """
  Orthonormal basis (columns e1, e2, e3) anchored at a C-alpha atom.
  """
  basis: np.ndarray
  origin: np.ndarray


def _orthonormal_frames(v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
  e1 = v1 / np.linalg.norm(v1, axis=-1, keepdims=True)
  w = v2 - np.sum(v2 * e1, axis=-1, keepdims=True) * e1
  w_norm = np.linalg.norm(w, axis=-1)
  collinear = w_norm <= FRAME_COLLINEAR_TOL * np.maximum(np.linalg.norm(v2, axis=-1), 1.0)
  if np.any(collinear):
    # Complete e1 with the coordinate axis it is least aligned with.
    axes = np.eye(3)[np.argmin(np.abs(e1), axis=-1)]
    fallback = axes - np.sum(axes * e1, axis=-1, keepdims=True) * e1
    w = np.where(collinear[..., None], fallback, w)
    w_norm = np.linalg.norm(w, axis=-1)
  e2 = w / w_norm[..., None]
  e3 = np.cross(e1, e2)
  return np.stack([e1, e2, e3], axis=-1)


def frame_bases(coords: np.ndarray) -> np.ndarray:
  """
  Per-residue frame bases for one or many chains.

  Args:
      coords (np.ndarray): (n, 3) or (B, n, 3) C-alpha coordinates.

  Returns:
      np.ndarray: (..., n, 3, 3) bases whose columns are e1, e2, e3.
  """
  coords = np.asarray(coords, dtype=np.float64)
  n = coords.shape[-2]
  if n < 3:
    raise GeometryError(f'Local frames need at least 3 residues, got {n}.')
  idx = np.arange(n)
  ahead = idx + 1
  ahead[-1] = n - 2
  behind = idx - 1
  behind[0] = 2
  behind[-1] = n - 3
  v1 = coords[..., ahead, :] - coords
  v2 = coords[..., behind, :] - coords
  return _orthonormal_frames(v1, v2)


def build_local_frames(s: Union[Structure, np.ndarray]) -> list[LocalFrame]:
  ca = s.ca if isinstance(s, Structure) else geom.as_coords(s)
  return [LocalFrame(basis, origin) for basis, origin in zip(frame_bases(ca), ca)]


#### Encoder / Decoder ####

class WatermarkEncoder(Module):
  """
  W(x, m): invariant residue embeddings conditioned on a learned embedding of
  the code (as a ±1 vector) feed a zero-initialized head that emits one
  frame-local displacement per residue, bounded elementwise by delta_max.
  """

  def __init__(self, code_length: int = 8, width: int = 32, rounds: int = 2,
               k_neighbors: int = DEFAULT_K_NEIGHBORS, delta_max: float = DELTA_MAX, seed: int = 0):
    super().__init__('encoder')
    if code_length not in SUPPORTED_CODE_LENGTHS:
      raise CodeLengthError(f'Unsupported code length {code_length}.')
    rng = np.random.default_rng([seed, 11])
    self.code_length = code_length
    self.width = width
    self.rounds = rounds
    self.k_neighbors = k_neighbors
    self.delta_max = delta_max
    self.seed = seed
    self.code_embed = self.add_child('code_embed', LinearLayer('encoder.code_embed', code_length, width, rng))
    self.trunk = self.add_child('trunk', MessagePassingStack('encoder.trunk', width, rounds, rng))
    self.head = self.add_child('head', LinearLayer('encoder.head', width, 3, zero_init=True))

  def arch(self) -> dict:
    return dict(code_length=self.code_length, width=self.width, rounds=self.rounds,
                k_neighbors=self.k_neighbors, delta_max=self.delta_max, seed=self.seed)

  def displacement(self, coords: np.ndarray, codes: np.ndarray) -> Tensor:
    """
    World-frame displacement for every residue.

    Args:
        coords (np.ndarray): (B, n, 3) coordinates.
        codes (np.ndarray): (B, l) 0/1 code matrix.

    Returns:
        Tensor: (B, n, 3) displacement, differentiable in the parameters.
    """
    coords = np.asarray(coords, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[-1] != self.code_length:
      raise CodeLengthError(f'Encoder expects {self.code_length}-bit codes, got code matrix {codes.shape}.')
    batch = coords.shape[0]
    feats = invariant_features(coords, self.k_neighbors)
    embed = T.reshape(self.code_embed(2.0 * codes - 1.0), (batch, 1, self.width))
    h = self.trunk(feats, node_input=embed)
    local = T.tanh(self.head(h)) * self.delta_max
    bases = frame_bases(coords)
    return T.tsum(T.mul(bases, T.reshape(local, local.shape[:2] + (1, 3))), axis=-1)

  def __call__(self, coords: np.ndarray, codes: np.ndarray) -> Tensor:
    return T.as_tensor(coords) + self.displacement(coords, codes)


class WatermarkDecoder(Module):
  """
  D(x): mean-pooled invariant residue embeddings projected to one logit per bit.
  """

  def __init__(self, code_length: int = 8, width: int = 32, rounds: int = 2,
               k_neighbors: int = DEFAULT_K_NEIGHBORS, seed: int = 0):
    super().__init__('decoder')
    if code_length not in SUPPORTED_CODE_LENGTHS:
      raise CodeLengthError(f'Unsupported code length {code_length}.')
    rng = np.random.default_rng([seed, 12])
    self.code_length = code_length
    self.width = width
    self.rounds = rounds
    self.k_neighbors = k_neighbors
    self.seed = seed
    self.trunk = self.add_child('trunk', MessagePassingStack('decoder.trunk', width, rounds, rng))
    self.head = self.add_child('head', LinearLayer('decoder.head', width, code_length, rng))

  def arch(self) -> dict:
    return dict(code_length=self.code_length, width=self.width, rounds=self.rounds,
                k_neighbors=self.k_neighbors, seed=self.seed)

  def __call__(self, coords) -> Tensor:
    feats = invariant_features(coords, self.k_neighbors)
    return self.head(T.mean(self.trunk(feats), axis=1))


def encode(s: Structure, m: WatermarkCode, enc: WatermarkEncoder) -> Structure:
  if m.length != enc.code_length:
    raise CodeLengthError(f'Encoder head expects {enc.code_length} bits, got a {m.length}-bit code.')
  moved = enc(s.ca[None], m.as_array()[None]).data[0]
  return s.with_coords(moved)


def decode(s: Union[Structure, np.ndarray], dec: WatermarkDecoder) -> np.ndarray:
  ca = s.ca if isinstance(s, Structure) else np.asarray(s, dtype=np.float64)
  if ca.shape[-2] < 3:
    raise StructureError('Decoding needs at least 3 residues.')
  if ca.ndim == 2:
    return dec(ca[None]).data[0]
  return dec(ca).data


#### Augmentations ####

class AugmentationSpec:
  """
  Structure distortion drawn from the augmentation pool. Batched application
  draws item b from the generator seeded with [seed, b], so a structure-level
  application equals item 0 of a batched one.
  """

  kind = 'identity'

  def __init__(self, seed: int = 0):
    self.seed = int(seed)

  def item_rng(self, b: int) -> np.random.Generator:
    return np.random.default_rng([self.seed, b])

  def apply_tensor(self, x: Tensor) -> Tensor:
    return x

  def apply(self, s: Structure) -> Structure:
    return s

  def to_dict(self) -> dict:
    return dict(kind=self.kind, seed=self.seed)

  def __repr__(self):
    params = ', '.join(f'{k}={v}' for k, v in self.to_dict().items() if k != 'kind')
    return f'{type(self).__name__}({params})'

  @staticmethod
  def deserialize(spec: dict) -> 'AugmentationSpec':
    """
    Deserializes an augmentation from its dictionary form.

    Args:
        spec (dict): {'kind': ..., plus the kind's parameters}
    """
    spec = dict(spec)
    kind = spec.pop('kind', 'identity')
    cls = StructMarkBehavior.AUGMENTATION_TYPES.get(kind)
    if cls is None:
      raise StructureError(f"Unknown augmentation kind '{kind}'.")
    return cls(**spec)


class IdentityAugmentation(AugmentationSpec):
  kind = 'identity'


class RigidAugmentation(AugmentationSpec):
  kind = 'rigid'

  def transform(self, b: int) -> geom.RigidTransform:
    return geom.random_rigid([self.seed, b])

  def apply_tensor(self, x: Tensor) -> Tensor:
    moves = [self.transform(b) for b in range(x.shape[0])]
    rotations_t = np.stack([g.rotation.T for g in moves])
    translations = np.stack([g.translation for g in moves])[:, None, :]
    return T.matmul(x, rotations_t) + translations

  def apply(self, s: Structure) -> Structure:
    return s.transformed(self.transform(0))


class GaussianNoiseAugmentation(AugmentationSpec):
  kind = 'gaussian_noise'

  def __init__(self, sigma: float = 0.2, seed: int = 0):
    super().__init__(seed)
    if sigma < 0:
      raise StructureError(f'Noise sigma must be non-negative, got {sigma}.')
    self.sigma = float(sigma)

  def to_dict(self) -> dict:
    return dict(super().to_dict(), sigma=self.sigma)

  def noise(self, b: int, shape: tuple) -> np.ndarray:
    return self.sigma * self.item_rng(b).standard_normal(shape)

  def apply_tensor(self, x: Tensor) -> Tensor:
    return x + np.stack([self.noise(b, x.shape[1:]) for b in range(x.shape[0])])

  def apply(self, s: Structure) -> Structure:
    if self.sigma == 0.0:
      return s
    return s.with_coords(s.ca + self.noise(0, s.ca.shape))


class CropAugmentation(AugmentationSpec):
  kind = 'crop'

  def __init__(self, keep_fraction: float = 0.5, seed: int = 0):
    super().__init__(seed)
    if not 0.0 < keep_fraction <= 1.0:
      raise StructureError(f'keep_fraction must lie in (0, 1], got {keep_fraction}.')
    self.keep_fraction = float(keep_fraction)

  def to_dict(self) -> dict:
    return dict(super().to_dict(), keep_fraction=self.keep_fraction)

  def kept(self, n: int) -> int:
    keep = math.ceil(self.keep_fraction * n - 1e-9)
    if keep < 3:
      raise StructureError(f'Cropping {n} residues to {keep} leaves fewer than 3.')
    return keep

  def start(self, b: int, n: int) -> int:
    return int(self.item_rng(b).integers(0, n - self.kept(n) + 1))

  def apply_tensor(self, x: Tensor) -> Tensor:
    batch, n, _ = x.shape
    keep = self.kept(n)
    idx = np.stack([self.start(b, n) + np.arange(keep) for b in range(batch)])
    return T.gather_rows(x, idx)

  def apply(self, s: Structure) -> Structure:
    return s.window(self.start(0, s.n_residues), self.kept(s.n_residues))


def augment(s: Structure, spec: AugmentationSpec) -> Structure:
  return spec.apply(s)


def augment_per_item(x: Tensor, augmentations: Sequence[AugmentationSpec]) -> list[tuple[np.ndarray, Tensor]]:
  """
  Applies augmentations[b] to item b of a batch. Crops may leave items with
  different residue counts, so items are regrouped by length.

  Args:
      x (Tensor): (B, n, 3) coordinates.
      augmentations (Sequence[AugmentationSpec]): One distortion per item.

  Returns:
      list[tuple[np.ndarray, Tensor]]: (item indices, stacked items) per
        resulting length, shortest first.
  """
  if len(augmentations) != x.shape[0]:
    raise StructureError(f'Got {len(augmentations)} augmentations for a batch of {x.shape[0]}.')
  groups = defaultdict(list)
  for b, spec in enumerate(augmentations):
    item = spec.apply_tensor(T.getitem(x, slice(b, b + 1)))
    groups[item.shape[1]].append((b, item))
  return [(np.array([b for b, _ in members]), T.concat([item for _, item in members], axis=0))
          for _, members in sorted(groups.items())]


def sample_augmentation(rng: np.random.Generator, identity_prob: float = 0.25,
                        sigma_range: tuple = (0.05, 0.3), keep_range: tuple = (0.5, 0.9)) -> AugmentationSpec:
  """
  Draws one distortion from the pool: identity with probability
  `identity_prob`, otherwise uniformly rigid, Gaussian noise or crop.
  """
  seed = int(rng.integers(0, 2 ** 63))
  if rng.random() < identity_prob:
    return IdentityAugmentation(seed)
  kind = ('rigid', 'gaussian_noise', 'crop')[int(rng.integers(3))]
  if kind == 'rigid':
    return RigidAugmentation(seed)
  if kind == 'gaussian_noise':
    return GaussianNoiseAugmentation(float(rng.uniform(*sigma_range)), seed)
  return CropAugmentation(float(rng.uniform(*keep_range)), seed)


#### Stage-1 Pretraining ####

@dataclass
class CodecConfig:
  code_length: int = 8
  width: int = 32
  rounds: int = 2
  k_neighbors: int = DEFAULT_K_NEIGHBORS
  delta_max: float = DELTA_MAX
  gamma: float = 2.0
  lr: float = 1e-4
  batch_size: int = 64
  epochs: int = 20
  identity_prob: float = 0.25
  keep_best: bool = True
  max_val: int = 64
  seed: int = 0

  @classmethod
  def from_dict(cls, values: dict) -> 'CodecConfig':
    known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
    return cls(**known)


@dataclass
class PretrainLoss:
  total: Tensor
  bce: float
  struct_loss: float
  logits: np.ndarray
  displacement: np.ndarray


def pretrain_loss(encoder: WatermarkEncoder, decoder: WatermarkDecoder, coords: np.ndarray,
                  codes: np.ndarray,
                  augmentation: Union[AugmentationSpec, Sequence[AugmentationSpec], None] = None,
                  gamma: float = 2.0) -> PretrainLoss:
  """
  BCE(D(f(W(x, m))), m) + gamma * mean per-residue displacement norm.

  Args:
      coords (np.ndarray): (B, n, 3) clean coordinates.
      codes (np.ndarray): (B, l) 0/1 codes.
      augmentation: Distortion f shared by the batch, or a sequence holding
        one distortion per item. Identity when omitted.
      gamma (float): Weight of the structure penalty.
  """
  disp = encoder.displacement(coords, codes)
  watermarked = T.as_tensor(coords) + disp
  if augmentation is None or isinstance(augmentation, AugmentationSpec):
    logits = decoder((augmentation or IdentityAugmentation()).apply_tensor(watermarked))
    targets, logits_data = codes, logits.data
  else:
    groups = augment_per_item(watermarked, augmentation)
    order = np.concatenate([idx for idx, _ in groups])
    logits = T.concat([decoder(items) for _, items in groups], axis=0)
    targets = np.asarray(codes)[order]
    logits_data = np.empty_like(logits.data)
    logits_data[order] = logits.data
  bce = T.mean(T.bce_with_logits(logits, targets))
  struct = T.mean(T.norm_last(disp))
  total = bce + struct * gamma
  return PretrainLoss(total, float(bce.data), float(struct.data), logits_data, disp.data)


def evaluate_codec(encoder: WatermarkEncoder, decoder: WatermarkDecoder, structures: Iterable[Structure],
                   seed, batch_size: int = 64, gamma: float = 2.0) -> dict:
  """
  Held-out metrics with fresh random codes and no augmentation.

  Returns:
      dict: {bitacc, rmsd, loss}
  """
  rng = np.random.default_rng(seed)
  correct = total_bits = 0
  rmsds, losses = [], []
  for batch in batch_by_length(list(structures), batch_size):
    coords = batch.coords()
    codes = rng.integers(0, 2, size=(len(batch), encoder.code_length)).astype(np.float64)
    result = pretrain_loss(encoder, decoder, coords, codes, gamma=gamma)
    correct += int(np.sum((result.logits > 0) == (codes > 0.5)))
    total_bits += codes.size
    losses.append(float(result.total.data) * len(batch))
    moved = coords + result.displacement
    rmsds.extend(geom.kabsch(a, b)[1] for a, b in zip(moved, coords))
  count = max(len(rmsds), 1)
  return dict(bitacc=correct / max(total_bits, 1), rmsd=float(np.mean(rmsds)) if rmsds else 0.0,
              loss=sum(losses) / count)


@dataclass
class CodecResult:
  encoder: WatermarkEncoder
  decoder: WatermarkDecoder
  log: list = field(default_factory=list)
  best_epoch: int = -1


def _append_log(path: Optional[Path], record: dict):
  if path is None:
    return
  with open(path, 'a', encoding='utf-8') as f:
    f.write(json.dumps(record, sort_keys=True) + '\n')


def pretrain(d: Union[Dataset, Sequence[Structure]], cfg: Optional[CodecConfig] = None,
             log_path: Optional[Path] = None) -> CodecResult:
  """
  Stage-1 pretraining of the encoder/decoder pair by Adam over same-length
  minibatches. Every sample draws a fresh random code and its own distortion
  from the augmentation pool.

  Args:
      d: Dataset (train/val splits are honored) or list of structures.
      cfg (CodecConfig): Hyperparameters.
      log_path (Path): JSON-lines log, one record per epoch.

  Returns:
      CodecResult: Trained (or best-validation) encoder and decoder plus the log.
  """
  cfg = cfg or CodecConfig()
  if isinstance(d, Dataset):
    train = d.split('train').structures() or d.structures()
    val = d.split('val').structures() or train
  else:
    train = val = list(d)
  if not train:
    raise StructureError('Cannot pretrain on an empty dataset.')
  val = val[:cfg.max_val]

  encoder = WatermarkEncoder(cfg.code_length, cfg.width, cfg.rounds, cfg.k_neighbors, cfg.delta_max, cfg.seed)
  decoder = WatermarkDecoder(cfg.code_length, cfg.width, cfg.rounds, cfg.k_neighbors, cfg.seed)
  optimizer = AdamState(encoder.parameters() + decoder.parameters(), lr=cfg.lr)

  log = []
  best = (math.inf, -1, None)
  for epoch in range(cfg.epochs):
    batches = batch_by_length(train, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))
    bce_sum = struct_sum = 0.0
    with StatusLogger(f'pretrain epoch {epoch + 1}/{cfg.epochs}', total=len(batches), logger=LOGGER) as status:
      for idx, batch in enumerate(batches):
        rng = np.random.default_rng([cfg.seed, epoch, idx])
        codes = rng.integers(0, 2, size=(len(batch), cfg.code_length)).astype(np.float64)
        augmentations = [sample_augmentation(rng, cfg.identity_prob) for _ in range(len(batch))]
        with Tape() as tape:
          loss = pretrain_loss(encoder, decoder, batch.coords(), codes, augmentations, cfg.gamma)
        backward(tape, loss.total)
        optimizer.step()
        bce_sum += loss.bce
        struct_sum += loss.struct_loss
        status.update(bce=loss.bce, struct=loss.struct_loss)

    metrics = evaluate_codec(encoder, decoder, val, [cfg.seed, epoch, 0xE7A1], cfg.batch_size, cfg.gamma)
    record = dict(epoch=epoch, bce=bce_sum / len(batches), struct_loss=struct_sum / len(batches),
                  val_bitacc=metrics['bitacc'], val_rmsd=metrics['rmsd'], val_loss=metrics['loss'])
    log.append(record)
    _append_log(log_path, record)
    LOGGER.info(f"Epoch {epoch}: bce {record['bce']:.4f}, struct {record['struct_loss']:.4f}, "
                f"val bitacc {record['val_bitacc']:.3f}, val rmsd {record['val_rmsd']:.3f}")
    if metrics['loss'] < best[0]:
      best = (metrics['loss'], epoch, (encoder.state_dict(), decoder.state_dict()))

  best_epoch = len(log) - 1
  if cfg.keep_best and best[2] is not None:
    encoder.load_state_dict(best[2][0])
    decoder.load_state_dict(best[2][1])
    best_epoch = best[1]
    LOGGER.info(f'Keeping parameters from epoch {best_epoch} (val loss {best[0]:.4f}).')
  return CodecResult(encoder, decoder, log, best_epoch)


StructMarkBehavior.AUGMENTATION_TYPES.update({
  'identity': IdentityAugmentation,
  'rigid': RigidAugmentation,
  'gaussian_noise': GaussianNoiseAugmentation,
  'crop': CropAugmentation,
})
