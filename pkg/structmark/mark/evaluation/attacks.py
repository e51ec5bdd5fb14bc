"""
Post-processing and adaptive attacks against watermarked structures and the
watermarked generator, and the attack suite that scores them.
"""
import copy
from dataclasses import dataclass
import logging
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from structmark.mark.errors import AttackError, StructureError
from structmark.mark.evaluation.evalkit import ReportRow, bit_accuracy, binomial_pvalue, detection_threshold, make_run_id
from structmark.mark.models.codec import (CropAugmentation, GaussianNoiseAugmentation, RigidAugmentation,
                                          WatermarkCode, WatermarkDecoder, WatermarkEncoder, augment, decode, encode)
from structmark.mark.models.genmodel import denoising_loss, sample_many, scaled_coords
from structmark.mark.models.waterlora import WaterLoRAModel
from structmark.mark.nn.optim import AdamState
from structmark.mark.nn.tensor import Tape, backward
from structmark.mark.pluginmgr import StructMarkBehavior
from structmark.mark.structure import geom
from structmark.mark.structure.struct_io import Dataset, Structure, batch_by_length

LOGGER = logging.getLogger(__name__)


class AttackSpec:
  """
  Base attack: leaves structures untouched.
  """

  kind = 'none'
  model_level = False

  def __init__(self, seed: int = 0):
    self.seed = int(seed)

  def item_seed(self, index: int) -> int:
    return int(np.random.default_rng([self.seed, index]).integers(0, 2 ** 63))

  def apply(self, s: Structure, index: int = 0, encoder: Optional[WatermarkEncoder] = None,
            original: Optional[WatermarkCode] = None) -> Structure:
    return s

  def to_dict(self) -> dict:
    return dict(kind=self.kind, seed=self.seed)

  @property
  def label(self) -> str:
    return self.kind

  def __repr__(self):
    return f'<{type(self).__name__} {self.to_dict()}>'


class NoAttack(AttackSpec):
  kind = 'none'


class CropAttack(AttackSpec):
  kind = 'crop'

  def __init__(self, keep: float = 0.5, seed: int = 0):
    super().__init__(seed)
    if not 0.0 < keep <= 1.0:
      raise AttackError(f'Crop keep fraction must lie in (0, 1], got {keep}')
    self.keep = float(keep)

  def apply(self, s, index=0, encoder=None, original=None):
    try:
      return augment(s, CropAugmentation(self.keep, self.item_seed(index)))
    except StructureError as err:
      raise AttackError(str(err)) from err

  def to_dict(self):
    return dict(super().to_dict(), keep=self.keep)


class RigidAttack(AttackSpec):
  kind = 'rigid'

  def apply(self, s, index=0, encoder=None, original=None):
    return augment(s, RigidAugmentation(self.item_seed(index)))


class NoiseAttack(AttackSpec):
  kind = 'noise'

  def __init__(self, sigma: float = 0.2, seed: int = 0):
    super().__init__(seed)
    if sigma < 0:
      raise AttackError(f'Noise sigma must be non-negative, got {sigma}')
    self.sigma = float(sigma)

  def apply(self, s, index=0, encoder=None, original=None):
    return augment(s, GaussianNoiseAugmentation(self.sigma, self.item_seed(index)))

  def to_dict(self):
    return dict(super().to_dict(), sigma=self.sigma)


class MultiMessageAttack(AttackSpec):
  """
  Layers a second code onto an already watermarked structure with the
  published Stage-1 encoder.
  """

  kind = 'multi_message'

  def __init__(self, code: Optional[str] = None, seed: int = 0):
    super().__init__(seed)
    self.code = WatermarkCode.from_string(code) if isinstance(code, str) else code

  def second_code(self, index: int, length: int, original: Optional[WatermarkCode]) -> WatermarkCode:
    if self.code is not None:
      if original is not None and self.code == original:
        raise AttackError('The multi-message code must differ from the original code.')
      return self.code
    rng = np.random.default_rng([self.seed, index, 1])
    while True:
      code = WatermarkCode.random(rng, length)
      if original is None or code != original:
        return code

  def apply(self, s, index=0, encoder=None, original=None):
    if encoder is None:
      raise AttackError('The multi-message attack needs the Stage-1 encoder.')
    return encode(s, self.second_code(index, encoder.code_length, original), encoder)

  def to_dict(self):
    record = super().to_dict()
    if self.code is not None:
      record['code'] = self.code.to_string()
    return record


class FinetuneEraseAttack(AttackSpec):
  """
  Continues plain noise-matching training of the released adapters on clean
  structures. `steps=None` runs one pass over the clean corpus.
  """

  kind = 'finetune_erase'
  model_level = True

  def __init__(self, steps: Optional[int] = None, lr: float = 1e-4, batch_size: int = 64, seed: int = 0):
    super().__init__(seed)
    self.steps = steps
    self.lr = lr
    self.batch_size = batch_size

  def to_dict(self):
    return dict(super().to_dict(), steps=self.steps, lr=self.lr, batch_size=self.batch_size)


class AttackManager:

  @staticmethod
  def register_attack_type(name: str, cls):
    StructMarkBehavior.register(StructMarkBehavior.ATTACK_TYPES, name, cls, replace=True)

  @staticmethod
  def deserialize(spec: dict) -> AttackSpec:
    """
    Deserializes an attack from its configuration dictionary.

    Args:
        spec (dict): {'kind': ..., plus the attack's parameters}
    """
    spec = dict(spec)
    kind = spec.pop('kind', 'none')
    cls = StructMarkBehavior.ATTACK_TYPES.get(kind)
    if cls is None:
      raise AttackError(f"Unknown attack kind '{kind}'")
    try:
      return cls(**spec)
    except TypeError as err:
      raise AttackError(f"Bad parameters for attack '{kind}': {err}") from err


def default_suite(seed: int = 0) -> list[AttackSpec]:
  return [NoAttack(seed), CropAttack(0.5, seed), RigidAttack(seed), NoiseAttack(0.2, seed),
          FinetuneEraseAttack(seed=seed), MultiMessageAttack(seed=seed)]


def attack_structure(s: Structure, spec: AttackSpec, encoder: Optional[WatermarkEncoder] = None,
                     original: Optional[WatermarkCode] = None, index: int = 0) -> Structure:
  if spec.model_level:
    raise AttackError(f"'{spec.kind}' attacks the model, not a structure.")
  return spec.apply(s, index, encoder, original)


def attack_model_finetune(wrapped: WaterLoRAModel, clean: Union[Dataset, Sequence[Structure]],
                          steps: Optional[int] = None, lr: float = 1e-4, batch_size: int = 64,
                          seed: int = 0) -> WaterLoRAModel:
  """
  Fine-tunes a copy of the released adapters on clean data with the plain
  denoising objective under random codes. The input model is not modified.

  Args:
      wrapped (WaterLoRAModel): Watermarked generator (base + adapters).
      clean: Unwatermarked structures.
      steps (int): Adam steps; one pass over `clean` when None.
  """
  attacked = copy.deepcopy(wrapped)
  structures = clean.structures() if isinstance(clean, Dataset) else list(clean)
  if steps == 0:
    return attacked
  if not structures:
    raise AttackError('The fine-tune attack needs clean structures.')
  attacked.base.set_trainable(False)
  optimizer = AdamState(attacked.parameters(), lr=lr)
  schedule = attacked.base.schedule

  done = 0
  epoch = 0
  while steps is None or done < steps:
    batches = batch_by_length(structures, batch_size, np.random.default_rng([seed, epoch, 3]))
    for idx, batch in enumerate(batches):
      rng = np.random.default_rng([seed, epoch, idx, 3])
      x0 = scaled_coords(batch.coords())
      codes = rng.integers(0, 2, size=(len(batch), attacked.code_length)).astype(np.float64)
      t = rng.integers(1, schedule.steps + 1, size=len(batch))
      noise = rng.standard_normal(x0.shape)
      with Tape() as tape:
        loss = denoising_loss(attacked.base, x0, t, noise, attacked.context(codes).modulation(len(batch)))
      backward(tape, loss)
      optimizer.step()
      done += 1
      if steps is not None and done >= steps:
        break
    if steps is None:
      break
    epoch += 1
  LOGGER.info(f'Fine-tune attack ran {done} steps.')
  return attacked


@dataclass
class SystemBundle:
  """
  Everything an evaluation needs: the watermarked generator, the decoder used
  downstream, the Stage-1 encoder and a clean corpus for adaptive attacks.
  """
  wrapped: WaterLoRAModel
  decoder: WatermarkDecoder
  encoder: Optional[WatermarkEncoder] = None
  clean: Optional[Sequence[Structure]] = None
  config_hash: str = ''
  model_tag: str = 'toy-diffusion'
  n_residues: int = 56


def _retained_rmsd(attacked: Structure, original: Structure) -> float:
  keep = np.isin(original.seq_index, attacked.seq_index)
  reference = original.ca[keep]
  if np.array_equal(reference, attacked.ca):
    return 0.0
  return geom.kabsch(attacked.ca, reference)[1]


def run_attack_suite(system: SystemBundle, specs: Iterable[AttackSpec], n_samples: int, seed) -> list[ReportRow]:
  """
  Samples watermarked structures under random codes, applies every attack and
  reports mean bit accuracy per attack.

  Args:
      system (SystemBundle): Trained system.
      specs (Iterable[AttackSpec]): Attacks; put NoAttack first for a baseline.
      n_samples (int): Structures per attack.
      seed: Seed for codes and sampling.
  """
  wrapped, decoder = system.wrapped, system.decoder
  l = wrapped.code_length
  rng = np.random.default_rng([seed, 0xA77])
  codes = [WatermarkCode.random(rng, l) for _ in range(n_samples)]
  seeds = [[int(s), 9] for s in rng.integers(0, 2 ** 31, size=n_samples)]
  samples = sample_many(wrapped.base, system.n_residues, seeds, wrapped.context(codes))
  tau = detection_threshold(l)
  fpr = binomial_pvalue(int(np.ceil(tau * l - 1e-9)), l)
  run_id = make_run_id(system.config_hash, seed)

  rows = []
  for spec in specs:
    if spec.model_level:
      attacked_model = attack_model_finetune(wrapped, system.clean or [], spec.steps, spec.lr,
                                             spec.batch_size, spec.seed)
      attacked = sample_many(attacked_model.base, system.n_residues, seeds, attacked_model.context(codes))
    else:
      attacked = [attack_structure(s, spec, system.encoder, code, i)
                  for i, (s, code) in enumerate(zip(samples, codes))]
    accuracy = float(np.mean([bit_accuracy(decode(s, decoder), code) for s, code in zip(attacked, codes)]))
    rmsd = float(np.mean([_retained_rmsd(a, s) for a, s in zip(attacked, samples)]))
    LOGGER.info(f'Attack {spec.label}: bit accuracy {accuracy:.4f}, rmsd {rmsd:.3f}')
    rows.append(ReportRow(run_id, system.model_tag, l, spec.label, accuracy, rmsd, fpr, None,
                          n_samples, str(seed)))
  return rows


StructMarkBehavior.ATTACK_TYPES.update({
  'none': NoAttack,
  'crop': CropAttack,
  'rigid': RigidAttack,
  'noise': NoiseAttack,
  'finetune_erase': FinetuneEraseAttack,
  'multi_message': MultiMessageAttack,
})
