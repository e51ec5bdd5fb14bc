"""
Watermark-conditioned low-rank weight modulation.

Every LinearLayer of a base model (attention projections included) gets its
own LoRA pair A·B and gating adapter G(m) = W_g·m + b_g. Under code m the
layer runs with W + α·(G(m) ⊙ A·B), the gate scaling the rows of the update.
"""
from collections import OrderedDict
import logging
from typing import Optional, Sequence, Union

import numpy as np

from structmark.mark.errors import CodeLengthError, ShapeError, StructMarkError
from structmark.mark.models.codec import SUPPORTED_CODE_LENGTHS, WatermarkCode, code_matrix
from structmark.mark.nn import tensor as T
from structmark.mark.nn.layers import LinearLayer, Module, linear_layers
from structmark.mark.nn.tensor import Tensor

LOGGER = logging.getLogger(__name__)

DEFAULT_RANK = 16
LORA_INIT_STD = 0.02
NAMESPACE = 'waterlora'


class GatingAdapter(Module):

  def __init__(self, name: str, rows: int, code_length: int):
    super().__init__(name)
    self.rows = rows
    self.code_length = code_length
    self.W_g = self.add_param('W_g', np.zeros((rows, code_length)))
    self.b_g = self.add_param('b_g', np.ones(rows))

  def __call__(self, codes: np.ndarray) -> Tensor:
    """
    Args:
        codes (np.ndarray): (B, l) 0/1 codes.

    Returns:
        Tensor: (B, rows) gates.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[-1] != self.code_length:
      raise CodeLengthError(f'{self.name}: gate expects {self.code_length}-bit codes, got {codes.shape[-1]} bits.')
    return T.matmul(codes, T.swapaxes(self.W_g, 0, 1)) + self.b_g


class LoRAPair(Module):

  def __init__(self, name: str, rows: int, cols: int, rank: int = DEFAULT_RANK,
               rng: Optional[np.random.Generator] = None):
    super().__init__(name)
    if rank > min(rows, cols):
      raise ShapeError(f'{name}: rank {rank} exceeds min({rows}, {cols}).')
    rng = rng if rng is not None else np.random.default_rng(0)
    self.rank = rank
    self.A = self.add_param('A', LORA_INIT_STD * rng.standard_normal((rows, rank)))
    self.B = self.add_param('B', np.zeros((rank, cols)))

  @classmethod
  def from_arrays(cls, name: str, A: np.ndarray, B: np.ndarray) -> 'LoRAPair':
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    pair = cls(name, A.shape[0], B.shape[1], A.shape[1])
    pair.A.data = np.array(A, dtype=np.float64)
    pair.B.data = np.array(B, dtype=np.float64)
    return pair

  def product(self) -> Tensor:
    return T.matmul(self.A, self.B)


def gate(adapter: GatingAdapter, m: Union[WatermarkCode, Sequence[int], np.ndarray]) -> np.ndarray:
  bits = m.as_array() if isinstance(m, WatermarkCode) else np.asarray(m, dtype=np.float64)
  return adapter(bits[None]).data[0]


def delta_weights(g, lora: LoRAPair):
  """
  Row-scaled low-rank update ΔW[i, j] = G[i]·(A·B)[i, j].

  Args:
      g: (rows,) or (B, rows) gate, array or Tensor.
      lora (LoRAPair): Low-rank factors.

  Returns:
      Same kind as `g`: (rows, cols) or (B, rows, cols).
  """
  if isinstance(g, Tensor):
    return T.mul(T.reshape(g, g.shape + (1,)), lora.product())
  g = np.asarray(g, dtype=np.float64)
  return g[..., None] * (lora.A.data @ lora.B.data)


def merge(base, delta, alpha: float):
  """
  Effective weight W + α·ΔW. `base` is never modified, and α = 0 returns the
  base weight itself.
  """
  base_shape = base.shape
  if tuple(delta.shape[-2:]) != tuple(base_shape):
    raise ShapeError(f'Cannot merge an update of shape {delta.shape} into a weight of shape {base_shape}.')
  if alpha == 0.0:
    return base if isinstance(base, Tensor) else np.array(base)
  if isinstance(base, Tensor) or isinstance(delta, Tensor):
    return T.as_tensor(base) + T.as_tensor(delta) * alpha
  return np.asarray(base) + alpha * np.asarray(delta)


class LayerAdapter(Module):
  """
  Gate and low-rank pair wrapping one LinearLayer. The rank is capped at
  min(out_features, in_features) for narrow layers such as the coordinate head.
  """

  def __init__(self, layer: LinearLayer, code_length: int, rank: int, rng: np.random.Generator):
    super().__init__(f'{NAMESPACE}.{layer.name}')
    if rank < 1:
      raise ShapeError(f'{self.name}: rank must be at least 1, got {rank}.')
    self.layer = layer
    self.requested_rank = rank
    self.rank = min(rank, layer.out_features, layer.in_features)
    if self.rank < rank:
      LOGGER.info(f'{self.name}: rank capped from {rank} to {self.rank} for a '
                  f'{layer.out_features}x{layer.in_features} weight.')
    self.gate = self.add_child('gate', GatingAdapter(f'{self.name}.gate', layer.out_features, code_length))
    self.lora = self.add_child('lora', LoRAPair(f'{self.name}.lora', layer.out_features, layer.in_features,
                                                self.rank, rng))

  def scaled_delta(self, codes: np.ndarray, alpha: float) -> Tensor:
    return delta_weights(self.gate(codes), self.lora) * alpha

  def effective_weight(self, code: WatermarkCode, alpha: float) -> np.ndarray:
    delta = delta_weights(gate(self.gate, code), self.lora)
    return merge(self.layer.W.data, delta, alpha)


class WaterLoRAModel(Module):
  """
  Adapters attached to every LinearLayer of `base`. The base model is not a
  child, so this module's parameters are exactly the adapter parameters.
  """

  def __init__(self, base: Module, code_length: int = 8, rank: int = DEFAULT_RANK, alpha: float = 1.0,
               seed: int = 0):
    super().__init__(NAMESPACE)
    if code_length not in SUPPORTED_CODE_LENGTHS:
      raise CodeLengthError(f'Unsupported code length {code_length}.')
    rng = np.random.default_rng([seed, 31])
    self.base = base
    self.code_length = code_length
    self.rank = rank
    self.alpha = alpha
    self.seed = seed
    self.active_context = None
    self.adapters = OrderedDict()
    for layer in linear_layers(base):
      self.adapters[layer.name] = self.add_child(layer.name, LayerAdapter(layer, code_length, rank, rng))
    LOGGER.debug(f'Attached adapters to {len(self.adapters)} linear layers of "{base.name}".')

  def arch(self) -> dict:
    return dict(code_length=self.code_length, rank=self.rank, alpha=self.alpha, seed=self.seed)

  @property
  def wrapped_layers(self) -> list[str]:
    return list(self.adapters)

  def merged_state(self, code: WatermarkCode, alpha: Optional[float] = None) -> OrderedDict:
    """
    Base parameter state with every wrapped weight replaced by W + α·ΔW(code),
    e.g. to ship a single-user model without adapters.
    """
    alpha = self.alpha if alpha is None else alpha
    state = self.base.state_dict()
    for adapter in self.adapters.values():
      state[adapter.layer.W.name] = adapter.effective_weight(code, alpha)
    return state

  def context(self, codes, alpha: Optional[float] = None) -> 'WaterLoRAContext':
    return WaterLoRAContext(self, codes, self.alpha if alpha is None else alpha)

  def __call__(self, x_t: np.ndarray, t, codes=None, alpha: Optional[float] = None) -> Tensor:
    if codes is None:
      return self.base(x_t, t)
    return self.base(x_t, t, self.context(codes, alpha).modulation(len(x_t)))


def attach(model: Module, code_length: int = 8, rank: int = DEFAULT_RANK, alpha: float = 1.0,
           seed: int = 0) -> WaterLoRAModel:
  """
  Wraps every linear layer of a trained model and freezes its base weights.
  """
  model.set_trainable(False)
  wrapped = WaterLoRAModel(model, code_length, rank, alpha, seed)
  LOGGER.info(f'WaterLoRA: {len(wrapped.adapters)} layers wrapped, rank {rank}, '
              f'{sum(p.data.size for p in wrapped.parameters())} trainable values.')
  return wrapped


class WeightModulation:
  """
  Per-call weight updates α·ΔW(m) for one batch of codes. Layers without an
  adapter run on their base weight alone.
  """

  def __init__(self, wrapped: WaterLoRAModel, codes: np.ndarray, alpha: float):
    self.wrapped = wrapped
    self.codes = codes
    self.alpha = alpha
    self._cache = {}

  def delta_for(self, layer: LinearLayer) -> Optional[Tensor]:
    adapter = self.wrapped.adapters.get(layer.name)
    if adapter is None or adapter.layer is not layer:
      return None
    if layer.name not in self._cache:
      self._cache[layer.name] = adapter.scaled_delta(self.codes, self.alpha)
    return self._cache[layer.name]


class WaterLoRAContext:
  """
  Codes and scaling factor under which a wrapped model runs. A single code is
  broadcast to the whole batch; otherwise there is one code per batch item.
  """

  def __init__(self, wrapped: WaterLoRAModel, codes, alpha: float = 1.0):
    if isinstance(codes, WatermarkCode):
      codes = [codes]
    self.wrapped = wrapped
    self.codes = code_matrix(codes)
    if self.codes.ndim != 2 or self.codes.shape[1] != wrapped.code_length:
      raise CodeLengthError(f'Adapters expect {wrapped.code_length}-bit codes, got {self.codes.shape}.')
    self.alpha = float(alpha)

  def __enter__(self) -> 'WaterLoRAContext':
    if self.wrapped.active_context is not None:
      raise StructMarkError('Another WaterLoRA context is already active on this model.')
    self.wrapped.active_context = self
    return self

  def __exit__(self, *exc):
    self.wrapped.active_context = None
    return False

  def modulation(self, batch: int) -> Optional[WeightModulation]:
    if self.alpha == 0.0:
      return None
    codes = self.codes
    if codes.shape[0] == 1 and batch != 1:
      codes = np.repeat(codes, batch, axis=0)
    if codes.shape[0] != batch:
      raise ShapeError(f'Context holds {codes.shape[0]} codes for a batch of {batch}.')
    return WeightModulation(self.wrapped, codes, self.alpha)
