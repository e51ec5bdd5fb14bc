"""
Parameter containers and the layer types the models are composed of.
"""
from collections import OrderedDict
import logging
import math
from typing import Iterator, Optional

import numpy as np

from structmark.mark.errors import ShapeError
from structmark.mark.nn import tensor as T
from structmark.mark.nn.tensor import Parameter, Tensor

LOGGER = logging.getLogger(__name__)


class Module:
  """
  Named collection of parameters and child modules. Parameter names are the
  dot-joined path from the root module and must be unique within a model.
  """

  def __init__(self, name: str):
    self.name = name
    self._params = OrderedDict()
    self._children = OrderedDict()

  def add_param(self, key: str, data: np.ndarray) -> Parameter:
    param = Parameter(np.array(data, dtype=np.float64), f'{self.name}.{key}')
    self._params[key] = param
    return param

  def add_child(self, key: str, module: 'Module') -> 'Module':
    self._children[key] = module
    return module

  def children(self) -> Iterator['Module']:
    return iter(self._children.values())

  def modules(self) -> Iterator['Module']:
    yield self
    for child in self._children.values():
      yield from child.modules()

  def named_parameters(self) -> 'OrderedDict[str, Parameter]':
    params = OrderedDict()
    for module in self.modules():
      for param in module._params.values():
        if param.name in params:
          raise ShapeError(f'Duplicate parameter name "{param.name}"')
        params[param.name] = param
    return params

  def parameters(self) -> list[Parameter]:
    return list(self.named_parameters().values())

  def trainable_parameters(self) -> list[Parameter]:
    return [p for p in self.parameters() if p.requires_grad]

  def set_trainable(self, trainable: bool):
    for param in self.parameters():
      param.requires_grad = trainable
      param.zero_grad()

  def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
    return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters().items())

  def load_state_dict(self, state: dict, strict: bool = True):
    params = self.named_parameters()
    if strict:
      missing = set(params) - set(state)
      unexpected = set(state) - set(params)
      if missing or unexpected:
        raise ShapeError(f'State mismatch for "{self.name}": missing {sorted(missing)}, unexpected {sorted(unexpected)}')
    for name, value in state.items():
      if name not in params:
        continue
      value = np.asarray(value, dtype=np.float64)
      if value.shape != params[name].shape:
        raise ShapeError(f'Parameter "{name}" expects shape {params[name].shape}, got {value.shape}')
      params[name].data = value.copy()
      params[name].zero_grad()

  def __repr__(self):
    return f'<{type(self).__name__} {self.name}>'


class LinearLayer(Module):
  """
  y = x·Wᵀ + bias with W of shape [out × in].

  A `modulation` (see models.waterlora) may supply a per-sample additive update
  ΔW of shape [B × out × in], giving y = x·(W + ΔW)ᵀ + bias. The base term is
  computed exactly as in the unmodulated path.
  """

  def __init__(self, name: str, in_features: int, out_features: int,
               rng: Optional[np.random.Generator] = None, zero_init: bool = False):
    super().__init__(name)
    self.in_features = in_features
    self.out_features = out_features
    if zero_init or rng is None:
      weight = np.zeros((out_features, in_features))
    else:
      weight = rng.standard_normal((out_features, in_features)) / math.sqrt(in_features)
    self.W = self.add_param('W', weight)
    self.bias = self.add_param('bias', np.zeros(out_features))

  def __call__(self, x, modulation=None) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != self.in_features:
      raise ShapeError(f'{self.name}: expected last dimension {self.in_features}, got input of shape {x.shape}')
    out = T.matmul(x, T.swapaxes(self.W, 0, 1)) + self.bias
    delta = modulation.delta_for(self) if modulation is not None else None
    if delta is None:
      return out

    # Per-sample update: [B, out, in] -> [B, 1.., in, out] against x [B, ..., in].
    batch = delta.shape[0]
    if x.ndim < 3 or x.shape[0] != batch:
      raise ShapeError(f'{self.name}: modulated weights need a batched input with leading dimension {batch}, got {x.shape}')
    delta_t = T.reshape(T.swapaxes(delta, -1, -2),
                        (batch,) + (1,) * (x.ndim - 3) + (self.in_features, self.out_features))
    return out + T.matmul(x, delta_t)


class AttentionLayer(Module):
  """
  Multi-head scaled dot-product attention over residue positions with a learned
  additive bias per head and clipped sequence offset.
  """

  MAX_OFFSET = 32

  def __init__(self, name: str, width: int, heads: int, rng: Optional[np.random.Generator] = None):
    super().__init__(name)
    if width % heads != 0:
      raise ShapeError(f'{name}: width {width} is not divisible by {heads} heads')
    self.width = width
    self.heads = heads
    self.query = self.add_child('query', LinearLayer(f'{name}.query', width, width, rng))
    self.key = self.add_child('key', LinearLayer(f'{name}.key', width, width, rng))
    self.value = self.add_child('value', LinearLayer(f'{name}.value', width, width, rng))
    self.output = self.add_child('output', LinearLayer(f'{name}.output', width, width, rng))
    self.offset_bias = self.add_param('offset_bias', np.zeros((heads, 2 * self.MAX_OFFSET + 1)))

  def projections(self) -> list[LinearLayer]:
    return [self.query, self.key, self.value, self.output]

  def _split_heads(self, x: Tensor, batch: int, n: int) -> Tensor:
    return T.swapaxes(T.reshape(x, (batch, n, self.heads, self.width // self.heads)), 1, 2)

  def __call__(self, x, modulation=None) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != self.width:
      raise ShapeError(f'{self.name}: expected input [B, n, {self.width}], got {x.shape}')
    batch, n, _ = x.shape
    q = self._split_heads(self.query(x, modulation), batch, n)
    k = self._split_heads(self.key(x, modulation), batch, n)
    v = self._split_heads(self.value(x, modulation), batch, n)

    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.width // self.heads))
    positions = np.arange(n)
    offsets = np.clip(positions[None, :] - positions[:, None], -self.MAX_OFFSET, self.MAX_OFFSET) + self.MAX_OFFSET
    scores = scores + T.getitem(self.offset_bias, (slice(None), offsets))
    attended = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.swapaxes(attended, 1, 2), (batch, n, self.width))
    return self.output(merged, modulation)


def linear_layers(module: Module) -> list[LinearLayer]:
  """
  Every LinearLayer in a model, attention projections included, in definition order.
  """
  return [m for m in module.modules() if isinstance(m, LinearLayer)]


def sinusoidal_embedding(values: np.ndarray, channels: int, max_period: float = 1000.0) -> np.ndarray:
  """
  Standard sin/cos embedding of scalar values (e.g. diffusion time steps).

  Args:
      values (np.ndarray): (B,) scalars.
      channels (int): Even embedding width.
  """
  half = channels // 2
  freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
  angles = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
  return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
