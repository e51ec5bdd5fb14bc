"""
Dense float64 tensors with reverse-mode gradients recorded on an explicit tape.

Operations record themselves on the innermost active `Tape` whenever one of
their inputs requires a gradient. Nothing is recorded outside a tape, which is
how inference (sampling, evaluation) runs.
"""
import logging
import os
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from structmark.mark.errors import ShapeError

LOGGER = logging.getLogger(__name__)

CHECK_FINITE = bool(os.environ.get('STRUCTMARK_DEBUG'))
"""
When set, every operation asserts its output is finite.
"""

_LOCAL = threading.local()


def set_debug(enabled: bool):
  global CHECK_FINITE
  CHECK_FINITE = enabled


class Tape:
  """
  Ordered record of the operations executed while the tape is active.
  """

  def __init__(self):
    self.records = []

  def __enter__(self) -> 'Tape':
    stack = getattr(_LOCAL, 'tapes', None)
    if stack is None:
      stack = _LOCAL.tapes = []
    stack.append(self)
    return self

  def __exit__(self, *exc):
    _LOCAL.tapes.pop()
    return False

  @staticmethod
  def current() -> Optional['Tape']:
    stack = getattr(_LOCAL, 'tapes', None)
    return stack[-1] if stack else None

  def record(self, out: 'Tensor', inputs: Sequence['Tensor'], backward_fn: Callable):
    self.records.append((out, tuple(inputs), backward_fn))

  def __len__(self):
    return len(self.records)


class Tensor:
  __array_priority__ = 100
  __array_ufunc__ = None

  def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
    self.data = np.asarray(data, dtype=np.float64)
    self.requires_grad = requires_grad
    self.grad = None
    self.name = name
    self.is_leaf = True

  @property
  def shape(self) -> tuple:
    return self.data.shape

  @property
  def ndim(self) -> int:
    return self.data.ndim

  def numpy(self) -> np.ndarray:
    return self.data

  def __repr__(self):
    label = f' {self.name}' if self.name else ''
    return f'<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>'

  def __add__(self, other):
    return add(self, other)

  def __radd__(self, other):
    return add(other, self)

  def __sub__(self, other):
    return sub(self, other)

  def __rsub__(self, other):
    return sub(other, self)

  def __mul__(self, other):
    return mul(self, other)

  def __rmul__(self, other):
    return mul(other, self)

  def __truediv__(self, other):
    return div(self, other)

  def __rtruediv__(self, other):
    return div(other, self)

  def __neg__(self):
    return neg(self)

  def __matmul__(self, other):
    return matmul(self, other)

  def __rmatmul__(self, other):
    return matmul(other, self)

  def __getitem__(self, index):
    return getitem(self, index)

  def reshape(self, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
      shape = tuple(shape[0])
    return reshape(self, shape)

  def swapaxes(self, a: int, b: int):
    return swapaxes(self, a, b)

  def sum(self, axis=None, keepdims: bool = False):
    return tsum(self, axis, keepdims)

  def mean(self, axis=None, keepdims: bool = False):
    return mean(self, axis, keepdims)


class Parameter(Tensor):
  """
  Named trainable tensor. The gradient buffer always exists and is zeroed by
  the optimizer after every step.
  """

  def __init__(self, data, name: str, requires_grad: bool = True):
    super().__init__(data, requires_grad=requires_grad, name=name)
    self.grad = np.zeros_like(self.data)

  def zero_grad(self):
    self.grad = np.zeros_like(self.data)

  def __repr__(self):
    return f'<Parameter {self.name} shape={self.shape} trainable={self.requires_grad}>'


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
  return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
  requires_grad = any(t.requires_grad for t in inputs)
  out = Tensor(data, requires_grad=requires_grad)
  out.is_leaf = False
  if CHECK_FINITE and not np.all(np.isfinite(out.data)):
    raise FloatingPointError(f'Non-finite values produced by {getattr(backward_fn, "__qualname__", backward_fn)}')
  if requires_grad:
    tape = Tape.current()
    if tape is not None:
      tape.record(out, inputs, backward_fn)
  return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
  while grad.ndim > len(shape):
    grad = grad.sum(axis=0)
  for axis, extent in enumerate(shape):
    if extent == 1 and grad.shape[axis] != 1:
      grad = grad.sum(axis=axis, keepdims=True)
  return grad


def backward(tape: Tape, outputs: Union[Tensor, Sequence[Tensor]],
             output_grads: Optional[Union[np.ndarray, Sequence[np.ndarray]]] = None):
  """
  Propagates gradients from `outputs` back through the tape, accumulating them
  into the `.grad` buffers of leaf tensors (parameters and marked inputs).

  Args:
      tape (Tape): Tape recorded during the forward pass.
      outputs: Output tensor or tensors.
      output_grads: Seed gradients; ones when omitted.
  """
  if isinstance(outputs, Tensor):
    outputs = [outputs]
    output_grads = None if output_grads is None else [output_grads]
  if output_grads is None:
    output_grads = [np.ones_like(o.data) for o in outputs]

  pending = {}
  for out, grad in zip(outputs, output_grads):
    pending[id(out)] = np.asarray(grad, dtype=np.float64)

  for out, inputs, backward_fn in reversed(tape.records):
    grad = pending.pop(id(out), None)
    if grad is None:
      continue
    for tensor, tensor_grad in zip(inputs, backward_fn(grad)):
      if tensor_grad is None or not tensor.requires_grad:
        continue
      if tensor.is_leaf:
        if tensor.grad is None:
          tensor.grad = np.array(tensor_grad, dtype=np.float64)
        else:
          tensor.grad = tensor.grad + tensor_grad
      else:
        key = id(tensor)
        pending[key] = pending[key] + tensor_grad if key in pending else tensor_grad


#### Elementwise ####

def add(a: TensorLike, b: TensorLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  return _result(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  return _result(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  return _result(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  return _result(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: TensorLike) -> Tensor:
  a = as_tensor(a)
  return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: TensorLike) -> Tensor:
  a = as_tensor(a)
  out = np.exp(a.data)
  return _result(out, (a,), lambda g: (g * out,))


def sqrt(a: TensorLike) -> Tensor:
  a = as_tensor(a)
  out = np.sqrt(a.data)
  return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: TensorLike) -> Tensor:
  a = as_tensor(a)
  out = np.tanh(a.data)
  return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
  return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: TensorLike) -> Tensor:
  a = as_tensor(a)
  s = sigmoid_np(a.data)
  return _result(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def square(a: TensorLike) -> Tensor:
  a = as_tensor(a)
  return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


#### Reductions and Shapes ####

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
  if axis is None:
    return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
  if not keepdims:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    g = np.expand_dims(g, axes)
  return np.broadcast_to(g, shape)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
  a = as_tensor(a)
  return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
  a = as_tensor(a)
  out = np.mean(a.data, axis=axis, keepdims=keepdims)
  count = a.data.size / max(np.size(out), 1)
  return _result(out, (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,))


def reshape(a: TensorLike, shape: tuple) -> Tensor:
  a = as_tensor(a)
  return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: TensorLike, x: int, y: int) -> Tensor:
  a = as_tensor(a)
  return _result(np.swapaxes(a.data, x, y), (a,), lambda g: (np.swapaxes(g, x, y),))


def broadcast_to(a: TensorLike, shape: tuple) -> Tensor:
  a = as_tensor(a)
  return _result(np.array(np.broadcast_to(a.data, shape)), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Iterable[TensorLike], axis: int = -1) -> Tensor:
  tensors = [as_tensor(t) for t in tensors]
  sizes = [t.shape[axis] for t in tensors]
  bounds = np.cumsum(sizes)[:-1]

  def backward_fn(g):
    return tuple(np.split(g, bounds, axis=axis))
  return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def getitem(a: TensorLike, index) -> Tensor:
  """
  Basic or advanced indexing; repeated indices accumulate their gradients.
  """
  a = as_tensor(a)

  def backward_fn(g):
    out = np.zeros_like(a.data)
    np.add.at(out, index, g)
    return (out,)
  return _result(a.data[index], (a,), backward_fn)


def gather_rows(h: TensorLike, idx: np.ndarray) -> Tensor:
  """
  Per-batch row gather: out[b, ...] = h[b, idx[b, ...]].

  Args:
      h (Tensor): (B, n, ...) tensor.
      idx (np.ndarray): (B, *S) integer indices into axis 1.

  Returns:
      Tensor: (B, *S, ...) gathered rows.
  """
  idx = np.asarray(idx)
  batch = np.arange(idx.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
  return getitem(h, (batch, idx))


#### Linear Algebra ####

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  if a.ndim < 2 or b.ndim < 2:
    raise ShapeError(f'matmul needs operands of rank >= 2, got {a.shape} and {b.shape}')
  if a.shape[-1] != b.shape[-2]:
    raise ShapeError(f'matmul shape mismatch: {a.shape} @ {b.shape}')

  def backward_fn(g):
    ga = g @ np.swapaxes(b.data, -1, -2)
    gb = np.swapaxes(a.data, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
  return _result(a.data @ b.data, (a, b), backward_fn)


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
  a = as_tensor(a)
  shifted = a.data - a.data.max(axis=axis, keepdims=True)
  e = np.exp(shifted)
  out = e / e.sum(axis=axis, keepdims=True)
  return _result(out, (a,),
                 lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def layer_norm(a: TensorLike, eps: float = 1e-5) -> Tensor:
  """
  Normalizes the last axis to zero mean and unit variance (no affine terms).
  """
  a = as_tensor(a)
  mu = a.data.mean(axis=-1, keepdims=True)
  centered = a.data - mu
  inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
  xhat = centered * inv_std

  def backward_fn(g):
    g_mean = g.mean(axis=-1, keepdims=True)
    gx_mean = np.mean(g * xhat, axis=-1, keepdims=True)
    return (inv_std * (g - g_mean - xhat * gx_mean),)
  return _result(xhat, (a,), backward_fn)


def norm_last(a: TensorLike) -> Tensor:
  """
  Euclidean norm over the last axis. The gradient at the origin is taken as 0.
  """
  a = as_tensor(a)
  out = np.sqrt(np.sum(a.data * a.data, axis=-1))

  def backward_fn(g):
    safe = np.where(out > 0.0, out, 1.0)
    scale = np.where(out > 0.0, g / safe, 0.0)
    return (a.data * scale[..., None],)
  return _result(out, (a,), backward_fn)


#### Losses ####

def bce_with_logits(logits: TensorLike, targets: np.ndarray) -> Tensor:
  """
  Elementwise binary cross-entropy of 0/1 targets against logits.
  """
  logits = as_tensor(logits)
  y = np.asarray(targets, dtype=np.float64)
  z = logits.data
  out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
  return _result(out, (logits,), lambda g: (g * (sigmoid_np(z) - y),))


def mse_per_residue(pred: TensorLike, target: TensorLike) -> Tensor:
  """
  Squared Euclidean error per residue (summed over the last axis), averaged
  over every other axis.
  """
  diff = sub(pred, target)
  return mean(tsum(square(diff), axis=-1))
