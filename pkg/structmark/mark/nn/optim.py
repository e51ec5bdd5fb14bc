import logging
from typing import Iterable

import numpy as np

from structmark.mark.nn.tensor import Parameter

LOGGER = logging.getLogger(__name__)


class AdamState:
  """
  Bias-corrected Adam over a fixed parameter list.
  """

  def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8):
    self.params = list(params)
    self.lr = lr
    self.beta1 = beta1
    self.beta2 = beta2
    self.eps = eps
    self.step_count = 0
    self.first = {p.name: np.zeros_like(p.data) for p in self.params}
    self.second = {p.name: np.zeros_like(p.data) for p in self.params}

  def zero_grad(self):
    for param in self.params:
      param.zero_grad()

  def step(self):
    adam_step(self, self.params)


def adam_step(state: AdamState, params: Iterable[Parameter]):
  """
  Applies one Adam update to every trainable parameter, then zeroes all grads.

  Args:
      state (AdamState): Moments and hyperparameters.
      params (Iterable[Parameter]): Parameters registered with `state`.
  """
  params = list(params)
  state.step_count += 1
  t = state.step_count
  correction1 = 1.0 - state.beta1 ** t
  correction2 = 1.0 - state.beta2 ** t
  for param in params:
    if not param.requires_grad:
      param.zero_grad()
      continue
    grad = param.grad
    m = state.first[param.name] = state.beta1 * state.first[param.name] + (1.0 - state.beta1) * grad
    v = state.second[param.name] = state.beta2 * state.second[param.name] + (1.0 - state.beta2) * grad * grad
    m_hat = m / correction1
    v_hat = v / correction2
    param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.zero_grad()
