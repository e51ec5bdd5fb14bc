import copy
from dataclasses import dataclass

import numpy as np
import pytest

from structmark.mark.models.codec import CodecConfig, WatermarkDecoder, WatermarkEncoder, pretrain
from structmark.mark.models.finetune import FinetuneConfig, FinetuneResult, run_finetune, state_digest
from structmark.mark.models.genmodel import EpsNet, GenConfig, train_base
from structmark.mark.nn.tensor import Tape, backward
from structmark.mark.structure.struct_io import Dataset, build_synthetic_corpus, gen_synthetic

FD_STEP = 1e-5


def numeric_gradient(loss_fn, array: np.ndarray, indices, h: float = FD_STEP) -> np.ndarray:
  """
  Central finite differences of a scalar `loss_fn()` with respect to selected
  entries of `array`, which is perturbed in place and restored.
  """
  grads = []
  for idx in indices:
    saved = array[idx]
    array[idx] = saved + h
    up = float(loss_fn().data)
    array[idx] = saved - h
    down = float(loss_fn().data)
    array[idx] = saved
    grads.append((up - down) / (2.0 * h))
  return np.array(grads)


def tape_gradients(loss_fn, params) -> list[np.ndarray]:
  for p in params:
    p.grad = np.zeros_like(p.data)
  with Tape() as tape:
    loss = loss_fn()
  backward(tape, loss)
  return [p.grad.copy() for p in params]


def sample_indices(shape, count: int, seed: int = 0) -> list[tuple]:
  rng = np.random.default_rng(seed)
  return [tuple(int(rng.integers(0, extent)) for extent in shape) for _ in range(count)]


@pytest.fixture
def gradient_check():
  """
  Asserts tape gradients of `loss_fn` match finite differences on a few
  entries of each parameter.
  """
  def check(loss_fn, params, count: int = 4, rtol: float = 1e-4, atol: float = 1e-7):
    analytic = tape_gradients(loss_fn, params)
    for p, grad in zip(params, analytic):
      indices = sample_indices(p.shape, count)
      numeric = numeric_gradient(loss_fn, p.data, indices)
      np.testing.assert_allclose([grad[i] for i in indices], numeric, rtol=rtol, atol=atol,
                                 err_msg=f'gradient mismatch for {p.name}')
  return check


@pytest.fixture
def chain():
  return gen_synthetic(7, 24)


@pytest.fixture
def short_chains():
  return [gen_synthetic([3, i], 12) for i in range(4)] + [gen_synthetic([3, i], 13) for i in range(4, 6)]


@pytest.fixture
def tiny_encoder():
  return WatermarkEncoder(code_length=8, width=8, rounds=1, k_neighbors=4, seed=1)


@pytest.fixture
def tiny_decoder():
  return WatermarkDecoder(code_length=8, width=8, rounds=1, k_neighbors=4, seed=1)


@pytest.fixture
def tiny_base():
  return EpsNet(width=8, rounds=1, heads=2, attention_layers=1, k_neighbors=4, time_channels=4,
                steps=10, beta_start=1e-3, beta_end=0.3, seed=2)


@pytest.fixture
def trained_like_base(tiny_base):
  """
  Tiny generator whose zero-initialized head has been randomized so that its
  predictions are not identically zero.
  """
  rng = np.random.default_rng(5)
  tiny_base.head.W.data = 0.3 * rng.standard_normal(tiny_base.head.W.shape)
  return tiny_base


#### Desk-scale system (slow tests only) ####

DESK_FINETUNE = dict(rank=16, epochs=10, lr=1e-3, eval_samples=16, seed=0)


@dataclass
class DeskSystem:
  corpus: Dataset
  encoder: WatermarkEncoder
  stage1_decoder: WatermarkDecoder
  base: EpsNet
  base_digest: str
  tuned: FinetuneResult


@pytest.fixture(scope='session')
def desk_system():
  """
  Stage-1 codec, base generator and Stage-2 adapters trained on the desk
  corpus with eta = 2 and 8-bit codes. Built once per session.
  """
  corpus = build_synthetic_corpus(2000, 48, 64, seed=0)
  codec = pretrain(corpus, CodecConfig(code_length=8, lr=1e-3, epochs=20, seed=0))
  base = train_base(corpus, GenConfig(lr=1e-3, epochs=20, seed=0)).model
  stage1_decoder = copy.deepcopy(codec.decoder)
  base_digest = state_digest(base)
  tuned = run_finetune(base, codec.decoder, corpus, FinetuneConfig(eta=2.0, **DESK_FINETUNE))
  return DeskSystem(corpus, codec.encoder, stage1_decoder, base, base_digest, tuned)
