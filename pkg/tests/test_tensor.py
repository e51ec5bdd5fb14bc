import numpy as np
import pytest

from structmark.mark.errors import ShapeError
from structmark.mark.nn import tensor as T
from structmark.mark.nn.tensor import Parameter, Tape, Tensor, backward

from conftest import numeric_gradient


def check_input_gradient(fn, *arrays, rtol=1e-4, atol=1e-7):
  """
  Compares tape gradients of sum(w * fn(inputs)) against finite differences
  for every input array.
  """
  rng = np.random.default_rng(99)
  weights = rng.standard_normal(np.shape(fn(*[Tensor(a) for a in arrays]).data))
  arrays = [np.array(a, dtype=np.float64) for a in arrays]

  def loss_from(values):
    return T.tsum(T.mul(fn(*values), weights))

  inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
  with Tape() as tape:
    loss = loss_from(inputs)
  backward(tape, loss)

  for i, a in enumerate(arrays):
    indices = list(np.ndindex(a.shape))
    numeric = numeric_gradient(lambda: loss_from([Tensor(x) for x in arrays]), a, indices)
    analytic = np.array([inputs[i].grad[idx] for idx in indices])
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


RNG = np.random.default_rng(0)
A = RNG.standard_normal((2, 3))
B = RNG.standard_normal((2, 3))
POSITIVE = RNG.uniform(0.5, 2.0, (2, 3))


@pytest.mark.parametrize('fn, arrays', [
  (lambda a, b: a * b + a - b, (A, B)),
  (lambda a, b: a / b, (A, POSITIVE)),
  (lambda a: T.exp(a), (A,)),
  (lambda a: T.sqrt(a), (POSITIVE,)),
  (lambda a: T.tanh(a), (A,)),
  (lambda a: T.silu(a), (A,)),
  (lambda a: T.square(-a), (A,)),
  (lambda a: T.softmax(a, axis=-1), (A,)),
  (lambda a: T.layer_norm(a), (A,)),
  (lambda a: T.norm_last(a), (A,)),
  (lambda a: T.mean(a, axis=0), (A,)),
  (lambda a: T.tsum(a, axis=1, keepdims=True), (A,)),
  (lambda a, b: a + T.reshape(b[:, :1], (2, 1)), (A, B)),
  (lambda a, b: T.concat([a, b], axis=0), (A, B)),
  (lambda a: T.swapaxes(a, 0, 1), (A,)),
  (lambda a: T.broadcast_to(a[:1], (4, 3)), (A,)),
  (lambda a: T.bce_with_logits(a, (B > 0).astype(float)), (A,)),
  (lambda a, b: T.mse_per_residue(a, b), (A, B)),
])
def test_gradients_match_finite_differences(fn, arrays):
  check_input_gradient(fn, *arrays)


def test_batched_matmul_gradient():
  rng = np.random.default_rng(1)
  check_input_gradient(lambda a, b: T.matmul(a, b), rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2)))


def test_repeated_indices_accumulate():
  x = Tensor(np.arange(4.0), requires_grad=True)
  with Tape() as tape:
    out = T.tsum(T.getitem(x, np.array([0, 0, 2])))
  backward(tape, out)
  np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_gather_rows_gradient():
  rng = np.random.default_rng(2)
  idx = np.array([[[1, 2], [0, 0], [2, 1]]])
  check_input_gradient(lambda h: T.gather_rows(h, idx), rng.standard_normal((1, 3, 2)))


def test_squared_norm_gradient_is_analytic():
  x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
  with Tape() as tape:
    out = T.tsum(T.square(x))
  backward(tape, out)
  np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_constant_function_has_zero_gradient():
  w = Parameter(np.ones(3), 'w')
  with Tape() as tape:
    out = T.tsum(T.mul(w, 0.0)) + 5.0
  backward(tape, out)
  np.testing.assert_array_equal(w.grad, np.zeros(3))


def test_hand_computed_two_layer_network():
  x = Tensor(np.array([[1.0, -2.0]]))
  w1 = np.array([[0.5, 1.0], [-1.0, 0.25]])
  w2 = np.array([[2.0], [-3.0]])
  hidden = T.tanh(T.matmul(x, w1))
  out = T.matmul(hidden, w2)
  expected = 2.0 * np.tanh(0.5 * 1.0 + (-2.0) * (-1.0)) - 3.0 * np.tanh(1.0 * 1.0 + (-2.0) * 0.25)
  assert abs(out.data[0, 0] - expected) < 1e-12


def test_nothing_is_recorded_outside_a_tape():
  x = Tensor(np.ones(3), requires_grad=True)
  out = T.exp(x)
  assert out.requires_grad
  with Tape() as tape:
    T.exp(Tensor(np.ones(3)))
  assert len(tape) == 0


def test_numpy_operands_defer_to_tensor():
  out = np.ones(3) + Tensor(np.arange(3.0))
  assert isinstance(out, Tensor)
  np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_matmul_shape_errors():
  with pytest.raises(ShapeError):
    T.matmul(np.ones((2, 3)), np.ones((2, 3)))
  with pytest.raises(ShapeError):
    T.matmul(np.ones(3), np.ones((3, 1)))


def test_debug_mode_catches_non_finite_values():
  T.set_debug(True)
  try:
    with pytest.raises(FloatingPointError):
      T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))
  finally:
    T.set_debug(False)

