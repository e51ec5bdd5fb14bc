import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from structmark.mark.errors import GeometryError
from structmark.mark.structure import geom


def test_identity_transform_is_a_no_op(chain):
  moved = geom.apply_transform(chain.ca, geom.RigidTransform.identity())
  np.testing.assert_array_equal(moved, chain.ca)


def test_random_rigid_is_proper_and_seeded():
  g = geom.random_rigid(3)
  assert g.is_proper()
  assert np.all(np.abs(g.translation) <= geom.RIGID_TRANSLATION_RANGE)
  again = geom.random_rigid(3)
  np.testing.assert_array_equal(g.rotation, again.rotation)
  np.testing.assert_array_equal(g.translation, again.translation)
  assert not np.allclose(g.rotation, geom.random_rigid(4).rotation)


def test_compose_with_inverse_is_identity(chain):
  g = geom.random_rigid(11)
  roundtrip = geom.apply_transform(geom.apply_transform(chain.ca, g), g.inverse())
  np.testing.assert_allclose(roundtrip, chain.ca, atol=1e-10)
  both = g.inverse().compose(g)
  np.testing.assert_allclose(both.rotation, np.eye(3), atol=1e-12)
  np.testing.assert_allclose(both.translation, np.zeros(3), atol=1e-12)


def test_kabsch_recovers_rigid_motion(chain):
  for seed in range(20):
    g = geom.random_rigid(seed)
    moved = geom.apply_transform(chain.ca, g)
    fit, rmsd = geom.kabsch(moved, chain.ca)
    assert rmsd < 1e-9
    assert fit.is_proper()
    np.testing.assert_allclose(geom.apply_transform(moved, fit), chain.ca, atol=1e-9)


def test_kabsch_never_reflects(chain):
  mirrored = chain.ca * np.array([1.0, 1.0, -1.0])
  fit, rmsd = geom.kabsch(mirrored, chain.ca)
  assert np.linalg.det(fit.rotation) == pytest.approx(1.0)
  assert rmsd > 0.1


def test_rmsd_of_known_offset():
  a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
  assert geom.rmsd(a, a + 5.0) == pytest.approx(0.0, abs=1e-12)


def test_kabsch_rejects_bad_input():
  line = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
  with pytest.raises(GeometryError):
    geom.kabsch(line, line)
  with pytest.raises(GeometryError, match='Length mismatch'):
    geom.kabsch(np.eye(3), np.eye(4)[:, :3])
  with pytest.raises(GeometryError):
    geom.as_coords([[0.0, np.nan, 0.0]])
  with pytest.raises(GeometryError):
    geom.as_coords(np.zeros((4, 2)))


def test_bond_lengths_and_centering(chain):
  np.testing.assert_allclose(geom.ca_bond_lengths(chain.ca), 3.8, atol=1e-9)
  np.testing.assert_allclose(geom.center(chain.ca + 7.0).mean(axis=0), 0.0, atol=1e-12)


def test_composition_law(chain):
  for seed in range(10):
    g1, g2 = geom.random_rigid([seed, 1]), geom.random_rigid([seed, 2])
    stepwise = geom.apply_transform(geom.apply_transform(chain.ca, g1), g2)
    np.testing.assert_allclose(stepwise, geom.apply_transform(chain.ca, g2.compose(g1)), atol=1e-10)


def test_kabsch_recovers_the_inverse_motion(chain):
  g = geom.random_rigid(21)
  fit, _ = geom.kabsch(geom.apply_transform(chain.ca, g), chain.ca)
  np.testing.assert_allclose(fit.rotation, g.inverse().rotation, atol=1e-9)
  np.testing.assert_allclose(fit.translation, g.inverse().translation, atol=1e-8)


def test_rmsd_is_symmetric():
  rng = np.random.default_rng(3)
  for _ in range(10):
    a = rng.standard_normal((12, 3)) * 5.0
    b = a + rng.standard_normal((12, 3))
    assert abs(geom.rmsd(a, b) - geom.rmsd(b, a)) < 1e-10


def test_kabsch_matches_scipy_alignment():
  rng = np.random.default_rng(8)
  for _ in range(10):
    ref = rng.standard_normal((15, 3)) * 4.0
    mobile = geom.apply_transform(ref + 0.5 * rng.standard_normal((15, 3)), geom.random_rigid(int(rng.integers(1000))))
    p, q = geom.center(mobile), geom.center(ref)
    rotation, _ = Rotation.align_vectors(q, p)
    expected = np.sqrt(np.mean(np.sum((rotation.apply(p) - q) ** 2, axis=1)))
    assert geom.kabsch(mobile, ref)[1] == pytest.approx(expected, abs=1e-8)


def test_kabsch_matches_brute_force_rotation_search():
  ref = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 4.0]])
  noisy = ref + np.random.default_rng(2).normal(scale=0.3, size=ref.shape)
  p, q = geom.center(noisy), geom.center(ref)

  def deviation(rotvec):
    moved = Rotation.from_rotvec(rotvec).apply(p)
    return np.sqrt(np.mean(np.sum((moved - q) ** 2, axis=1)))

  grid = Rotation.random(5000, 0).as_rotvec()
  start = min(grid, key=deviation)
  best = minimize(deviation, start, method='Nelder-Mead', options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000))
  assert geom.kabsch(noisy, ref)[1] == pytest.approx(best.fun, abs=1e-3)


def test_random_rotations_are_uniform():
  rotations = np.stack([geom.random_rigid(seed).rotation for seed in range(20000)])
  np.testing.assert_allclose(rotations.mean(axis=0), np.zeros((3, 3)), atol=0.02)
  np.testing.assert_allclose((rotations @ np.array([1.0, 0.0, 0.0])).mean(axis=0), np.zeros(3), atol=0.02)
