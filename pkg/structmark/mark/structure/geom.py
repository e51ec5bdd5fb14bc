"""
Rigid-body geometry: transforms, optimal superposition and RMSD.

Coordinates are plain (n, 3) float64 arrays in Angstrom. Everything here is a
pure function over immutable values.
"""
from dataclasses import dataclass
import logging

import numpy as np
from scipy.spatial.transform import Rotation

from structmark.mark.errors import GeometryError

LOGGER = logging.getLogger(__name__)

EXACT_TOL = 1e-8
"""
Default tolerance for exact symmetry checks.
"""

RIGID_TRANSLATION_RANGE = 10.0
"""
Half-width (Angstrom) of the per-axis uniform translation drawn by random_rigid.
"""


@dataclass(frozen=True)
class RigidTransform:
  """
  Proper rotation followed by a translation (an element of SE(3)).
  """
  rotation: np.ndarray
  translation: np.ndarray

  def __post_init__(self):
    rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
    translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
    object.__setattr__(self, 'rotation', rotation)
    object.__setattr__(self, 'translation', translation)

  @classmethod
  def identity(cls) -> 'RigidTransform':
    return cls(np.eye(3), np.zeros(3))

  def is_proper(self, tol: float = 1e-10) -> bool:
    orthonormal = np.allclose(self.rotation.T @ self.rotation, np.eye(3), rtol=0, atol=tol)
    return bool(orthonormal and abs(np.linalg.det(self.rotation) - 1.0) <= tol)

  def compose(self, first: 'RigidTransform') -> 'RigidTransform':
    """
    Returns self∘first, i.e. `first` is applied before `self`.
    """
    return RigidTransform(self.rotation @ first.rotation,
                          self.rotation @ first.translation + self.translation)

  def inverse(self) -> 'RigidTransform':
    return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


def as_coords(points) -> np.ndarray:
  coords = np.asarray(points, dtype=np.float64)
  if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
    raise GeometryError(f'Expected an (n, 3) coordinate array with n >= 1, got shape {coords.shape}')
  if not np.all(np.isfinite(coords)):
    raise GeometryError('Coordinate set contains non-finite values.')
  return coords


def apply_transform(coords: np.ndarray, g: RigidTransform) -> np.ndarray:
  """
  Applies a rigid transform to every point: rotation·p + translation.

  Args:
      coords (np.ndarray): (n, 3) coordinates.
      g (RigidTransform): Transform to apply.

  Returns:
      np.ndarray: Transformed (n, 3) coordinates.
  """
  coords = as_coords(coords)
  return coords @ g.rotation.T + g.translation


def random_rotation(rng: np.random.Generator) -> np.ndarray:
  # Normalized quaternion of four standard normals is uniform on SO(3).
  quat = rng.standard_normal(4)
  return Rotation.from_quat(quat / np.linalg.norm(quat)).as_matrix()


def random_rigid(seed, translation_range: float = RIGID_TRANSLATION_RANGE) -> RigidTransform:
  """
  Draws a uniformly random rotation and a uniform translation in
  [-translation_range, translation_range] per axis.

  Args:
      seed: Anything accepted by `numpy.random.default_rng`.
      translation_range (float): Per-axis translation half-width in Angstrom.
  """
  rng = np.random.default_rng(seed)
  rotation = random_rotation(rng)
  translation = rng.uniform(-translation_range, translation_range, size=3)
  return RigidTransform(rotation, translation)


def kabsch(mobile: np.ndarray, reference: np.ndarray) -> tuple[RigidTransform, float]:
  """
  Optimal proper superposition of `mobile` onto `reference`.

  Args:
      mobile (np.ndarray): (n, 3) coordinates to move.
      reference (np.ndarray): (n, 3) target coordinates.

  Returns:
      tuple[RigidTransform, float]: Transform mapping mobile onto reference and
        the RMSD after superposition.
  """
  mobile = as_coords(mobile)
  reference = as_coords(reference)
  if mobile.shape != reference.shape:
    raise GeometryError(f'Length mismatch: {mobile.shape[0]} vs {reference.shape[0]} points')
  if mobile.shape[0] < 3:
    raise GeometryError('Kabsch superposition needs at least 3 points.')

  mobile_center = mobile.mean(axis=0)
  reference_center = reference.mean(axis=0)
  p = mobile - mobile_center
  q = reference - reference_center
  for cloud in (p, q):
    scale = max(np.abs(cloud).max(), 1.0)
    if np.linalg.matrix_rank(cloud, tol=1e-9 * scale) < 2:
      raise GeometryError('Degenerate point cloud (collinear or coincident points).')

  h = p.T @ q
  u, _, vt = np.linalg.svd(h)
  d = np.sign(np.linalg.det(vt.T @ u.T))
  correction = np.diag([1.0, 1.0, d if d != 0 else 1.0])
  rotation = vt.T @ correction @ u.T
  translation = reference_center - rotation @ mobile_center

  diff = p @ rotation.T - q
  rmsd = float(np.sqrt(np.sum(diff * diff) / mobile.shape[0]))
  return RigidTransform(rotation, translation), rmsd


def rmsd(a: np.ndarray, b: np.ndarray) -> float:
  return kabsch(a, b)[1]


def ca_bond_lengths(coords: np.ndarray) -> np.ndarray:
  return np.linalg.norm(np.diff(coords, axis=0), axis=1)


def center(coords: np.ndarray) -> np.ndarray:
  coords = np.asarray(coords, dtype=np.float64)
  return coords - coords.mean(axis=0)
