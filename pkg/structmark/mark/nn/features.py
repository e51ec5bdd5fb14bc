"""
SE(3)-invariant residue features and the message-passing stack built on them.

Geometry enters the networks only through inter-residue distances and sequence
offsets, so everything computed here is exactly invariant under rigid motions.
"""
from dataclasses import dataclass
import logging
from typing import Optional, Union

import numpy as np

from structmark.mark.errors import ShapeError
from structmark.mark.nn import tensor as T
from structmark.mark.nn.layers import LinearLayer, Module
from structmark.mark.nn.tensor import Tensor

LOGGER = logging.getLogger(__name__)

RBF_CENTERS = np.linspace(0.0, 20.0, 16)
RBF_WIDTH = 1.25
OFFSET_CLIP = 32
OFFSET_FREQUENCIES = np.array([0.5, 1.0, 2.0, 4.0])
EDGE_CHANNELS = len(RBF_CENTERS) + 2 * len(OFFSET_FREQUENCIES)
DEFAULT_K_NEIGHBORS = 16


@dataclass
class InvariantFeatures:
  """
  Edge features per residue and the neighbor indices they were gathered from.

  edges: (B, n, k, EDGE_CHANNELS) tensor, differentiable in the coordinates.
  neighbors: (B, n, k) integer residue indices.
  """
  edges: Tensor
  neighbors: np.ndarray

  @property
  def batch(self) -> int:
    return self.neighbors.shape[0]

  @property
  def n_residues(self) -> int:
    return self.neighbors.shape[1]


def _batched_coords(coords) -> Tensor:
  if hasattr(coords, 'ca'):
    coords = coords.ca
  coords = T.as_tensor(coords)
  if coords.ndim == 2:
    coords = T.reshape(coords, (1,) + coords.shape)
  if coords.ndim != 3 or coords.shape[-1] != 3:
    raise ShapeError(f'Expected coordinates of shape [B, n, 3], got {coords.shape}')
  return coords


def select_neighbors(coords: np.ndarray, k_neighbors: int) -> np.ndarray:
  """
  Picks k neighbors per residue: both sequence-adjacent residues first, then
  the spatially nearest ones. Ties are broken by |offset| and then by offset,
  with distances rounded to 1e-6 Angstrom so the choice is rotation-stable.

  Args:
      coords (np.ndarray): (B, n, 3) coordinates.
      k_neighbors (int): Requested neighbor count; capped at n - 1.

  Returns:
      np.ndarray: (B, n, k) neighbor indices.
  """
  batch, n, _ = coords.shape
  k = min(k_neighbors, n - 1)
  dist = np.linalg.norm(coords[:, :, None, :] - coords[:, None, :, :], axis=-1)
  key = np.round(dist, 6)
  positions = np.arange(n)
  offset = np.broadcast_to(positions[None, :] - positions[:, None], key.shape)
  key = np.where(np.abs(offset) == 1, -1.0, key)
  key = np.where(offset == 0, np.inf, key)
  order = np.lexsort((offset, np.abs(offset), key), axis=-1)
  return order[..., :k]


def offset_encoding(neighbors: np.ndarray) -> np.ndarray:
  n = neighbors.shape[1]
  rel = neighbors - np.arange(n)[None, :, None]
  rel = np.clip(rel, -OFFSET_CLIP, OFFSET_CLIP) / OFFSET_CLIP
  angles = np.pi * rel[..., None] * OFFSET_FREQUENCIES
  return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def invariant_features(coords, k_neighbors: int = DEFAULT_K_NEIGHBORS) -> InvariantFeatures:
  """
  Radial-basis encoded distances to the k nearest neighbors concatenated with
  an encoding of the relative sequence offsets.

  Args:
      coords: Structure, (n, 3) or (B, n, 3) coordinates, array or Tensor.
      k_neighbors (int): Neighbors per residue (at least 2).

  Returns:
      InvariantFeatures: Edge features with a leading batch axis.
  """
  if k_neighbors < 2:
    raise ShapeError('k_neighbors must be at least 2.')
  x = _batched_coords(coords)
  batch, n, _ = x.shape
  if n < 3:
    raise ShapeError(f'Invariant features need at least 3 residues, got {n}.')

  neighbors = select_neighbors(x.data, k_neighbors)
  k = neighbors.shape[-1]
  diff = T.gather_rows(x, neighbors) - T.reshape(x, (batch, n, 1, 3))
  dist = T.reshape(T.norm_last(diff), (batch, n, k, 1))
  scaled = (dist - RBF_CENTERS) * (1.0 / RBF_WIDTH)
  rbf = T.exp(-T.square(scaled))
  edges = T.concat([rbf, Tensor(offset_encoding(neighbors))], axis=-1)
  return InvariantFeatures(edges, neighbors)


class MessagePassingStack(Module):
  """
  Residue embeddings from invariant edge features: an edge embedding averaged
  per residue, followed by rounds of neighbor message passing with residual
  updates and layer normalization.
  """

  def __init__(self, name: str, width: int, rounds: int, rng: np.random.Generator):
    super().__init__(name)
    self.width = width
    self.rounds = rounds
    self.edge_embed = self.add_child('edge_embed', LinearLayer(f'{name}.edge_embed', EDGE_CHANNELS, width, rng))
    self.messages = []
    self.updates = []
    for r in range(rounds):
      self.messages.append(self.add_child(f'message{r}', LinearLayer(f'{name}.message{r}', 3 * width, width, rng)))
      self.updates.append(self.add_child(f'update{r}', LinearLayer(f'{name}.update{r}', width, width, rng)))

  def __call__(self, feats: InvariantFeatures, node_input: Optional[Union[Tensor, np.ndarray]] = None,
               modulation=None) -> Tensor:
    batch, n, k = feats.neighbors.shape
    edges = T.silu(self.edge_embed(feats.edges, modulation))
    h = T.mean(edges, axis=2)
    if node_input is not None:
      h = h + node_input
    h = T.layer_norm(h)

    for message, update in zip(self.messages, self.updates):
      h_self = T.broadcast_to(T.reshape(h, (batch, n, 1, self.width)), (batch, n, k, self.width))
      h_other = T.gather_rows(h, feats.neighbors)
      m = T.silu(message(T.concat([h_self, h_other, edges], axis=-1), modulation))
      h = T.layer_norm(h + update(T.mean(m, axis=2), modulation))
    return h
