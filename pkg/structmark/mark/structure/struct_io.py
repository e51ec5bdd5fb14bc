"""
Protein structure ingestion: a fixed-column PDB subset reader/writer, the
synthetic desk-scale corpus generator, dataset manifests, filtering and
same-length batching.
"""
from collections import defaultdict
from dataclasses import dataclass, replace
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from structmark.mark.errors import PDBParseError, StructureError
from structmark.mark.pluginmgr import StructMarkBehavior
from structmark.mark.structure import geom

LOGGER = logging.getLogger(__name__)

CA_SPACING = 3.8
"""
Consecutive C-alpha distance (Angstrom) used by the synthetic generator.
"""

VALID_BOND_RANGE = (1.0, 6.0)

HELIX_RISE = 1.5
HELIX_TWIST = math.radians(100.0)
HELIX_RADIUS = math.sqrt((CA_SPACING ** 2 - HELIX_RISE ** 2) / (2.0 * (1.0 - math.cos(HELIX_TWIST))))

SPLITS = ('train', 'val', 'test')


@dataclass(eq=False)
class Structure:
  """
  Single-chain C-alpha trace, optionally with backbone N and C atoms.
  """
  ca: np.ndarray
  seq_index: np.ndarray = None
  chain_id: str = 'A'
  n_atoms: Optional[np.ndarray] = None
  c_atoms: Optional[np.ndarray] = None
  name: str = ''
  validated: bool = False
  resolution: Optional[float] = None

  def __post_init__(self):
    self.ca = geom.as_coords(self.ca)
    if self.ca.shape[0] < 3:
      raise StructureError(f'Structure "{self.name}" has {self.ca.shape[0]} residues; at least 3 are required.')
    if self.seq_index is None:
      self.seq_index = np.arange(1, self.ca.shape[0] + 1)
    self.seq_index = np.asarray(self.seq_index, dtype=np.int64)
    if self.seq_index.shape != (self.ca.shape[0],):
      raise StructureError('seq_index length does not match the number of residues.')
    for atoms in (self.n_atoms, self.c_atoms):
      if atoms is not None and np.shape(atoms) != self.ca.shape:
        raise StructureError('Backbone N/C arrays must match the C-alpha array shape.')

  @property
  def n_residues(self) -> int:
    return self.ca.shape[0]

  def __len__(self):
    return self.n_residues

  def bond_lengths(self) -> np.ndarray:
    return geom.ca_bond_lengths(self.ca)

  def check_bonds(self) -> bool:
    bonds = self.bond_lengths()
    lo, hi = VALID_BOND_RANGE
    return bool(np.all((bonds > lo) & (bonds < hi)))

  def validate(self, strict: bool = False) -> 'Structure':
    """
    Flags the structure as validated when every consecutive C-alpha distance
    lies in (1, 6) Angstrom.

    Args:
        strict (bool): Raise instead of leaving the flag unset.
    """
    self.validated = self.check_bonds()
    if strict and not self.validated:
      raise StructureError(f'Structure "{self.name}" has consecutive C-alpha distances outside {VALID_BOND_RANGE}.')
    return self

  def with_coords(self, ca: np.ndarray, seq_index: Optional[np.ndarray] = None,
                  n_atoms: Optional[np.ndarray] = None, c_atoms: Optional[np.ndarray] = None) -> 'Structure':
    """
    Copy of this structure with new coordinates. Backbone N/C atoms are dropped
    unless passed explicitly, since they no longer follow the C-alpha trace.
    """
    seq = self.seq_index if seq_index is None else seq_index
    s = replace(self, ca=np.array(ca, dtype=np.float64), seq_index=np.array(seq),
                n_atoms=n_atoms, c_atoms=c_atoms, validated=False)
    return s.validate()

  def transformed(self, g: geom.RigidTransform) -> 'Structure':
    move = lambda a: None if a is None else geom.apply_transform(a, g)
    return self.with_coords(geom.apply_transform(self.ca, g), n_atoms=move(self.n_atoms),
                            c_atoms=move(self.c_atoms))

  def centered(self) -> 'Structure':
    return self.with_coords(geom.center(self.ca))

  def window(self, start: int, length: int) -> 'Structure':
    stop = start + length
    cut = lambda a: None if a is None else a[start:stop]
    return self.with_coords(self.ca[start:stop], seq_index=self.seq_index[start:stop],
                            n_atoms=cut(self.n_atoms), c_atoms=cut(self.c_atoms))


#### PDB Fixed-Column Subset ####

def _parse_resolution(line: str) -> Optional[float]:
  # REMARK   2 RESOLUTION.    1.90 ANGSTROMS.
  tokens = line[22:].split()
  try:
    return float(tokens[0])
  except (IndexError, ValueError):
    return None


def parse_pdb(text: Union[bytes, str], name: str = '') -> Structure:
  """
  Reads backbone atoms of the first chain of the first model from PDB text.

  Args:
      text (Union[bytes, str]): PDB file contents.
      name (str): Identifier recorded on the structure.

  Returns:
      Structure: Residues ordered by residue sequence number.
  """
  if isinstance(text, (bytes, bytearray)):
    text = text.decode('ascii', errors='replace')

  chain = None
  resolution = None
  residues: dict[int, dict[str, tuple]] = {}
  for lineno, line in enumerate(text.splitlines(), start=1):
    record = line[0:6]
    if record.startswith('ENDMDL'):
      break
    if record == 'REMARK' and line[6:10].strip() == '2' and 'RESOLUTION.' in line:
      resolution = _parse_resolution(line)
      continue
    if record != 'ATOM  ':
      continue

    chain_id = line[21] if len(line) > 21 else ' '
    if chain is None:
      chain = chain_id
    elif chain_id != chain:
      continue

    atom_name = line[12:16].strip()
    if atom_name not in ('CA', 'N', 'C'):
      continue
    alt_loc = line[16] if len(line) > 16 else ' '
    if alt_loc not in (' ', 'A'):
      continue

    try:
      seq = int(line[22:26])
      xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
    except ValueError:
      LOGGER.warning(f'Skipping malformed ATOM record at line {lineno} of "{name}": {line.rstrip()}')
      continue
    if not all(math.isfinite(v) for v in xyz):
      LOGGER.warning(f'Skipping non-finite ATOM record at line {lineno} of "{name}".')
      continue

    atoms = residues.setdefault(seq, {})
    atoms.setdefault(atom_name, xyz)

  ordered = sorted(seq for seq, atoms in residues.items() if 'CA' in atoms)
  if not ordered:
    raise PDBParseError(f'no CA atoms in "{name}"')
  if len(ordered) < 3:
    raise PDBParseError(f'Only {len(ordered)} valid residues in "{name}"; at least 3 are required.')

  ca = np.array([residues[seq]['CA'] for seq in ordered])
  n_atoms = c_atoms = None
  if all('N' in residues[seq] and 'C' in residues[seq] for seq in ordered):
    n_atoms = np.array([residues[seq]['N'] for seq in ordered])
    c_atoms = np.array([residues[seq]['C'] for seq in ordered])

  structure = Structure(ca, np.array(ordered), chain_id=chain, n_atoms=n_atoms,
                        c_atoms=c_atoms, name=name, resolution=resolution)
  return structure.validate()


def read_pdb(path: Path) -> Structure:
  path = Path(path)
  return parse_pdb(path.read_bytes(), name=path.stem)


_ATOM_LINE = ''.join(['{:6s}', '{:5d}', ' ', '{:4s}', '{:1s}', '{:3s}', ' ', '{:1s}',
                      '{:4d}', '{:1s}', ' ' * 3, '{:8.3f}', '{:8.3f}', '{:8.3f}',
                      '{:6.2f}', '{:6.2f}', ' ' * 10, '{:>2s}', '{:2s}'])


def write_pdb(s: Structure, remarks: Iterable[str] = ()) -> bytes:
  """
  Serializes a structure as ATOM records (residue name GLY), then TER and END.

  Args:
      s (Structure): Structure to write.
      remarks (Iterable[str]): Free text emitted as leading REMARK 250 records.
  """
  lines = [f'REMARK 250 {remark}' for remark in remarks]
  serial = 0
  for i in range(s.n_residues):
    atoms = [(' CA ', s.ca[i], 'C')]
    if s.n_atoms is not None and s.c_atoms is not None:
      atoms = [(' N  ', s.n_atoms[i], 'N'), (' CA ', s.ca[i], 'C'), (' C  ', s.c_atoms[i], 'C')]
    for atom_name, xyz, element in atoms:
      serial += 1
      lines.append(_ATOM_LINE.format('ATOM', serial, atom_name, ' ', 'GLY', s.chain_id,
                                     int(s.seq_index[i]), ' ', xyz[0], xyz[1], xyz[2],
                                     1.0, 0.0, element, ''))
  lines.append(f'TER   {serial + 1:5d}      GLY {s.chain_id}{int(s.seq_index[-1]):4d}')
  lines.append('END')
  return ('\n'.join(lines) + '\n').encode('ascii')


#### Synthetic Generator ####

def _perpendicular(u: np.ndarray) -> np.ndarray:
  axis = np.zeros(3)
  axis[np.argmin(np.abs(u))] = 1.0
  v = np.cross(u, axis)
  return v / np.linalg.norm(v)


def _turn(direction: np.ndarray, rng: np.random.Generator) -> np.ndarray:
  # Direction change of 30-100 degrees, i.e. a virtual bond angle of 80-150.
  angle = math.radians(rng.uniform(30.0, 100.0))
  azimuth = rng.uniform(0.0, 2.0 * math.pi)
  e1 = _perpendicular(direction)
  e2 = np.cross(direction, e1)
  out = math.cos(angle) * direction + math.sin(angle) * (math.cos(azimuth) * e1 + math.sin(azimuth) * e2)
  return out / np.linalg.norm(out)


def _clashes(candidates: np.ndarray, points: list, skip_last: int = 1) -> bool:
  if len(points) <= skip_last:
    return False
  previous = np.asarray(points[:len(points) - skip_last])
  d = np.linalg.norm(candidates[:, None, :] - previous[None, :, :], axis=-1)
  return bool(np.any(d < 4.0))


def ideal_helix(count: int) -> np.ndarray:
  """
  Ideal alpha-helix C-alpha trace along +z with exact 3.8 Angstrom spacing.
  """
  k = np.arange(count)
  return np.stack([HELIX_RADIUS * np.cos(k * HELIX_TWIST),
                   HELIX_RADIUS * np.sin(k * HELIX_TWIST),
                   k * HELIX_RISE], axis=1)


def _extend_helix(points: list, direction: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
  local = ideal_helix(count)
  for attempt in range(20):
    rotation = geom.random_rotation(rng)
    placed = local @ rotation.T
    if points:
      step = _turn(direction, rng)
      placed = placed - placed[0] + points[-1] + CA_SPACING * step
    if not _clashes(placed, points):
      break
  else:
    LOGGER.warning('Helix placement kept a clash after 20 attempts.')
  points.extend(placed)
  last = placed[-1] - placed[-2] if count > 1 else direction
  return last / np.linalg.norm(last)


def _extend_coil(points: list, direction: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
  for _ in range(count):
    if not points:
      points.append(np.zeros(3))
      continue
    for attempt in range(20):
      step = _turn(direction, rng)
      candidate = points[-1] + CA_SPACING * step
      if not _clashes(candidate[None, :], points):
        break
    else:
      LOGGER.warning('Coil step kept a clash after 20 attempts.')
    points.append(candidate)
    direction = step
  return direction


def _helix_topology(n_residues: int, rng: np.random.Generator) -> np.ndarray:
  return ideal_helix(n_residues)


def _coil_topology(n_residues: int, rng: np.random.Generator) -> np.ndarray:
  points = []
  direction = geom.random_rotation(rng)[:, 0]
  _extend_coil(points, direction, n_residues, rng)
  return np.asarray(points)


def _mixed_topology(n_residues: int, rng: np.random.Generator) -> np.ndarray:
  points = []
  direction = geom.random_rotation(rng)[:, 0]
  helix_turn = bool(rng.integers(2))
  while len(points) < n_residues:
    remaining = n_residues - len(points)
    if helix_turn:
      count = min(int(rng.integers(6, 15)), remaining)
      direction = _extend_helix(points, direction, count, rng)
    else:
      count = min(int(rng.integers(3, 8)), remaining)
      direction = _extend_coil(points, direction, count, rng)
    helix_turn = not helix_turn
  return np.asarray(points)


def gen_synthetic(seed, n_residues: int, topology: str = 'mixed', name: str = '') -> Structure:
  """
  Generates a centered synthetic C-alpha chain with exact 3.8 Angstrom spacing.

  Args:
      seed: Anything accepted by `numpy.random.default_rng`.
      n_residues (int): Chain length, 8 to 512.
      topology (str): One of the registered topologies (helix, coil, mixed).
  """
  if not 8 <= n_residues <= 512:
    raise StructureError(f'Synthetic chains must have 8 to 512 residues, got {n_residues}.')
  builder = StructMarkBehavior.TOPOLOGIES.get(topology)
  if builder is None:
    raise StructureError(f"Unknown topology '{topology}'.")
  rng = np.random.default_rng(seed)
  ca = builder(n_residues, rng)
  return Structure(geom.center(ca), name=name or f'synthetic-{topology}-{n_residues}').validate(strict=True)


#### Datasets ####

class DatasetEntry:
  """
  Dataset member backed either by a PDB path (parsed lazily on first access) or
  by a synthetic seed (regenerated deterministically).
  """

  def __init__(self, name: str, length: int, split: str = 'train', provenance: str = 'synthetic',
               path: Optional[Path] = None, seed: Optional[list] = None, topology: str = 'mixed',
               resolution: Optional[float] = None, structure: Optional[Structure] = None):
    self.name = name
    self.length = int(length)
    self.split = split
    self.provenance = provenance
    self.path = Path(path) if path else None
    self.seed = seed
    self.topology = topology
    self.resolution = resolution
    self._structure = structure

  @classmethod
  def from_structure(cls, s: Structure, split: str = 'train', provenance: str = 'pdb') -> 'DatasetEntry':
    return cls(s.name, s.n_residues, split=split, provenance=provenance,
               resolution=s.resolution, structure=s)

  @property
  def structure(self) -> Structure:
    if self._structure is None:
      if self.path is not None:
        self._structure = read_pdb(self.path)
        self.resolution = self._structure.resolution
      elif self.seed is not None:
        self._structure = gen_synthetic(self.seed, self.length, self.topology, name=self.name)
      else:
        raise StructureError(f'Dataset entry "{self.name}" has neither a path nor a synthetic seed.')
    return self._structure

  def to_manifest(self) -> dict:
    record = dict(name=self.name, length=self.length, split=self.split, provenance=self.provenance)
    if self.path is not None:
      record['path'] = str(self.path)
    if self.seed is not None:
      record['synthetic_seed'] = list(self.seed)
      record['topology'] = self.topology
    if self.resolution is not None:
      record['resolution'] = self.resolution
    return record

  @classmethod
  def from_manifest(cls, record: dict, root: Optional[Path] = None) -> 'DatasetEntry':
    path = record.get('path')
    if path and root is not None and not Path(path).is_absolute():
      path = Path(root) / path
    return cls(record['name'], record['length'], split=record.get('split', 'train'),
               provenance=record.get('provenance', 'pdb' if path else 'synthetic'),
               path=path, seed=record.get('synthetic_seed'), topology=record.get('topology', 'mixed'),
               resolution=record.get('resolution'))

  def __repr__(self):
    return f'<DatasetEntry {self.name} len={self.length} split={self.split}>'


class Dataset:

  def __init__(self, entries: Iterable[DatasetEntry] = ()):
    self.entries = list(entries)
    seen = {}
    for entry in self.entries:
      other = seen.setdefault(entry.name, entry.split)
      if other != entry.split:
        raise StructureError(f'Structure "{entry.name}" appears in both the {other} and {entry.split} splits.')

  def __len__(self):
    return len(self.entries)

  def __iter__(self):
    return iter(self.entries)

  def split(self, name: str) -> 'Dataset':
    return Dataset(e for e in self.entries if e.split == name)

  def structures(self) -> list[Structure]:
    return [e.structure for e in self.entries]

  @classmethod
  def from_structures(cls, structures: Iterable[Structure], split: str = 'train',
                      provenance: str = 'pdb') -> 'Dataset':
    return cls(DatasetEntry.from_structure(s, split, provenance) for s in structures)

  def save_manifest(self, path: Path, config_hash: str = ''):
    """
    Writes the dataset manifest JSON document.

    Args:
        path (Path): Output file.
        config_hash (str): Hash of the producing configuration.
    """
    doc = dict(config_hash=config_hash, entries=[e.to_manifest() for e in self.entries])
    Path(path).write_text(json.dumps(doc, indent=1))

  @classmethod
  def load_manifest(cls, path: Path) -> 'Dataset':
    path = Path(path)
    doc = json.loads(path.read_text())
    return cls(DatasetEntry.from_manifest(r, path.parent) for r in doc.get('entries', []))


def build_synthetic_corpus(n_structures: int = 2000, min_len: int = 48, max_len: int = 64,
                           topology: str = 'mixed', seed: int = 0,
                           fractions: tuple = (0.8, 0.1, 0.1)) -> Dataset:
  """
  Desk-scale corpus of synthetic chains. Entry i depends only on (seed, i).

  Args:
      n_structures (int): Corpus size.
      min_len (int): Smallest chain length (inclusive).
      max_len (int): Largest chain length (inclusive).
      topology (str): Topology passed to gen_synthetic.
      seed (int): Global corpus seed.
      fractions (tuple): Train/val/test fractions.
  """
  order = np.random.default_rng([seed, 0x5EED]).permutation(n_structures)
  n_train = int(round(fractions[0] * n_structures))
  n_val = int(round(fractions[1] * n_structures))
  split_of = {}
  for rank, idx in enumerate(order):
    split_of[int(idx)] = 'train' if rank < n_train else 'val' if rank < n_train + n_val else 'test'

  entries = []
  for i in range(n_structures):
    length = int(np.random.default_rng([seed, i]).integers(min_len, max_len + 1))
    entries.append(DatasetEntry(f'syn-{seed}-{i:05d}', length, split=split_of[i], provenance='synthetic',
                                seed=[seed, i, 1], topology=topology))
  return Dataset(entries)


def filter_corpus(d: Dataset, min_len: int = 60, max_len: int = 512) -> Dataset:
  return Dataset(e for e in d.entries if min_len <= e.length <= max_len)


@dataclass
class Batch:
  structures: list
  max_batch: int = 64

  @property
  def length(self) -> int:
    return self.structures[0].n_residues

  def __len__(self):
    return len(self.structures)

  def coords(self) -> np.ndarray:
    return np.stack([s.ca for s in self.structures])


def batch_by_length(d: Union[Dataset, Iterable[Structure]], max_batch: int = 64,
                    rng: Optional[np.random.Generator] = None) -> list[Batch]:
  """
  Partitions structures into batches of identical residue count.

  Args:
      d: Dataset or iterable of structures.
      max_batch (int): Largest batch size.
      rng (np.random.Generator): When given, members and batch order are shuffled.
  """
  if max_batch < 1:
    raise StructureError('max_batch must be at least 1.')
  structures = d.structures() if isinstance(d, Dataset) else list(d)
  by_length = defaultdict(list)
  for s in structures:
    by_length[s.n_residues].append(s)

  batches = []
  for length in sorted(by_length):
    members = by_length[length]
    if rng is not None:
      members = [members[i] for i in rng.permutation(len(members))]
    for start in range(0, len(members), max_batch):
      batches.append(Batch(members[start:start + max_batch], max_batch))
  if rng is not None:
    batches = [batches[i] for i in rng.permutation(len(batches))]
  return batches


StructMarkBehavior.TOPOLOGIES.update({
  'helix': _helix_topology,
  'coil': _coil_topology,
  'mixed': _mixed_topology,
})
