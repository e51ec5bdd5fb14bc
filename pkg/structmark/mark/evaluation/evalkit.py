"""
Detection with calibrated false-positive rates, user identification against a
code database, and the evaluation report.
"""
from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
import json
import logging
import math
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from structmark.mark.errors import CodeLengthError, ConfigError, IdentificationError, StructMarkError
from structmark.mark.models.codec import WatermarkCode, WatermarkDecoder, decode
from structmark.mark.models.genmodel import sample_many
from structmark.mark.structure import geom
from structmark.mark.structure.struct_io import Structure

LOGGER = logging.getLogger(__name__)

DEFAULT_FPR = 1e-3
MAX_BITS = 64


def worker_count() -> int:
  """
  Evaluation worker threads, capped by STRUCTMARK_THREADS.
  """
  value = os.environ.get('STRUCTMARK_THREADS')
  if value:
    try:
      return max(1, int(value))
    except ValueError:
      raise ConfigError(f'STRUCTMARK_THREADS must be an integer, got "{value}"')
  return max(1, min(8, os.cpu_count() or 1))


def _bits(m: Union[WatermarkCode, Sequence[int], np.ndarray]) -> np.ndarray:
  return m.as_array() if isinstance(m, WatermarkCode) else np.asarray(m, dtype=np.float64)


#### Detection ####

def bit_accuracy(logits: np.ndarray, m) -> float:
  logits = np.asarray(logits, dtype=np.float64)
  bits = _bits(m)
  if logits.shape[-1] != bits.shape[-1]:
    raise CodeLengthError(f'{logits.shape[-1]} logits cannot be scored against a {bits.shape[-1]}-bit code.')
  return float(np.mean((logits > 0) == (bits > 0.5)))


def binomial_pvalue(k: int, l: int) -> float:
  """
  P(Bin(l, 1/2) >= k), summed in exact integer arithmetic.
  """
  if not 0 <= k <= l <= MAX_BITS:
    raise StructMarkError(f'binomial_pvalue needs 0 <= k <= l <= {MAX_BITS}, got k={k}, l={l}')
  tail = sum(math.comb(l, i) for i in range(k, l + 1))
  return float(Fraction(tail, 2 ** l))


def detection_threshold(l: int, fpr: float = DEFAULT_FPR) -> float:
  """
  Smallest bit-accuracy threshold k/l whose analytic false-positive rate is at
  most `fpr`. Falls back to 1.0 when even a perfect match is too likely.
  """
  for k in range(l + 1):
    if binomial_pvalue(k, l) <= fpr:
      return k / l
  LOGGER.warning(f'No threshold reaches FPR {fpr:g} with {l} bits (best {binomial_pvalue(l, l):.3g}); using 1.0.')
  return 1.0


@dataclass
class DetectionResult:
  matched_bits: int
  total_bits: int
  bit_accuracy: float
  p_value: float
  threshold: float
  positive: bool


def detect_logits(logits: np.ndarray, owner, tau: Optional[float] = None) -> DetectionResult:
  bits = _bits(owner)
  logits = np.asarray(logits, dtype=np.float64)
  if logits.shape[-1] != bits.shape[-1]:
    raise CodeLengthError(f'{logits.shape[-1]} logits cannot be scored against a {bits.shape[-1]}-bit code.')
  l = bits.shape[-1]
  k = int(np.sum((logits > 0) == (bits > 0.5)))
  tau = detection_threshold(l) if tau is None else tau
  return DetectionResult(k, l, k / l, binomial_pvalue(k, l), tau, k / l >= tau)


def detect(s: Structure, owner: WatermarkCode, decoder: WatermarkDecoder, tau: Optional[float] = None) -> DetectionResult:
  """
  Tests whether a structure carries the owner's code.

  Args:
      s (Structure): Structure under test.
      owner (WatermarkCode): Code to test against.
      decoder (WatermarkDecoder): Trained decoder.
      tau (float): Bit-accuracy threshold; defaults to the FPR <= 1e-3 threshold.
  """
  return detect_logits(decode(s, decoder), owner, tau)


#### Identification ####

def pack_bits(bits: np.ndarray) -> np.ndarray:
  """
  Packs (..., l) 0/1 rows into uint64 words, bit i at weight 2^i.
  """
  bits = np.asarray(bits)
  weights = np.left_shift(np.uint64(1), np.arange(bits.shape[-1], dtype=np.uint64))
  return np.sum(bits.astype(np.uint64) * weights, axis=-1, dtype=np.uint64)


class UserDatabase:
  """
  Per-user codes, kept sorted by user id so that nearest-code ties resolve to
  the lowest id.
  """

  def __init__(self, user_ids: Sequence[int], codes: np.ndarray):
    user_ids = np.asarray(user_ids, dtype=np.int64)
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2 or codes.shape[0] != user_ids.shape[0] or codes.shape[0] == 0:
      raise IdentificationError(f'Need one code per user, got {user_ids.shape[0]} users and codes {codes.shape}.')
    if codes.shape[1] > MAX_BITS:
      raise CodeLengthError(f'Codes longer than {MAX_BITS} bits are not supported.')
    if np.unique(user_ids).size != user_ids.size:
      raise IdentificationError('User ids must be unique.')
    order = np.argsort(user_ids, kind='stable')
    self.user_ids = user_ids[order]
    self.bits = codes[order]
    self.packed = pack_bits(self.bits)
    if np.unique(self.packed).size != self.packed.size:
      raise IdentificationError('User codes must be pairwise distinct.')

  @property
  def code_length(self) -> int:
    return self.bits.shape[1]

  def __len__(self):
    return self.user_ids.shape[0]

  def code_of(self, user_id: int) -> WatermarkCode:
    idx = int(np.searchsorted(self.user_ids, user_id))
    if idx >= len(self) or self.user_ids[idx] != user_id:
      raise IdentificationError(f'Unknown user id {user_id}')
    return WatermarkCode(tuple(self.bits[idx]))

  @classmethod
  def random(cls, n_users: int, l: int, seed) -> 'UserDatabase':
    """
    Uniformly random distinct codes for users 0..n_users-1, duplicates rejected.
    """
    if n_users > 2 ** l:
      raise IdentificationError(f'Cannot draw {n_users} distinct {l}-bit codes.')
    rng = np.random.default_rng(seed)
    words = np.empty(0, dtype=np.uint64)
    while words.size < n_users:
      draw = rng.integers(0, 2 ** l, size=n_users - words.size, dtype=np.uint64, endpoint=False)
      merged = np.concatenate([words, draw])
      _, first = np.unique(merged, return_index=True)
      words = merged[np.sort(first)]
    bits = ((words[:, None] >> np.arange(l, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    return cls(np.arange(n_users), bits)

  def to_json(self) -> str:
    return json.dumps([dict(user_id=int(u), code=''.join(str(int(b)) for b in row))
                       for u, row in zip(self.user_ids, self.bits)])

  @classmethod
  def from_json(cls, text: str) -> 'UserDatabase':
    records = json.loads(text)
    return cls([r['user_id'] for r in records], [[int(c) for c in r['code']] for r in records])

  def save(self, path: Path):
    Path(path).write_text(self.to_json())

  @classmethod
  def load(cls, path: Path) -> 'UserDatabase':
    return cls.from_json(Path(path).read_text())

  def nearest(self, probe_bits: np.ndarray) -> tuple[int, int]:
    """
    (user_id, Hamming distance) of the closest code to one probe.
    """
    word = pack_bits(np.asarray(probe_bits) > 0.5)
    distances = np.bitwise_count(np.bitwise_xor(self.packed, word))
    idx = int(np.argmin(distances))
    return int(self.user_ids[idx]), int(distances[idx])

  def identify_bits(self, probes: np.ndarray, workers: Optional[int] = None) -> np.ndarray:
    """
    Nearest user id for each row of a (P, l) probe matrix.
    """
    probes = np.atleast_2d(probes)
    if probes.shape[1] != self.code_length:
      raise CodeLengthError(f'Probes have {probes.shape[1]} bits, database codes have {self.code_length}.')
    workers = workers or worker_count()
    if workers == 1 or probes.shape[0] < 2:
      return np.array([self.nearest(p)[0] for p in probes], dtype=np.int64)
    with ThreadPoolExecutor(max_workers=workers) as pool:
      return np.array([uid for uid, _ in pool.map(self.nearest, probes)], dtype=np.int64)


def identify(s: Structure, db: UserDatabase, decoder: WatermarkDecoder) -> int:
  logits = decode(s, decoder)
  return db.nearest(logits > 0)[0]


def simulate_identification(n_users: int, l: int, p_bit_error: float, trials: int, seed,
                            workers: Optional[int] = None) -> float:
  """
  Identification accuracy when every bit of a random member's code flips
  independently with probability `p_bit_error`.

  Args:
      n_users (int): Database size N (2 <= N < 2^l).
      l (int): Code length.
      p_bit_error (float): Per-bit flip probability.
      trials (int): Number of probes.
      seed: Seed for the database and the probes.
  """
  if n_users < 2 or trials < 1:
    raise IdentificationError('Simulation needs at least 2 users and 1 trial.')
  if n_users >= 2 ** l:
    raise IdentificationError(f'{n_users} users cannot receive distinct {l}-bit codes with room for errors.')
  db = UserDatabase.random(n_users, l, [seed, 0])
  rng = np.random.default_rng([seed, 1])
  members = rng.integers(0, n_users, size=trials)
  flips = rng.random((trials, l)) < p_bit_error
  probes = db.bits[members] ^ flips.astype(np.uint8)
  found = db.identify_bits(probes, workers)
  return float(np.mean(found == db.user_ids[members]))


#### Quality ####

def consistency_rmsd(wrapped, lora, seeds: Sequence, n_residues: int = 56,
                     reference_seeds: Optional[Sequence] = None) -> float:
  """
  Mean Kabsch RMSD between watermarked samples and clean samples drawn from
  the same (or, as a control, different) seeds.
  """
  seeds = list(seeds)
  base = wrapped.base if hasattr(wrapped, 'base') else wrapped
  marked = sample_many(base, n_residues, seeds, lora)
  clean = sample_many(base, n_residues, seeds if reference_seeds is None else list(reference_seeds))
  values = [0.0 if np.array_equal(a.ca, b.ca) else geom.kabsch(a.ca, b.ca)[1] for a, b in zip(marked, clean)]
  return float(np.mean(values))


#### Reports ####

REPORT_HEADER = ('run_id', 'model_tag', 'l', 'condition', 'bitacc', 'rmsd', 'detection_fpr',
                 'ident_accuracy', 'n_samples', 'seed')


def make_run_id(config_hash: str, seed, tag: str = '') -> str:
  return f'{config_hash}-s{seed}' + (f'-{tag}' if tag else '')


def run_hash(run_id: str) -> str:
  return run_id.split('-', 1)[0]


@dataclass
class ReportRow:
  run_id: str
  model_tag: str
  l: int
  condition: str
  bitacc: float
  rmsd: Optional[float] = None
  detection_fpr: Optional[float] = None
  ident_accuracy: Optional[float] = None
  n_samples: int = 0
  seed: str = ''

  def as_csv(self) -> list[str]:
    out = []
    for f in fields(self):
      value = getattr(self, f.name)
      out.append('' if value is None else repr(float(value)) if isinstance(value, float) else str(value))
    return out

  @classmethod
  def from_csv(cls, record: dict) -> 'ReportRow':
    def number(v, kind=float):
      return None if v in ('', None) else kind(v)
    return cls(record['run_id'], record['model_tag'], int(record['l']), record['condition'],
               number(record['bitacc']), number(record['rmsd']), number(record['detection_fpr']),
               number(record['ident_accuracy']), int(record['n_samples']), record['seed'])


class EvalReport:
  """
  Append-only table of evaluation rows backed by a CSV file.
  """

  def __init__(self, rows: Iterable[ReportRow] = ()):
    self.rows = list(rows)

  def append(self, row: ReportRow):
    self.rows.append(row)

  def extend(self, rows: Iterable[ReportRow]):
    self.rows.extend(rows)

  def config_hashes(self) -> set[str]:
    return {run_hash(r.run_id) for r in self.rows}

  def write_csv(self, path: Path):
    """
    Appends rows to `path`, writing the header first when the file is new.
    """
    path = Path(path)
    exists = path.is_file() and path.stat().st_size > 0
    if exists:
      with open(path, newline='', encoding='utf-8') as f:
        header = next(csv.reader(f), None)
      if tuple(header or ()) != REPORT_HEADER:
        raise StructMarkError(f'"{path}" is not an evaluation report (unexpected header {header}).')
    with open(path, 'a', newline='', encoding='utf-8') as f:
      writer = csv.writer(f)
      if not exists:
        writer.writerow(REPORT_HEADER)
      for row in self.rows:
        writer.writerow(row.as_csv())

  @classmethod
  def read_csv(cls, path: Path) -> 'EvalReport':
    with open(path, newline='', encoding='utf-8') as f:
      return cls(ReportRow.from_csv(r) for r in csv.DictReader(f))

  def as_dicts(self) -> list[dict]:
    return [asdict(r) for r in self.rows]
