from fractions import Fraction
import logging
import time

import numpy as np
import pytest

from structmark.mark.errors import CodeLengthError, ConfigError, IdentificationError, StructMarkError
from structmark.mark.evaluation.evalkit import (REPORT_HEADER, EvalReport, ReportRow, UserDatabase, binomial_pvalue,
                                                bit_accuracy, consistency_rmsd, detect, detect_logits,
                                                detection_threshold, identify, make_run_id, pack_bits, run_hash,
                                                simulate_identification, worker_count)
from structmark.mark.models.codec import WatermarkCode, decode
from structmark.mark.models.waterlora import attach


#### Detection ####

def test_bit_accuracy():
  assert bit_accuracy([1.0, -1.0, 2.0, -3.0], [1, 1, 0, 0]) == 0.5
  assert bit_accuracy([0.0, 0.1], [0, 1]) == 1.0
  with pytest.raises(CodeLengthError):
    bit_accuracy([1.0, 2.0], [1, 0, 1])


def test_binomial_tail_is_exact():
  assert binomial_pvalue(0, 16) == 1.0
  assert binomial_pvalue(16, 16) == 2.0 ** -16
  assert binomial_pvalue(15, 16) == 17 / 65536
  assert binomial_pvalue(33, 64) == pytest.approx(0.4503, abs=1e-4)
  with pytest.raises(StructMarkError):
    binomial_pvalue(5, 4)


def test_detection_thresholds(caplog):
  assert detection_threshold(16) == 15 / 16
  assert detection_threshold(32) == 26 / 32
  with caplog.at_level(logging.WARNING):
    assert detection_threshold(8) == 1.0
  assert 'No threshold' in caplog.text
  assert detection_threshold(8, fpr=0.01) == 1.0
  assert detection_threshold(8, fpr=0.05) == 7 / 8


def test_detect_logits():
  owner = WatermarkCode.from_string('1' * 16)
  logits = np.ones(16)
  logits[0] = -1.0
  result = detect_logits(logits, owner)
  assert (result.matched_bits, result.total_bits) == (15, 16)
  assert result.p_value == 17 / 65536
  assert result.positive
  logits[1] = -1.0
  assert not detect_logits(logits, owner).positive
  assert detect_logits(logits, owner, tau=0.5).positive


def test_detect_structure(chain, tiny_decoder):
  owner = WatermarkCode.from_string('10110010')
  result = detect(chain, owner, tiny_decoder, tau=0.0)
  assert result.positive
  assert result.total_bits == 8
  assert 0.0 <= result.bit_accuracy <= 1.0


#### Identification ####

def test_pack_bits():
  assert pack_bits([1, 0, 1]) == 5
  np.testing.assert_array_equal(pack_bits([[0, 1], [1, 1]]), [2, 3])
  assert pack_bits(np.ones(64, dtype=np.uint8)) == np.uint64(2 ** 64 - 1)


def test_nearest_breaks_ties_toward_lowest_id():
  db = UserDatabase([7, 3, 5], [[1, 1, 0, 0], [0, 0, 1, 1], [1, 1, 1, 1]])
  assert list(db.user_ids) == [3, 5, 7]
  assert db.nearest([1, 0, 1, 0]) == (3, 2)
  assert db.nearest([1, 1, 1, 0]) == (5, 1)
  assert db.code_of(7) == WatermarkCode.from_string('1100')


def test_database_errors():
  with pytest.raises(IdentificationError):
    UserDatabase([1, 1], [[0, 1], [1, 0]])
  with pytest.raises(IdentificationError):
    UserDatabase([1, 2], [[0, 1], [0, 1]])
  with pytest.raises(IdentificationError):
    UserDatabase([1, 2], [[0, 1]])
  with pytest.raises(IdentificationError):
    UserDatabase.random(5, 2, 0)
  db = UserDatabase.random(4, 2, 0)
  with pytest.raises(IdentificationError):
    db.code_of(9)
  with pytest.raises(CodeLengthError):
    db.identify_bits(np.zeros((1, 3)))


def test_random_database_is_distinct_and_seeded(tmp_path):
  db = UserDatabase.random(200, 8, 3)
  assert len(db) == 200
  assert np.unique(db.packed).size == 200
  np.testing.assert_array_equal(UserDatabase.random(200, 8, 3).bits, db.bits)
  path = tmp_path / 'users.json'
  db.save(path)
  loaded = UserDatabase.load(path)
  np.testing.assert_array_equal(loaded.bits, db.bits)
  np.testing.assert_array_equal(loaded.user_ids, db.user_ids)


def test_identify_bits_thread_count_does_not_matter():
  db = UserDatabase.random(50, 16, 1)
  probes = np.random.default_rng(2).integers(0, 2, size=(40, 16))
  np.testing.assert_array_equal(db.identify_bits(probes, workers=1), db.identify_bits(probes, workers=2))
  np.testing.assert_array_equal(db.identify_bits(db.bits, workers=3), db.user_ids)


def test_identify_structure(chain, tiny_decoder):
  bits = (np.asarray(tiny_decoder(chain.ca[None]).data[0]) > 0).astype(np.uint8)
  db = UserDatabase([10, 20], [bits, 1 - bits])
  assert identify(chain, db, tiny_decoder) == 10


def test_simulated_identification():
  assert simulate_identification(100, 16, 0.0, 50, 0) == 1.0
  assert simulate_identification(100, 16, 0.1, 50, 0) == simulate_identification(100, 16, 0.1, 50, 0, workers=2)
  assert simulate_identification(100, 16, 0.5, 200, 0) < 0.2
  with pytest.raises(IdentificationError):
    simulate_identification(256, 8, 0.0, 10, 0)
  with pytest.raises(IdentificationError):
    simulate_identification(1, 8, 0.0, 10, 0)


def test_worker_count(monkeypatch):
  monkeypatch.setenv('STRUCTMARK_THREADS', '3')
  assert worker_count() == 3
  monkeypatch.setenv('STRUCTMARK_THREADS', '0')
  assert worker_count() == 1
  monkeypatch.setenv('STRUCTMARK_THREADS', 'many')
  with pytest.raises(ConfigError):
    worker_count()
  monkeypatch.delenv('STRUCTMARK_THREADS')
  assert 1 <= worker_count() <= 8


#### Calibration and scale ####

def hamming_oracle(user_ids, bits, probes):
  """
  Linear scan over unpacked bits; ties go to the lowest user id.
  """
  user_ids, bits = np.asarray(user_ids), np.asarray(bits)
  found = []
  for probe in np.asarray(probes):
    distances = np.count_nonzero(bits != probe, axis=1)
    found.append(int(user_ids[distances == distances.min()].min()))
  return np.array(found)


def test_binomial_tail_matches_pascal_recurrence():
  tails = {0: [Fraction(1)]}
  for l in range(1, 33):
    previous = tails[l - 1] + [Fraction(0)]
    tails[l] = [Fraction(1)] + [(previous[k] + previous[k - 1]) / 2 for k in range(1, l + 1)]
    for k in range(l + 1):
      assert binomial_pvalue(k, l) == float(tails[l][k]), (k, l)


def test_identification_matches_brute_force_oracle():
  rng = np.random.default_rng(17)
  source = UserDatabase.random(5000, 32, 4)
  user_ids = rng.permutation(5000) * 3 + 7
  db = UserDatabase(user_ids, source.bits)
  members = rng.integers(0, 5000, size=100)
  flips = (rng.random((100, 32)) < 0.1).astype(np.uint8)
  probes = np.concatenate([source.bits[members] ^ flips, rng.integers(0, 2, size=(100, 32), dtype=np.uint8)])
  np.testing.assert_array_equal(db.identify_bits(probes, workers=2), hamming_oracle(user_ids, source.bits, probes))


def test_identification_ignores_insertion_order():
  rng = np.random.default_rng(5)
  db = UserDatabase.random(300, 16, 6)
  order = rng.permutation(300)
  shuffled = UserDatabase(db.user_ids[order], db.bits[order])
  np.testing.assert_array_equal(shuffled.user_ids, db.user_ids)
  np.testing.assert_array_equal(shuffled.bits, db.bits)
  probes = rng.integers(0, 2, size=(50, 16))
  np.testing.assert_array_equal(shuffled.identify_bits(probes, workers=1), db.identify_bits(probes, workers=1))


def test_wrong_code_accuracy_follows_hamming_distance(chain, tiny_decoder):
  logits = np.asarray(decode(chain, tiny_decoder))
  owner = WatermarkCode(tuple(int(b) for b in logits > 0))
  assert detect(chain, owner, tiny_decoder).bit_accuracy == 1.0
  for flipped in (1, 3, 8):
    wrong = WatermarkCode(tuple(1 - b if i < flipped else b for i, b in enumerate(owner.bits)))
    assert detect(chain, wrong, tiny_decoder).bit_accuracy == 1.0 - flipped / 8


@pytest.mark.slow
def test_detection_false_positive_rate_is_calibrated():
  trials = 200_000
  owner = WatermarkCode.from_string('1011001011010011')
  tau = detection_threshold(16)
  assert tau == 15 / 16
  logits = np.random.default_rng(12).standard_normal((trials, 16))
  positives = sum(detect_logits(row, owner, tau).positive for row in logits)
  expected = binomial_pvalue(15, 16)
  assert expected / 2 <= positives / trials <= 2 * expected


@pytest.mark.slow
def test_identification_at_a_million_users():
  n_users, l, p_bit_error, trials, seed = 10 ** 6, 32, 0.02, 1000, 9
  db = UserDatabase.random(n_users, l, [seed, 0])
  rng = np.random.default_rng([seed, 1])
  members = rng.integers(0, n_users, size=trials)
  flips = rng.random((trials, l)) < p_bit_error
  probes = db.bits[members] ^ flips.astype(np.uint8)

  start = time.perf_counter()
  found = db.identify_bits(probes)
  assert time.perf_counter() - start <= 60.0

  accuracy = float(np.mean(found == db.user_ids[members]))
  assert abs(accuracy - simulate_identification(n_users, l, p_bit_error, trials, seed)) <= 0.02
  assert accuracy >= 0.5
  np.testing.assert_array_equal(found[:100], hamming_oracle(db.user_ids, db.bits, probes[:100]))

#### Quality ####

def test_consistency_rmsd(trained_like_base):
  wrapped = attach(trained_like_base, rank=4)
  seeds = [[1, 0], [2, 0]]
  with wrapped.context(WatermarkCode.from_string('10110010'), alpha=0.0) as ctx:
    assert consistency_rmsd(wrapped, ctx, seeds, n_residues=10) == 0.0
    assert consistency_rmsd(wrapped, ctx, seeds, n_residues=10, reference_seeds=[[3, 0], [4, 0]]) > 0.0


#### Reports ####

def row(condition='none', run_id='abcd-s0', **kw):
  values = dict(bitacc=0.75, rmsd=0.5, detection_fpr=None, ident_accuracy=None, n_samples=4, seed='0')
  values.update(kw)
  return ReportRow(run_id, 'toy-diffusion', 8, condition, **values)


def test_run_ids():
  assert make_run_id('abcd', 3, 'eval') == 'abcd-s3-eval'
  assert make_run_id('abcd', 3) == 'abcd-s3'
  assert run_hash('abcd-s3-eval') == 'abcd'


def test_report_appends_and_reads_back(tmp_path):
  path = tmp_path / 'report.csv'
  EvalReport([row(), row('crop', bitacc=0.625)]).write_csv(path)
  EvalReport([row('rigid', run_id='ef01-s1', ident_accuracy=0.9)]).write_csv(path)
  lines = path.read_text().splitlines()
  assert lines[0] == ','.join(REPORT_HEADER)
  assert len(lines) == 4
  report = EvalReport.read_csv(path)
  assert [r.condition for r in report.rows] == ['none', 'crop', 'rigid']
  assert report.rows[1].bitacc == 0.625
  assert report.rows[0].detection_fpr is None
  assert report.rows[2].ident_accuracy == 0.9
  assert report.config_hashes() == {'abcd', 'ef01'}


def test_report_refuses_foreign_files(tmp_path):
  path = tmp_path / 'other.csv'
  path.write_text('a,b,c\n1,2,3\n')
  with pytest.raises(StructMarkError):
    EvalReport([row()]).write_csv(path)
