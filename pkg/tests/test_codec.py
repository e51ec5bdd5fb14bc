import numpy as np
import pytest

from structmark.mark.errors import CodeLengthError, GeometryError, StructureError
from structmark.mark.models.codec import (AugmentationSpec, CodecConfig, CropAugmentation, GaussianNoiseAugmentation,
                                          IdentityAugmentation, RigidAugmentation, WatermarkCode, augment,
                                          augment_per_item, build_local_frames, code_matrix, decode, encode,
                                          evaluate_codec, frame_bases, pretrain, pretrain_loss, sample_augmentation)
from structmark.mark.nn.tensor import Tensor
from structmark.mark.structure import geom
from structmark.mark.structure.struct_io import Structure, build_synthetic_corpus, gen_synthetic, ideal_helix


def randomize_head(encoder, seed=0, scale=0.5):
  rng = np.random.default_rng(seed)
  encoder.head.W.data = scale * rng.standard_normal(encoder.head.W.shape)


#### Codes ####

def test_code_parsing_and_formatting():
  code = WatermarkCode.from_string('10110010')
  assert code.length == 8
  assert code.to_string() == '10110010'
  np.testing.assert_array_equal(code.as_signed(), [1, -1, 1, 1, -1, -1, 1, -1])
  assert code_matrix([code, code]).shape == (2, 8)


@pytest.mark.parametrize('text', ['101', '1011001x', '1' * 64])
def test_bad_codes_are_rejected(text):
  with pytest.raises(CodeLengthError):
    WatermarkCode.from_string(text)


#### Frames ####

def test_right_angle_frame_is_the_standard_basis():
  coords = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
  bases = frame_bases(coords)
  np.testing.assert_allclose(bases[1], np.eye(3), atol=1e-15)


def test_frames_are_orthonormal_and_right_handed(chain):
  bases = frame_bases(chain.ca)
  eye = np.broadcast_to(np.eye(3), bases.shape)
  np.testing.assert_allclose(np.swapaxes(bases, -1, -2) @ bases, eye, atol=1e-12)
  np.testing.assert_allclose(np.linalg.det(bases), 1.0, atol=1e-12)


def test_frames_rotate_with_the_structure(chain):
  bases = frame_bases(chain.ca)
  for seed in range(20):
    g = geom.random_rigid(seed)
    moved = frame_bases(geom.apply_transform(chain.ca, g))
    np.testing.assert_allclose(moved, g.rotation @ bases, atol=1e-9)


def test_straight_chain_uses_fallback_frames():
  line = np.stack([np.arange(6) * 3.8, np.zeros(6), np.zeros(6)], axis=1)
  bases = frame_bases(line)
  assert np.all(np.isfinite(bases))
  np.testing.assert_allclose(np.swapaxes(bases, -1, -2) @ bases, np.broadcast_to(np.eye(3), bases.shape),
                             atol=1e-12)
  assert len(build_local_frames(line)) == 6


def test_frames_need_three_residues():
  with pytest.raises(GeometryError):
    frame_bases(np.zeros((2, 3)))


#### Encoder / Decoder ####

def test_zero_head_encoder_is_identity(chain, tiny_encoder, tiny_decoder):
  code = WatermarkCode.from_string('10110010')
  marked = encode(chain, code, tiny_encoder)
  np.testing.assert_array_equal(marked.ca, chain.ca)
  loss = pretrain_loss(tiny_encoder, tiny_decoder, chain.ca[None], code.as_array()[None])
  assert loss.struct_loss == 0.0


def test_encoder_is_equivariant(chain, tiny_encoder):
  randomize_head(tiny_encoder)
  codes = WatermarkCode.from_string('01100111').as_array()[None]
  disp = tiny_encoder.displacement(chain.ca[None], codes).data[0]
  assert np.max(np.abs(disp)) > 1e-3
  for seed in range(100):
    g = geom.random_rigid(seed)
    moved = tiny_encoder(geom.apply_transform(chain.ca, g)[None], codes).data[0]
    expected = geom.apply_transform(chain.ca + disp, g)
    assert np.max(np.abs(moved - expected)) < 1e-8


def test_displacement_is_bounded(chain, tiny_encoder):
  randomize_head(tiny_encoder, scale=50.0)
  disp = tiny_encoder.displacement(chain.ca[None], np.ones((1, 8))).data[0]
  assert np.all(np.linalg.norm(disp, axis=-1) <= np.sqrt(3.0) * tiny_encoder.delta_max + 1e-12)


def test_decoder_is_invariant(chain, tiny_decoder):
  logits = decode(chain, tiny_decoder)
  assert logits.shape == (8,)
  for seed in range(100):
    moved = chain.transformed(geom.random_rigid(seed))
    assert np.max(np.abs(decode(moved, tiny_decoder) - logits)) < 1e-9


def test_untrained_decoder_is_at_chance(tiny_decoder):
  coords = np.stack([gen_synthetic([8, i], 12).ca for i in range(200)])
  codes = np.random.default_rng(0).integers(0, 2, size=(200, 8))
  logits = decode(coords, tiny_decoder)
  assert abs(np.mean((logits > 0) == (codes > 0.5)) - 0.5) < 0.05


def test_code_length_mismatch(chain, tiny_encoder):
  with pytest.raises(CodeLengthError):
    encode(chain, WatermarkCode.from_string('1011'), tiny_encoder)
  with pytest.raises(CodeLengthError):
    tiny_encoder.displacement(chain.ca[None], np.ones((1, 16)))


#### Augmentations ####

def test_crop_keeps_a_contiguous_half():
  s = gen_synthetic(1, 64)
  cropped = CropAugmentation(0.5, seed=3).apply(s)
  assert cropped.n_residues == 32
  assert np.all(np.diff(cropped.seq_index) == 1)
  start = cropped.seq_index[0] - 1
  np.testing.assert_array_equal(cropped.ca, s.ca[start:start + 32])


def test_crop_refuses_to_leave_fewer_than_three():
  s = Structure(ideal_helix(4))
  with pytest.raises(StructureError):
    CropAugmentation(0.5).apply(s)


def test_noise_with_zero_sigma_is_identity(chain):
  assert GaussianNoiseAugmentation(0.0, seed=1).apply(chain) is chain
  assert augment(chain, IdentityAugmentation()) is chain


def test_rigid_augmentation_preserves_decoding(chain, tiny_decoder):
  moved = RigidAugmentation(seed=5).apply(chain)
  np.testing.assert_allclose(decode(moved, tiny_decoder), decode(chain, tiny_decoder), atol=1e-9)


@pytest.mark.parametrize('spec', [RigidAugmentation(2), GaussianNoiseAugmentation(0.3, 2), CropAugmentation(0.6, 2)])
def test_structure_application_matches_batch_item_zero(chain, spec):
  batched = spec.apply_tensor(Tensor(np.stack([chain.ca, chain.ca + 1.0]))).data[0]
  np.testing.assert_allclose(spec.apply(chain).ca, batched, atol=1e-12)


def test_augmentations_deserialize_from_their_dicts():
  for spec in (IdentityAugmentation(1), RigidAugmentation(2), GaussianNoiseAugmentation(0.1, 3),
               CropAugmentation(0.7, 4)):
    again = AugmentationSpec.deserialize(spec.to_dict())
    assert type(again) is type(spec)
    assert again.to_dict() == spec.to_dict()
  with pytest.raises(StructureError):
    AugmentationSpec.deserialize(dict(kind='mirror'))


def test_augmentation_sampling_is_seeded():
  first = [sample_augmentation(np.random.default_rng([1, i])).to_dict() for i in range(50)]
  second = [sample_augmentation(np.random.default_rng([1, i])).to_dict() for i in range(50)]
  assert first == second
  kinds = {d['kind'] for d in first}
  assert kinds == {'identity', 'rigid', 'gaussian_noise', 'crop'}
  always = [sample_augmentation(np.random.default_rng(i), identity_prob=1.0).kind for i in range(10)]
  assert set(always) == {'identity'}


#### Pretraining ####

def test_pretrain_loss_matches_scripted_formula(short_chains, tiny_encoder, tiny_decoder):
  randomize_head(tiny_encoder, scale=0.2)
  coords = np.stack([s.ca for s in short_chains[:3]])
  codes = np.array([[1, 0, 1, 1, 0, 0, 1, 0], [0, 0, 0, 0, 1, 1, 1, 1], [1, 1, 1, 1, 1, 1, 1, 1]], dtype=float)
  result = pretrain_loss(tiny_encoder, tiny_decoder, coords, codes, gamma=2.0)

  disp = tiny_encoder.displacement(coords, codes).data
  z = tiny_decoder(coords + disp).data
  bce = np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - z * codes)
  struct = np.mean(np.linalg.norm(disp, axis=-1))
  assert abs(float(result.total.data) - (bce + 2.0 * struct)) < 1e-10


def test_pretrain_loss_gradients(short_chains, tiny_encoder, tiny_decoder, gradient_check):
  randomize_head(tiny_encoder, scale=0.2)
  coords = np.stack([s.ca for s in short_chains[:2]])
  codes = np.array([[1, 0, 1, 1, 0, 0, 1, 0], [0, 1, 0, 0, 1, 1, 1, 1]], dtype=float)
  crop = CropAugmentation(0.75, seed=1)
  params = [tiny_encoder.head.W, tiny_encoder.code_embed.W, tiny_decoder.head.W, tiny_decoder.trunk.edge_embed.W]
  gradient_check(lambda: pretrain_loss(tiny_encoder, tiny_decoder, coords, codes, crop).total, params, count=3)


def test_per_item_augmentations_decode_each_item_separately(short_chains, tiny_encoder, tiny_decoder):
  randomize_head(tiny_encoder, scale=0.2)
  coords = np.stack([s.ca for s in short_chains[:3]])
  codes = np.array([[1, 0, 1, 1, 0, 0, 1, 0], [0, 0, 0, 0, 1, 1, 1, 1], [1, 1, 0, 1, 1, 0, 1, 1]], dtype=float)
  specs = [CropAugmentation(0.75, seed=1), IdentityAugmentation(), RigidAugmentation(seed=3)]
  result = pretrain_loss(tiny_encoder, tiny_decoder, coords, codes, specs, gamma=2.0)

  watermarked = coords + result.displacement
  for b, spec in enumerate(specs):
    alone = tiny_decoder(spec.apply_tensor(Tensor(watermarked[b:b + 1]))).data[0]
    np.testing.assert_allclose(result.logits[b], alone, atol=1e-10)
  z = result.logits
  bce = np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - z * codes)
  assert result.bce == pytest.approx(bce, abs=1e-10)

  groups = augment_per_item(Tensor(watermarked), specs)
  assert [list(idx) for idx, _ in groups] == [[0], [1, 2]]
  assert [items.shape[1] for _, items in groups] == [9, 12]
  with pytest.raises(StructureError):
    augment_per_item(Tensor(watermarked), specs[:2])


def test_identity_per_item_matches_unaugmented_loss(short_chains, tiny_encoder, tiny_decoder):
  randomize_head(tiny_encoder, scale=0.2)
  coords = np.stack([s.ca for s in short_chains[:4]])
  codes = np.random.default_rng(3).integers(0, 2, size=(4, 8)).astype(float)
  shared = pretrain_loss(tiny_encoder, tiny_decoder, coords, codes)
  per_item = pretrain_loss(tiny_encoder, tiny_decoder, coords, codes, [IdentityAugmentation()] * 4)
  assert float(per_item.total.data) == pytest.approx(float(shared.total.data), abs=1e-12)
  np.testing.assert_allclose(per_item.logits, shared.logits, atol=1e-12)


def test_per_item_loss_gradients(short_chains, tiny_encoder, tiny_decoder, gradient_check):
  randomize_head(tiny_encoder, scale=0.2)
  coords = np.stack([s.ca for s in short_chains[:2]])
  codes = np.array([[1, 0, 1, 1, 0, 0, 1, 0], [0, 1, 0, 0, 1, 1, 1, 1]], dtype=float)
  specs = [CropAugmentation(0.75, seed=1), GaussianNoiseAugmentation(0.1, seed=2)]
  params = [tiny_encoder.head.W, tiny_decoder.head.W]
  gradient_check(lambda: pretrain_loss(tiny_encoder, tiny_decoder, coords, codes, specs).total, params, count=3)


def test_huge_gamma_suppresses_displacement(short_chains):
  cfg = CodecConfig(width=8, rounds=1, k_neighbors=4, gamma=1e6, lr=1e-3, batch_size=8, epochs=1,
                    keep_best=False, seed=0)
  result = pretrain(short_chains, cfg)
  metrics = evaluate_codec(result.encoder, result.decoder, short_chains, seed=1, gamma=cfg.gamma)
  assert metrics['rmsd'] < 0.05


def test_pretrain_logs_every_epoch(tmp_path, short_chains):
  log = tmp_path / 'codec.log.jsonl'
  cfg = CodecConfig(width=8, rounds=1, k_neighbors=4, lr=1e-3, batch_size=4, epochs=2, seed=0)
  result = pretrain(short_chains, cfg, log)
  assert len(result.log) == 2
  assert len(log.read_text().splitlines()) == 2
  assert set(result.log[0]) >= {'epoch', 'bce', 'struct_loss', 'val_bitacc', 'val_rmsd', 'val_loss'}
  assert result.best_epoch in (0, 1)
  again = pretrain(short_chains, cfg)
  for name, value in result.encoder.state_dict().items():
    np.testing.assert_array_equal(value, again.encoder.state_dict()[name])


def test_pretrain_needs_structures():
  with pytest.raises(StructureError):
    pretrain([], CodecConfig(epochs=1))


@pytest.mark.slow
def test_desk_codec_reaches_high_bit_accuracy():
  corpus = build_synthetic_corpus(2000, 48, 64, seed=0)
  cfg = CodecConfig(code_length=8, lr=1e-3, epochs=20, seed=0)
  result = pretrain(corpus, cfg)
  held_out = corpus.split('test').structures()
  metrics = evaluate_codec(result.encoder, result.decoder, held_out, seed=1)
  assert metrics['bitacc'] >= 0.95
  assert metrics['rmsd'] <= 1.0

  losses = np.array([r['bce'] + cfg.gamma * r['struct_loss'] for r in result.log])
  moving = np.convolve(losses, np.ones(5) / 5, mode='valid')
  assert moving[-1] < moving[0]

  code = WatermarkCode.from_string('10110010')
  wrong = WatermarkCode.from_string('10110101')
  hamming = sum(a != b for a, b in zip(code.bits, wrong.bits))
  logits = np.stack([decode(encode(s, code, result.encoder), result.decoder) for s in held_out])
  true_acc = np.mean((logits > 0) == (code.as_array() > 0.5))
  wrong_acc = np.mean((logits > 0) == (wrong.as_array() > 0.5))
  assert true_acc >= 0.9
  assert abs(wrong_acc - (1.0 - hamming / 8)) <= (1.0 - true_acc) + 1e-12
