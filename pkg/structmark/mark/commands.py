"""
Subcommand handlers. Each entry in COMMAND_HANDLERS pairs a handler
`(app, args) -> exit code` with a function that declares its flags.
"""
import argparse
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from structmark.mark.errors import (AcceptanceError, ConfigError, MissingArtifactError,
                                    PDBParseError, StructMarkError)
from structmark.mark.evaluation.attacks import (AttackManager, FinetuneEraseAttack, SystemBundle,
                                                attack_model_finetune, attack_structure, run_attack_suite)
from structmark.mark.evaluation.evalkit import (EvalReport, ReportRow, UserDatabase, binomial_pvalue,
                                                consistency_rmsd, detect, detection_threshold, identify,
                                                make_run_id, simulate_identification)
from structmark.mark.models.codec import (CodecConfig, WatermarkCode, decode, encode, evaluate_codec, pretrain)
from structmark.mark.models.finetune import FinetuneConfig, run_finetune
from structmark.mark.models.genmodel import GenConfig, sample_many, train_base
from structmark.mark.pluginmgr import StructMarkBehavior
from structmark.mark.structure.struct_io import (Dataset, DatasetEntry, SPLITS, build_synthetic_corpus,
                                                 read_pdb)
from structmark.mark.widgets.plots import plot_attack_suite, plot_training_log, read_log

LOGGER = logging.getLogger(__name__)


def parse_code(text: Optional[str]) -> Optional[WatermarkCode]:
  if text is None:
    return None
  try:
    return WatermarkCode.from_string(text)
  except StructMarkError as err:
    raise ConfigError(f'Bad code "{text}": {err}') from err


def parse_int_list(text: str) -> list[int]:
  try:
    return [int(v) for v in text.split(',') if v.strip()]
  except ValueError:
    raise argparse.ArgumentTypeError(f'Expected comma-separated integers, got "{text}"')


def _seed_flag(parser: argparse.ArgumentParser, required: bool = True):
  parser.add_argument('--seed', type=int, required=required, help='Seed for every random draw of the command.')


#### gen-corpus ####

def configure_gen_corpus(parser):
  _seed_flag(parser)
  parser.add_argument('--out', type=Path, required=True, help='Dataset manifest to write.')
  parser.add_argument('--pdb-dir', type=Path, default=None, help='Import PDB files instead of synthesizing.')


def import_pdb_dir(directory: Path, min_len: int, max_len: int, fractions, seed: int) -> Dataset:
  """
  Length-filtered PDB import with a seeded train/val/test assignment.
  """
  if not directory.is_dir():
    raise MissingArtifactError(f'PDB directory "{directory}" does not exist.')
  entries = []
  for path in sorted(directory.glob('*.pdb')):
    try:
      s = read_pdb(path)
    except PDBParseError as err:
      LOGGER.warning(f'Skipping "{path.name}": {err}')
      continue
    if min_len <= s.n_residues <= max_len:
      entries.append(DatasetEntry(s.name, s.n_residues, provenance='pdb', path=path.resolve(),
                                  resolution=s.resolution))
  order = np.random.default_rng([seed, 0x5EED]).permutation(len(entries))
  n_train = int(round(fractions[0] * len(entries)))
  n_val = int(round(fractions[1] * len(entries)))
  for rank, idx in enumerate(order):
    entries[idx].split = SPLITS[0] if rank < n_train else SPLITS[1] if rank < n_train + n_val else SPLITS[2]
  return Dataset(entries)


def cmd_gen_corpus(app, args) -> int:
  cfg = app.config.block('corpus')
  seed = app.seed()
  if args.pdb_dir is not None:
    dataset = import_pdb_dir(args.pdb_dir, cfg['filter_min_len'], cfg['filter_max_len'], cfg['fractions'], seed)
  else:
    dataset = build_synthetic_corpus(cfg['n_structures'], cfg['min_len'], cfg['max_len'], cfg['topology'],
                                     seed, tuple(cfg['fractions']))
  if len(dataset) == 0:
    raise MissingArtifactError('The corpus is empty.')
  args.out.parent.mkdir(parents=True, exist_ok=True)
  dataset.save_manifest(args.out, app.config_hash)
  counts = {split: len(dataset.split(split)) for split in SPLITS}
  print(f'{args.out}: ' + ', '.join(f'{k} {v}' for k, v in counts.items()))
  return 0


#### pretrain-codec / train-base / finetune ####

def _training_flags(parser):
  _seed_flag(parser)
  parser.add_argument('--corpus', type=Path, required=True, help='Dataset manifest.')
  parser.add_argument('--out', type=Path, required=True, help='Checkpoint to write.')
  parser.add_argument('--log', type=Path, default=None, help='JSON-lines log (default: next to --out).')


def cmd_pretrain_codec(app, args) -> int:
  dataset = app.load_corpus(args.corpus)
  cfg = CodecConfig.from_dict(dict(app.config.block('codec'), seed=app.seed()))
  result = pretrain(dataset, cfg, app.log_path(args.out, args.log))
  ckpt = app.new_checkpoint()
  ckpt.add_namespace('encoder', result.encoder.state_dict(), result.encoder.arch())
  ckpt.add_namespace('decoder', result.decoder.state_dict(), result.decoder.arch())
  ckpt.save(args.out)
  final = result.log[result.best_epoch] if result.log else {}
  print(f"val bitacc {final.get('val_bitacc', float('nan')):.4f}, val rmsd {final.get('val_rmsd', float('nan')):.4f}")
  return 0


def cmd_train_base(app, args) -> int:
  dataset = app.load_corpus(args.corpus)
  cfg = GenConfig.from_dict(dict(app.config.block('genmodel'), seed=app.seed()))
  result = train_base(dataset, cfg, app.log_path(args.out, args.log))
  ckpt = app.new_checkpoint()
  ckpt.add_namespace('base', result.model.state_dict(), result.model.arch())
  ckpt.save(args.out)
  if result.log:
    print(f"loss {result.log[0]['loss']:.4f} -> {result.log[-1]['loss']:.4f}")
  return 0


def configure_finetune(parser):
  _training_flags(parser)
  parser.add_argument('--base', type=Path, required=True, help='Checkpoint with the trained generator.')
  parser.add_argument('--codec', type=Path, required=True, help='Checkpoint with the Stage-1 encoder and decoder.')
  parser.add_argument('--adapters-out', type=Path, default=None,
                      help='Also write a checkpoint without base weights.')


def cmd_finetune(app, args) -> int:
  dataset = app.load_corpus(args.corpus)
  base_ckpt = app.load_checkpoint(args.base)
  codec_ckpt = app.load_checkpoint(args.codec)
  base = app.restore_base(base_ckpt)
  encoder = app.restore_encoder(codec_ckpt)
  decoder = app.restore_decoder(codec_ckpt)
  values = dict(app.config.block('finetune'), **app.config.block('waterlora'), seed=app.seed())
  result = run_finetune(base, decoder, dataset, FinetuneConfig.from_dict(values), app.log_path(args.out, args.log))

  ckpt = app.new_checkpoint()
  ckpt.add_namespace('base', base.state_dict(), base.arch())
  ckpt.add_namespace('waterlora', result.wrapped.state_dict(), result.wrapped.arch())
  ckpt.add_namespace('encoder', encoder.state_dict(), encoder.arch())
  ckpt.add_namespace('decoder', result.decoder.state_dict(), result.decoder.arch())
  ckpt.save(args.out)
  if args.adapters_out is not None:
    shipped = app.new_checkpoint()
    shipped.add_namespace('waterlora', result.wrapped.state_dict(), result.wrapped.arch())
    shipped.add_namespace('decoder', result.decoder.state_dict(), result.decoder.arch())
    shipped.save(args.adapters_out)
  final = result.log[result.best_epoch] if result.log else {}
  print(f"sample bitacc {final.get('sample_bitacc', float('nan')):.4f}, "
        f"sample rmsd {final.get('sample_rmsd', float('nan')):.4f}")
  return 0


#### sample / embed / extract ####

def configure_sample(parser):
  _seed_flag(parser)
  parser.add_argument('--model', type=Path, required=True, help='Checkpoint with base (and adapter) weights.')
  parser.add_argument('--out-dir', type=Path, required=True)
  parser.add_argument('--count', type=int, default=1)
  parser.add_argument('--n-residues', type=int, default=None)
  parser.add_argument('--code', default=None, help='Watermark bit string, e.g. 10110010.')
  parser.add_argument('--alpha', type=float, default=None, help='Adapter scaling (default from the checkpoint).')


def cmd_sample(app, args) -> int:
  seed = app.seed()
  ckpt = app.load_checkpoint(args.model)
  code = parse_code(args.code)
  n_residues = args.n_residues or app.config.get_value('eval.n_residues')
  seeds = [[seed, i] for i in range(args.count)]
  if code is None:
    if args.alpha is not None:
      LOGGER.warning('--alpha has no effect without --code.')
    samples = sample_many(app.restore_base(ckpt), n_residues, seeds)
  else:
    wrapped = app.restore_wrapped(ckpt)
    samples = sample_many(wrapped.base, n_residues, seeds, wrapped.context(code, args.alpha))
  for i, s in enumerate(samples):
    path = args.out_dir / f'sample-{i:04d}.pdb'
    app.write_structure(s, path)
    print(path)
  return 0


def _structure_flags(parser, checkpoint_help: str):
  parser.add_argument('pdb', type=Path, help='Input PDB file.')
  parser.add_argument('--model', type=Path, required=True, help=checkpoint_help)


def configure_embed(parser):
  _structure_flags(parser, 'Checkpoint with the Stage-1 encoder.')
  parser.add_argument('--code', required=True)
  parser.add_argument('--out', type=Path, required=True)


def cmd_embed(app, args) -> int:
  encoder = app.restore_encoder(app.load_checkpoint(args.model))
  marked = encode(app.read_structure(args.pdb), parse_code(args.code), encoder)
  app.write_structure(marked, args.out)
  return 0


def configure_extract(parser):
  _structure_flags(parser, 'Checkpoint with the decoder.')
  parser.add_argument('--code', default=None, help='Claimed code to score the decoded bits against.')
  parser.add_argument('--db', type=Path, default=None, help='User database JSON; reports the nearest user.')


def cmd_extract(app, args) -> int:
  """
  Prints the decoded bits and a p-value. The p-value scores the bits against
  `--code`, else against the nearest user of `--db`, else against the
  decoded code itself (the chance that an unmarked structure decodes to it).
  """
  decoder = app.restore_decoder(app.load_checkpoint(args.model))
  s = app.read_structure(args.pdb)
  logits = decode(s, decoder)
  bits = WatermarkCode(tuple(int(v) for v in logits > 0))
  reference = parse_code(args.code)
  print(f'bits: {bits.to_string()}')
  if reference is None and args.db is not None:
    db = UserDatabase.load(args.db)
    user_id, distance = db.nearest(bits.as_array())
    reference = db.code_of(user_id)
    print(f'user: {user_id} (distance {distance})')
  reference = reference or bits
  if reference.length != bits.length:
    raise ConfigError(f'Code has {reference.length} bits, the decoder emits {bits.length}.')
  matched = int(np.sum(reference.as_array() == bits.as_array()))
  print(f'matched: {matched}/{bits.length}')
  print(f'p-value: {binomial_pvalue(matched, bits.length):.6g}')
  return 0


#### attack ####

def configure_attack(parser):
  _seed_flag(parser)
  parser.add_argument('pdb', type=Path, nargs='?', default=None, help='Structure to attack.')
  parser.add_argument('--kind', required=True, choices=sorted(StructMarkBehavior.ATTACK_TYPES))
  parser.add_argument('--out', type=Path, required=True, help='Attacked PDB (or checkpoint for finetune_erase).')
  parser.add_argument('--keep', type=float, default=0.5)
  parser.add_argument('--sigma', type=float, default=0.2)
  parser.add_argument('--code', default=None, help='Second code for multi_message.')
  parser.add_argument('--owner', default=None, help='Original code; multi_message refuses to re-embed it.')
  parser.add_argument('--model', type=Path, default=None,
                      help='Checkpoint with the encoder (multi_message) or the watermarked model (finetune_erase).')
  parser.add_argument('--corpus', type=Path, default=None, help='Clean corpus for finetune_erase.')
  parser.add_argument('--steps', type=int, default=None, help='Adam steps for finetune_erase (default one epoch).')


def _attack_from_args(args, seed: int):
  params = dict(kind=args.kind, seed=seed)
  if args.kind == 'crop':
    params['keep'] = args.keep
  elif args.kind == 'noise':
    params['sigma'] = args.sigma
  elif args.kind == 'multi_message':
    params['code'] = args.code
  elif args.kind == 'finetune_erase':
    params['steps'] = args.steps
  return AttackManager.deserialize(params)


def cmd_attack(app, args) -> int:
  spec = _attack_from_args(args, app.seed())
  if spec.model_level:
    ckpt = app.load_checkpoint(args.model)
    wrapped = app.restore_wrapped(ckpt)
    clean = app.load_corpus(args.corpus).split('train').structures()
    values = app.config.block('finetune')
    attacked = attack_model_finetune(wrapped, clean, spec.steps, values['lr'], values['batch_size'], spec.seed)
    out = app.new_checkpoint().merge(ckpt)
    out.add_namespace('waterlora', attacked.state_dict(), attacked.arch())
    out.save(args.out)
    return 0

  if args.pdb is None:
    raise ConfigError(f"The '{spec.kind}' attack needs an input PDB.")
  encoder = None
  if spec.kind == 'multi_message':
    encoder = app.restore_encoder(app.load_checkpoint(args.model))
  attacked = attack_structure(app.read_structure(args.pdb), spec, encoder, parse_code(args.owner))
  app.write_structure(attacked, args.out)
  return 0


#### detect / identify ####

def configure_detect(parser):
  _structure_flags(parser, 'Checkpoint with the decoder.')
  parser.add_argument('--owner', required=True, help="Owner's code.")
  parser.add_argument('--tau', type=float, default=None, help='Bit-accuracy threshold (default: FPR <= 1e-3).')


def cmd_detect(app, args) -> int:
  decoder = app.restore_decoder(app.load_checkpoint(args.model))
  owner = parse_code(args.owner)
  tau = args.tau
  if tau is None:
    tau = detection_threshold(owner.length, app.config.get_value('eval.detection_fpr'))
  result = detect(app.read_structure(args.pdb), owner, decoder, tau)
  print(f"{'POSITIVE' if result.positive else 'negative'}: {result.matched_bits}/{result.total_bits} bits, "
        f'p-value {result.p_value:.6g}, threshold {result.threshold:.4f}')
  return 0


def configure_identify(parser):
  _seed_flag(parser, required=False)
  parser.add_argument('pdb', type=Path, nargs='?', default=None)
  parser.add_argument('--model', type=Path, default=None, help='Checkpoint with the decoder.')
  parser.add_argument('--db', type=Path, default=None, help='User database JSON.')
  parser.add_argument('--make-db', type=int, default=None, metavar='N', help='Write a random N-user database to --db.')
  parser.add_argument('--simulate', action='store_true', help='Run the bit-flip identification simulator.')
  parser.add_argument('--populations', type=parse_int_list, default=None, help='e.g. 1000,10000,100000,1000000')
  parser.add_argument('--bits', type=int, default=None, help='Code length for --make-db/--simulate.')
  parser.add_argument('--p-bit-error', type=float, default=None)
  parser.add_argument('--trials', type=int, default=None)
  parser.add_argument('--report', type=Path, default=None, help='Append simulator rows to this CSV report.')


def cmd_identify(app, args) -> int:
  cfg = app.config.block('eval')
  l = args.bits or app.config.get_value('codec.code_length')
  if args.make_db is not None:
    if args.db is None:
      raise ConfigError('--make-db needs --db to write to.')
    db = UserDatabase.random(args.make_db, l, [app.seed(), 4])
    args.db.parent.mkdir(parents=True, exist_ok=True)
    db.save(args.db)
    print(f'{args.db}: {len(db)} users, {l}-bit codes')
    return 0

  if args.simulate:
    seed = app.seed()
    p = cfg['p_bit_error'] if args.p_bit_error is None else args.p_bit_error
    trials = args.trials or cfg['ident_trials']
    rows = []
    for n_users in args.populations or cfg['populations']:
      accuracy = simulate_identification(n_users, l, p, trials, [seed, n_users])
      print(f'N={n_users}: accuracy {accuracy:.4f}')
      rows.append(ReportRow(make_run_id(app.config_hash, seed), cfg['model_tag'], l, f'ident-sim-N{n_users}',
                            1.0 - p, None, None, accuracy, trials, str(seed)))
    if args.report is not None:
      EvalReport(rows).write_csv(args.report)
    return 0

  if args.pdb is None or args.db is None:
    raise ConfigError('identify needs a PDB and --db (or --make-db / --simulate).')
  if not args.db.is_file():
    raise MissingArtifactError(f'User database "{args.db}" does not exist.')
  decoder = app.restore_decoder(app.load_checkpoint(args.model))
  user_id = identify(app.read_structure(args.pdb), UserDatabase.load(args.db), decoder)
  print(f'user: {user_id}')
  return 0


#### eval-report ####

def configure_eval_report(parser):
  _seed_flag(parser)
  parser.add_argument('--model', type=Path, default=None, help='Fine-tuned checkpoint (all namespaces).')
  parser.add_argument('--corpus', type=Path, default=None, help='Clean corpus (fine-tune attack, sweeps).')
  parser.add_argument('--report', type=Path, required=True, help='CSV report to append to.')
  parser.add_argument('--check', action='store_true', help='Exit 3 when an acceptance floor is missed.')
  parser.add_argument('--force', action='store_true', help='Accept inputs produced by different configs.')
  parser.add_argument('--sweep-lengths', type=parse_int_list, default=None, help='e.g. 4,8,16,32')
  parser.add_argument('--figures', type=Path, default=None, help='Directory for PNG figures.')
  parser.add_argument('--logs', type=Path, nargs='*', default=[], help='Training logs to plot.')
  parser.add_argument('--skip-attacks', action='store_true')


def _check_hashes(app, args, ckpt_hash: str):
  hashes = {app.config_hash}
  if ckpt_hash:
    hashes.add(ckpt_hash)
  if args.corpus is not None:
    hashes.add(app.manifest_hash(args.corpus) or app.config_hash)
  if args.report.is_file() and args.report.stat().st_size > 0:
    hashes |= EvalReport.read_csv(args.report).config_hashes()
  if len(hashes) > 1:
    if not args.force:
      raise ConfigError(f'Inputs come from different configurations {sorted(hashes)}; pass --force to mix them.')
    LOGGER.warning(f'Mixing configurations {sorted(hashes)}.')


def evaluate_system(app, system: SystemBundle, seed: int) -> list[ReportRow]:
  """
  Watermarked sampling (bit accuracy, consistency RMSD, analytic detection
  FPR) and end-to-end identification against a random user database.
  """
  cfg = app.config.block('eval')
  wrapped, decoder = system.wrapped, system.decoder
  l = wrapped.code_length
  run_id = make_run_id(app.config_hash, seed)
  tau = detection_threshold(l, cfg['detection_fpr'])
  fpr = binomial_pvalue(int(np.ceil(tau * l - 1e-9)), l)

  db = UserDatabase.random(cfg['ident_users'], l, [seed, 5])
  rng = np.random.default_rng([seed, 6])
  members = rng.integers(0, len(db), size=cfg['n_samples'])
  codes = db.bits[members].astype(np.float64)
  seeds = [[seed, i, 6] for i in range(cfg['n_samples'])]
  samples = sample_many(wrapped.base, system.n_residues, seeds, wrapped.context(codes))
  logits = decode(np.stack([s.ca for s in samples]), decoder)
  bitacc = float(np.mean((logits > 0) == (codes > 0.5)))
  found = db.identify_bits(logits > 0)
  ident = float(np.mean(found == db.user_ids[members]))

  ref_codes = rng.integers(0, 2, size=(cfg['consistency_seeds'], l)).astype(np.float64)
  ref_seeds = [[seed, i, 7] for i in range(cfg['consistency_seeds'])]
  rmsd = consistency_rmsd(wrapped, wrapped.context(ref_codes), ref_seeds, system.n_residues)

  oracle = simulate_identification(len(db), l, 1.0 - bitacc, cfg['ident_trials'], [seed, 8])
  LOGGER.info(f'Sampled bitacc {bitacc:.4f}, consistency rmsd {rmsd:.3f}, identification {ident:.4f} '
              f'(oracle {oracle:.4f})')
  tag = system.model_tag
  return [ReportRow(run_id, tag, l, 'watermarked', bitacc, rmsd, fpr, None, cfg['n_samples'], str(seed)),
          ReportRow(run_id, tag, l, f'identify-N{len(db)}', bitacc, None, fpr, ident, cfg['n_samples'], str(seed)),
          ReportRow(run_id, tag, l, f'identify-oracle-N{len(db)}', bitacc, None, None, oracle,
                    cfg['ident_trials'], str(seed))]


def sweep_lengths(app, dataset: Dataset, lengths, seed: int) -> list[ReportRow]:
  """
  One Stage-1 codec per code length, scored on the held-out split.
  """
  cfg = app.config.block('eval')
  held_out = dataset.split('test').structures() or dataset.split('val').structures() or dataset.structures()
  rows = []
  for l in lengths:
    codec = CodecConfig.from_dict(dict(app.config.block('codec'), code_length=l, epochs=cfg['sweep_epochs'],
                                       seed=seed))
    result = pretrain(dataset, codec)
    metrics = evaluate_codec(result.encoder, result.decoder, held_out[:codec.max_val], [seed, l, 9],
                             codec.batch_size, codec.gamma)
    tau = detection_threshold(l, cfg['detection_fpr'])
    fpr = binomial_pvalue(int(np.ceil(tau * l - 1e-9)), l)
    rows.append(ReportRow(make_run_id(app.config_hash, seed, f'l{l}'), 'codec', l, f'codec-l{l}',
                          metrics['bitacc'], metrics['rmsd'], fpr, None, len(held_out[:codec.max_val]), str(seed)))
  return rows


def acceptance_failures(cfg: dict, rows: list[ReportRow]) -> list[str]:
  by_condition = {r.condition: r for r in rows}
  failures = []
  marked = by_condition.get('watermarked')
  if marked is not None:
    if marked.bitacc < cfg['min_sample_bitacc']:
      failures.append(f"sampled bit accuracy {marked.bitacc:.4f} < {cfg['min_sample_bitacc']}")
    if marked.rmsd is not None and marked.rmsd > cfg['max_consistency_rmsd']:
      failures.append(f"consistency rmsd {marked.rmsd:.3f} > {cfg['max_consistency_rmsd']}")
  baseline = by_condition.get('none')
  if baseline is not None and baseline.bitacc > 0:
    rigid = by_condition.get('rigid')
    if rigid is not None and abs(rigid.bitacc - baseline.bitacc) > 1e-9:
      failures.append(f'rigid attack changed bit accuracy ({baseline.bitacc} -> {rigid.bitacc})')
    floors = dict(crop=cfg['min_crop_retention'], noise=cfg['min_noise_retention'],
                  finetune_erase=cfg['min_finetune_retention'], multi_message=cfg['min_multi_message_retention'])
    for condition, floor in floors.items():
      row = by_condition.get(condition)
      if row is not None and row.bitacc / baseline.bitacc < floor:
        failures.append(f'{condition} retains {row.bitacc / baseline.bitacc:.3f} of the baseline (< {floor})')
  return failures


def cmd_eval_report(app, args) -> int:
  seed = app.seed()
  cfg = app.config.block('eval')
  ckpt = app.load_checkpoint(args.model) if args.model is not None else None
  _check_hashes(app, args, ckpt.config_hash if ckpt else '')
  dataset = app.load_corpus(args.corpus) if args.corpus is not None else None

  rows = []
  attack_rows = []
  if ckpt is not None:
    wrapped = app.restore_wrapped(ckpt)
    system = SystemBundle(wrapped, app.restore_decoder(ckpt), app.restore_encoder(ckpt),
                          dataset.split('train').structures() if dataset is not None else None,
                          app.config_hash, cfg['model_tag'], cfg['n_residues'])
    rows.extend(evaluate_system(app, system, seed))
    if not args.skip_attacks:
      specs = [AttackManager.deserialize(dict(spec, seed=spec.get('seed', seed)))
               for spec in app.config.get_value('attacks.suite')]
      if system.clean is None:
        skipped = [s.kind for s in specs if isinstance(s, FinetuneEraseAttack)]
        if skipped:
          LOGGER.warning(f'No --corpus given; skipping {skipped}.')
        specs = [s for s in specs if not isinstance(s, FinetuneEraseAttack)]
      attack_rows = run_attack_suite(system, specs, app.config.get_value('attacks.n_samples'), seed)
      rows.extend(attack_rows)

  if args.sweep_lengths:
    if dataset is None:
      raise ConfigError('--sweep-lengths needs --corpus.')
    rows.extend(sweep_lengths(app, dataset, args.sweep_lengths, seed))

  if not rows:
    raise ConfigError('Nothing to evaluate: pass --model and/or --sweep-lengths.')
  EvalReport(rows).write_csv(args.report)
  for row in rows:
    print(','.join(row.as_csv()))

  if args.figures is not None:
    args.figures.mkdir(parents=True, exist_ok=True)
    if attack_rows:
      plot_attack_suite(attack_rows, args.figures / 'attacks.png')
    for log in args.logs:
      if not log.is_file():
        raise MissingArtifactError(f'Training log "{log}" does not exist.')
      records = read_log(log)
      keys = [k for k, v in (records[0] if records else {}).items()
              if k not in ('epoch', 'eta') and isinstance(v, (int, float))]
      plot_training_log(log, args.figures / f'{log.name.split(".")[0]}.png', keys)

  if args.check:
    failures = acceptance_failures(cfg, rows)
    if failures:
      raise AcceptanceError('; '.join(failures))
    print('acceptance: ok')
  return 0


StructMarkBehavior.COMMAND_HANDLERS.update({
  'gen-corpus': (cmd_gen_corpus, configure_gen_corpus),
  'pretrain-codec': (cmd_pretrain_codec, _training_flags),
  'train-base': (cmd_train_base, _training_flags),
  'finetune': (cmd_finetune, configure_finetune),
  'sample': (cmd_sample, configure_sample),
  'embed': (cmd_embed, configure_embed),
  'extract': (cmd_extract, configure_extract),
  'attack': (cmd_attack, configure_attack),
  'detect': (cmd_detect, configure_detect),
  'identify': (cmd_identify, configure_identify),
  'eval-report': (cmd_eval_report, configure_eval_report),
})
