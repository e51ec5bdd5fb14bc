"""
structmark

Watermarking for protein backbone generators: a Stage-1 structure
encoder/decoder, a toy diffusion generator, watermark-conditioned low-rank
adapters, and the attack and identification harness around them.
"""

import logging
import sys
from typing import Optional, Sequence

import matplotlib

from structmark.mark import StructMarkApp, build_parser
from structmark.mark.errors import StructMarkError

LOGGER = logging.getLogger(__name__)


def invoke_structmark(argv: Optional[Sequence[str]] = None) -> int:
  args = build_parser().parse_args(argv)
  level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
  logging.basicConfig(encoding='utf-8', level=level,
                      format="[{pathname:>20s}:{lineno:<4}]  {levelname:<7s}   {message}", style='{')

  matplotlib.use('Agg')
  try:
    app = StructMarkApp(args)
  except StructMarkError as err:
    LOGGER.error(f'{type(err).__name__}: {err}')
    return err.exit_code
  return app.exec()


def main():
  sys.exit(invoke_structmark(sys.argv[1:]))


if __name__ == '__main__':
  main()
