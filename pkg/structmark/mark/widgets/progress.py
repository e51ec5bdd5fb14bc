"""
Progress bar -> Logging interface
"""
import logging
from typing import Iterable, Optional

from tqdm import tqdm

LOGGER = logging.getLogger(__name__)


class StatusLogger:
  """
  Mirrors status messages into the log while driving a tqdm bar on stderr.
  The bar is disabled when the log level hides INFO records.
  """

  def __init__(self, description: str, total: Optional[int] = None, logger: logging.Logger = LOGGER):
    self.logger = logger
    self.description = description
    self.bar = tqdm(total=total, desc=description, leave=False, dynamic_ncols=True,
                    disable=not logger.isEnabledFor(logging.INFO))

  def __enter__(self) -> 'StatusLogger':
    return self

  def __exit__(self, *exc):
    self.close()
    return False

  def iterate(self, items: Iterable) -> Iterable:
    for item in items:
      yield item
      self.bar.update(1)

  def update(self, count: int = 1, **metrics):
    self.bar.update(count)
    if metrics:
      self.bar.set_postfix({k: f'{v:.4g}' for k, v in metrics.items()}, refresh=False)

  def showMessage(self, msg: str):
    self.logger.info(msg)
    self.bar.set_description_str(f'{self.description}: {msg}', refresh=False)

  def close(self):
    self.bar.close()
