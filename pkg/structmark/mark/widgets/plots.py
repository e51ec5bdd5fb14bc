"""
Report figures rendered off-screen with matplotlib.
"""
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib
matplotlib.use('Agg')

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from structmark.mark.evaluation.evalkit import ReportRow

LOGGER = logging.getLogger(__name__)


class ReportCanvas(FigureCanvasAgg):

  def __init__(self, width: float = 6.0, height: float = 4.0, dpi: int = 100):
    self.setup_mpl(width, height, dpi)
    super().__init__(self.fig)

  def setup_mpl(self, width: float, height: float, dpi: int):
    self.fig = Figure(figsize=(width, height), dpi=dpi)
    self.axes = self.fig.add_axes([0.12, 0.15, 0.83, 0.75])
    self.axes.grid(True, linewidth=0.3)

  def render_attacks(self, rows: Sequence[ReportRow]):
    """
    One bar per attack condition, bit accuracy on the y axis.
    """
    self.axes.clear()
    self.axes.grid(True, linewidth=0.3, axis='y')
    labels = [r.condition for r in rows]
    values = [r.bitacc for r in rows]
    bars = self.axes.bar(range(len(rows)), values, color='steelblue')
    self.axes.set_xticks(range(len(rows)), labels, rotation=20)
    self.axes.set_ylim(0.0, 1.05)
    self.axes.set_ylabel('bit accuracy')
    self.axes.axhline(y=0.5, c='dimgray', linewidth=0.8, linestyle='--', label='chance')
    for bar, value in zip(bars, values):
      self.axes.annotate(f'{value:.3f}', (bar.get_x() + bar.get_width() / 2, value),
                         ha='center', va='bottom', fontsize=8)
    self.axes.set_title('Bit accuracy under attack')

  def render_curves(self, records: Sequence[dict], keys: Iterable[str], title: str = ''):
    """
    Plots per-epoch values of `keys` from a JSON-lines training log.
    """
    self.axes.clear()
    self.axes.grid(True, linewidth=0.3)
    epochs = [r['epoch'] for r in records]
    for key in keys:
      if records and key in records[0]:
        self.axes.plot(epochs, [r[key] for r in records], marker='o', markersize=3, label=key)
    self.axes.set_xlabel('epoch')
    self.axes.legend(fontsize=8)
    if title:
      self.axes.set_title(title)

  def save(self, path: Path):
    self.fig.savefig(path)
    LOGGER.info(f'Wrote figure {path}')


def read_log(path: Path) -> list[dict]:
  with open(path, encoding='utf-8') as f:
    records = [json.loads(line) for line in f if line.strip()]
  # The first line of a log is a header record without an epoch.
  return [r for r in records if 'epoch' in r]


def plot_attack_suite(rows: Sequence[ReportRow], path: Path):
  canvas = ReportCanvas()
  canvas.render_attacks(rows)
  canvas.save(path)


def plot_training_log(log_path: Path, path: Path, keys: Iterable[str]):
  canvas = ReportCanvas()
  canvas.render_curves(read_log(log_path), keys, title=Path(log_path).stem)
  canvas.save(path)
