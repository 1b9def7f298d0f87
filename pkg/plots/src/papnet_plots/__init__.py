"""Static figure rendering for crossval output directories.

Pure reader: consumes report.json, epochs.csv, confusion_pooled.csv, and
comparison.csv; never writes into the input directory. No dependency on the
engine package.
"""

from .render import plot_comparison, plot_confusion, plot_training_curves

__version__ = "0.1.0"
