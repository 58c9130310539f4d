"""Wrist-sensor intoxication detection toolkit.

Ingests raw accelerometer/gyroscope/heart-rate streams with transdermal
alcohol readings, preprocesses them into labeled windows, and classifies
windows with a hyperdimensional-computing model or small neural baselines,
evaluated under a leakage-free grouped protocol.
"""

__version__ = "0.1.0"

from . import cli, dsp, evaluation, hdc, ingest, nn, synth

__all__ = ["cli", "dsp", "evaluation", "hdc", "ingest", "nn", "synth", "__version__"]
