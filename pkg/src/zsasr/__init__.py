"""Desk-scale multilingual speech-text training pipeline.

Trains a joint speech/text model on a synthetic multilingual corpus so that
languages with no transcribed speech at all (Group B) can still be recognized,
using only their unpaired text and untranscribed audio.
"""

__version__ = "0.1.0"
