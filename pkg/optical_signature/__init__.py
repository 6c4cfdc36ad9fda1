"""Optical signatures for speech video: embed authenticated descriptors as light, verify videos later."""
import logging

__version__ = "1.0.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())
