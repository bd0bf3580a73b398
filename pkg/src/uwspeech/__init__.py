"""Speech-to-speech translation for unwritten target languages via IPA-anchored discrete tokens."""

__version__ = "0.1.0"
