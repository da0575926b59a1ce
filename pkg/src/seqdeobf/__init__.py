"""Layer-sequence obfuscation, side-channel extraction and de-obfuscation at desk scale."""

__version__ = "0.1.0"
