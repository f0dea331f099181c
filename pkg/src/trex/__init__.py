"""Next-basket category recommendation: transformer model, frequency baseline, eval suite."""

__version__ = "0.1.0"
