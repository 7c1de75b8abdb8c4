"""Converters from upstream dataset distributions to the portable graph
format: the pickled citation datasets and the signed trust-rating CSVs."""

from .bitcoin import convert_bitcoin
from .common import ConversionError, ConversionManifest, validate_portable
from .planetoid import EXPECTED, Expectation, convert_planetoid

__version__ = "0.1.0"
