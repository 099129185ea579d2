"""Taint-flow extraction and embedding for UTXO transaction ledgers."""

__version__ = "0.1.0"
