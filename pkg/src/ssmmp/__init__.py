"""SSMMP: a sidecar-free service-mesh management protocol and its harness."""

__version__ = "0.1.0"
