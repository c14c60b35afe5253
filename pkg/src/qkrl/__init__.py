"""Quantum kernel policies and quantum policy-gradient estimators on tabular MDPs."""
__version__ = "0.1.0"
