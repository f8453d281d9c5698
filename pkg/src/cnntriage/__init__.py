"""Critical-index triage with an ensemble of class-weight-biased CNNs."""

__version__ = "0.1.0"
