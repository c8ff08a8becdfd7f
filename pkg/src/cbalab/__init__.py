"""Online continual learning with a bi-level trained continual bias adaptor."""

__version__ = "0.1.0"
