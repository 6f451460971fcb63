"""Interactive diagnosis toolkit: simulated patients, disease ranking, inquiry policy."""

__version__ = "0.1.0"
