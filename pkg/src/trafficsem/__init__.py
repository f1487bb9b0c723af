"""trafficsem: align packet payloads with text, reason over mission graphs."""

__version__ = "0.1.0"
