"""Pipeline-parallel SGD with delta-compressed activations, baselines, audits and a throughput model."""

__version__ = "0.1.0"
