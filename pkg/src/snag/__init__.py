"""Multi-modal knowledge-graph representation: noise masking, modality fusion, completion and alignment."""

__version__ = "0.1.0"
