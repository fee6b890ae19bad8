"""Session-centric data generation, session-clustered columnar storage,
deduplicated jagged tensor encodings, and a desk-scale trainer simulator."""

__version__ = "0.1.0"
