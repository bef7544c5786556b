"""Utility helpers: RNG streams, artifact writers, instrumentation."""
