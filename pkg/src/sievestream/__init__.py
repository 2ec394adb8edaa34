"""Streaming batch selection with informativeness plus log-det diversity."""
