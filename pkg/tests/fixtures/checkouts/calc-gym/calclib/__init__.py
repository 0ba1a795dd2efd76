"""calclib: minimal arithmetic helpers."""
