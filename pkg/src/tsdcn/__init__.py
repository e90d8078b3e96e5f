"""Time-series discriminant component network."""
