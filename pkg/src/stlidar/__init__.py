"""Space-time neural LiDAR fields: reconstruct a LiDAR sequence with a 4D
hybrid planar/hash-grid field and render novel views (depth, intensity,
ray-drop) at arbitrary poses, times and sensor configurations."""

__version__ = "0.1.0"
