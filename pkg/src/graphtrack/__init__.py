"""Dynamic spatio-temporal graph multi-object tracking."""
