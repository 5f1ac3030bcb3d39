"""Output helpers: training curve images and prediction overlays."""
