"""Joint pedestrian detection and trajectory forecasting from lidar sequences."""
__version__ = "0.1.0"
