"""Pedestrian localization in omnidirectional images with multi-task deep Q-learning"""

__version__ = "0.3.0"
