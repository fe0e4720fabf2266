"""Hierarchical multi-UAV planner for bird-diverter installation missions."""

__version__ = "0.1.0"
