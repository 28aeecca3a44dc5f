"""Learned Mumford-Shah few-shot segmentation at desk scale."""

__version__ = "0.1.0"
