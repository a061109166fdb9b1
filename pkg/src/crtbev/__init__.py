"""Radar-camera-temporal BEV fusion kernels, a synthetic scene generator and an evaluator."""

__version__ = "0.1.0"
