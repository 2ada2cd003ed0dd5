"""Gaussians App.

This app owns the space-time Gaussian primitive: its structure-of-arrays
storage, the activation conventions, the motion and temporal-opacity
functions, the covariance, and the spherical-harmonics appearance model.
"""
