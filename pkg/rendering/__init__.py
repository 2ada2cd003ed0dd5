"""Rendering App.

Pinhole cameras, EWA projection of 3D Gaussians to screen space, and the
tile-based differentiable rasterizer (forward compositing and analytic
backward pass).
"""
