"""Initfit App.

4D initialization: ingests multi-view correspondence tracks, triangulates them
into per-frame point clouds, estimates per-point velocities by nearest-neighbour
matching between consecutive frames, and seeds the initial primitive set.
"""
