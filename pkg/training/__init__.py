"""Training App.

Rendering loss and 4D opacity regularization, image-quality metrics, the Adam
optimizer with the velocity annealing schedule, periodic relocation of dead
primitives, and the ``train`` / ``eval`` commands that drive them.
"""
