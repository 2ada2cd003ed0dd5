"""Scenes App.

Scene manifests, image and checkpoint IO, the synthetic dynamic-scene
generator, and the ``synth`` / ``render`` commands.
"""
