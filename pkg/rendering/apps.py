"""App configuration for the rendering app."""
from django.apps import AppConfig


class RenderingConfig(AppConfig):
    """Configuration for the Rendering application."""
    name = 'rendering'
