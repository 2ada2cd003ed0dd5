"""App configuration for the scenes app."""
from django.apps import AppConfig


class ScenesConfig(AppConfig):
    """Configuration for the Scenes application."""
    name = 'scenes'
