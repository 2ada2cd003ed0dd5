"""App configuration for the initfit app."""
from django.apps import AppConfig


class InitfitConfig(AppConfig):
    """Configuration for the Initfit application."""
    name = 'initfit'
