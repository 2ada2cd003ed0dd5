"""App configuration for the gaussians app."""
from django.apps import AppConfig


class GaussiansConfig(AppConfig):
    """Configuration for the Gaussians application."""
    name = 'gaussians'
