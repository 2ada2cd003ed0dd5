"""App configuration for the training app."""
from django.apps import AppConfig


class TrainingConfig(AppConfig):
    """Configuration for the Training application."""
    name = 'training'
