import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'splatsystem.settings')
django.setup()
