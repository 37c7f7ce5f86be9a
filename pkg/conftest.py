import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'seqrank_project.settings')
django.setup()
