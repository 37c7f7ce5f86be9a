"""
URL configuration for seqrank_project.
"""
from django.urls import path, include

urlpatterns = [
    path('api/', include('seqrank.urls')),
]
