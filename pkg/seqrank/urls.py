"""
URL patterns for the seqrank app
"""

from django.urls import path
from . import views

app_name = 'seqrank'

urlpatterns = [
    path('', views.index, name='index'),
    path('plan/', views.plan, name='plan'),
    path('rank/', views.rank, name='rank'),
]
