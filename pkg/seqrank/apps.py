from django.apps import AppConfig


class SeqrankConfig(AppConfig):
    name = 'seqrank'
    verbose_name = 'Sequential user representation and ranking'
