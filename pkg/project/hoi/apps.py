from django.apps import AppConfig


class HoiConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'hoi'
    verbose_name = 'HOI motion-language toolkit'
