from django.apps import AppConfig


class DjangoInverseRtConfig(AppConfig):
    name = "django_inverse_rt"
    verbose_name = "Inverse ray tracing"
    default_auto_field = "django.db.models.AutoField"
