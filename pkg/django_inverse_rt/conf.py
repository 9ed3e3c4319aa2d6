from pathlib import Path

from django.conf import settings

DATA_DIR = Path(__file__).resolve().parent / "data"

DEFAULTS = {
    "INVERSE_RT_VLM_URL": "http://localhost:8080/v1/generate",
    "INVERSE_RT_VLM_TOKEN_ENV": "INVERSE_RT_VLM_TOKEN",
    "INVERSE_RT_VLM_TIMEOUT": 120,
    "INVERSE_RT_MATERIAL_TABLE": str(DATA_DIR / "itu_materials.json"),
    "INVERSE_RT_OUTPUT_DIR": "inverse_rt_runs",
}


def get_setting(name):
    """Return a django_inverse_rt setting, falling back to the package default."""
    if not settings.configured:
        return DEFAULTS[name]
    return getattr(settings, name, DEFAULTS[name])
