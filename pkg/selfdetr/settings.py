"""
Django settings for selfdetr project.
"""

from pathlib import Path
import os

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("SELFDETR_SECRET_KEY", "django-insecure-selfdetr-local")

DEBUG = True

ALLOWED_HOSTS = []

# ==============================
# Applications
# ==============================
INSTALLED_APPS = [
    "django.contrib.contenttypes",

    # Project apps
    "core",
    "autodiff",
    "detector",
    "feedback",
    "matching",
    "diversity",
    "videos",
    "evaluation",
    "experiments.apps.ExperimentsConfig",
]

# ==============================
# Database (run ledger only)
# ==============================
DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": BASE_DIR / "db.sqlite3",
    }
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# ==============================
# Internationalization
# ==============================
LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

# ==============================
# Experiments
# ==============================
SELFDETR_OUTPUT_ROOT = Path(os.environ.get("SELFDETR_OUTPUT_ROOT", BASE_DIR / "runs"))
SELFDETR_NUM_THREADS = int(os.environ.get("SELFDETR_NUM_THREADS", "1"))
SELFDETR_PREFETCH = 4
SELFDETR_LOG_LEVEL = os.environ.get("SELFDETR_LOG_LEVEL", "INFO")

# ==============================
# Logging
# ==============================
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        app: {"handlers": ["console"], "level": SELFDETR_LOG_LEVEL, "propagate": False}
        for app in (
            "autodiff",
            "detector",
            "feedback",
            "matching",
            "diversity",
            "videos",
            "evaluation",
            "experiments",
        )
    },
}
