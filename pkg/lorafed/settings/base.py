import os

BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Application definition
INSTALLED_APPS = [
    # First party
    "adapters.apps.AdaptersConfig",
    "clientdata.apps.ClientDataConfig",
    "federation.apps.FederationConfig",
    "reports.apps.ReportsConfig",
]

# Nothing is persisted in a database; every run writes to its own out_dir
DATABASES = {}

# Internationalization
LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

# Logging
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)-7s %(name)s: %(message)s"}
    },
    "handlers": {"console": {"class": "logging.StreamHandler", "formatter": "plain"}},
    "loggers": {
        name: {"handlers": ["console"], "level": "INFO", "propagate": False}
        for name in ("lorafed", "adapters", "clientdata", "federation", "reports")
    },
}

# Experiment defaults: 20 clients, 200 rounds, Dirichlet alpha 0.1, LoRA rank 8,
# every layer in the distance.
LORAFED_DEFAULTS = {
    "dataset": {
        "source": "synthetic",
        "csv_path": None,
        "subsample_fraction": 1.0,
        "synthetic": {
            "clusters": 2,
            "classes": 5,
            "dim": 16,
            "samples_per_class": 200,
            "separation": 3.0,
            "permute_labels": True,
            "groups_per_cluster": 10,
        },
    },
    "partition": {
        "kind": "dirichlet",
        "clients": 20,
        "alpha": 0.1,
        "min_per_client": 5,
        "max_retries": 10,
    },
    "model": {
        "hidden_widths": [32, 32],
        "rank": 8,
        "psi": None,
        "pretrain_epochs": 5,
        "pretrain_learning_rate": 0.05,
        "base_checkpoint": None,
    },
    "training": {
        "rounds": 200,
        "local_epochs": 1,
        "learning_rate": 0.05,
        "batch_size": 16,
        "workers": 1,
    },
    "strategy": {"name": "epfl"},
    "seed": 0,
    "out_dir": "runs/default",
}

# Per-strategy parameter defaults; only the ones relevant to a strategy apply
LORAFED_STRATEGY_DEFAULTS = {
    "lam": 0.5,
    "epsilon": 1e-8,
    "mu": 0.01,
    "apfl_alpha": 0.5,
    "apfl_adaptive": False,
    "share_head": False,
    "weighting": "size",
}

# Hidden widths of the reference architecture used for parameter accounting,
# a stack of transformer-sized square projections
LORAFED_REFERENCE_WIDTHS = [768, 768, 768, 768, 768]
LORAFED_REFERENCE_CLASSES = 11

# Report file schema
LORAFED_SCHEMA_VERSION = 1
