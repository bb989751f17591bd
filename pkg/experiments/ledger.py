import logging

from django.db import DatabaseError

from core.utils import table_exists
from experiments.models import ExperimentRun

logger = logging.getLogger(__name__)

TABLE = 'experiments_experimentrun'


def start_run(command, config_hash='', seed=0, output_dir='', config=None):
    """Open a ledger row; returns None when the ledger table has not been migrated."""
    if not table_exists(TABLE):
        return None
    try:
        return ExperimentRun.objects.create(
            command=command, config_hash=config_hash, seed=seed,
            output_dir=str(output_dir), config=config or {},
        )
    except DatabaseError as exc:
        logger.warning("run ledger unavailable: %s", exc)
        return None


def finish_run(run, status, metrics=None):
    if run is None:
        return None
    run.status = status
    if metrics is not None:
        run.metrics = metrics
    try:
        run.save(update_fields=['status', 'metrics', 'updated_at'])
    except DatabaseError as exc:
        logger.warning("run ledger update failed: %s", exc)
    return run
