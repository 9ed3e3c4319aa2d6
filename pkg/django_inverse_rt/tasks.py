import logging

from celery import shared_task

from .harness import ExperimentConfig, run_cell, sweep_row

logger = logging.getLogger(__name__)


@shared_task
def run_sweep_cell(config_data, axis, value):
    """
    Run one sweep cell in a worker and return its CSV row.

    Failures come back as an error row so the sweep keeps going.
    """
    try:
        config = ExperimentConfig.from_dict(config_data)
    except Exception as e:
        logger.error(f"Sweep cell {axis}={value} got a bad config", exc_info=True)
        return sweep_row(axis, value, None, error=f"{type(e).__name__}: {e!s}")
    return run_cell(config, axis, value)
