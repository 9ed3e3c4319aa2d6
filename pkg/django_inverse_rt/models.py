from django.db import models


class EstimationRun(models.Model):
    """One experiment executed from the command line."""

    command = models.CharField(max_length=32, help_text="Management command verb, e.g. run or sweep")
    label = models.CharField(max_length=255, help_text="Experiment label")
    config = models.JSONField(help_text="Resolved experiment configuration")
    final_mre = models.FloatField(null=True, blank=True)
    iterations = models.PositiveIntegerField(null=True, blank=True)
    stop_reason = models.CharField(max_length=32, blank=True)
    total_seconds = models.FloatField(null=True, blank=True)
    output_dir = models.CharField(max_length=1024, blank=True)
    report = models.JSONField(null=True, blank=True, help_text="Report or summary emitted by the run")
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        verbose_name = "Estimation run"
        verbose_name_plural = "Estimation runs"
        ordering = ("-created_at",)

    def __str__(self):
        return f"{self.command} {self.label}"

    @property
    def final_mre_percent(self):
        return None if self.final_mre is None else 100.0 * self.final_mre

    @classmethod
    def record(cls, command, config, report=None, summary=None, output_dir=""):
        """Store a finished run; ``report`` is a harness RunReport when there is one."""
        if report is not None:
            return cls.objects.create(
                command=command,
                label=config.label,
                config=config.to_dict(),
                final_mre=report.final_mre,
                iterations=report.iterations,
                stop_reason=report.stop_reason or "",
                total_seconds=report.total_seconds,
                output_dir=report.out_dir or str(output_dir),
                report=report.to_dict(),
            )
        return cls.objects.create(
            command=command,
            label=config.label,
            config=config.to_dict(),
            output_dir=str(output_dir),
            report=summary,
        )
