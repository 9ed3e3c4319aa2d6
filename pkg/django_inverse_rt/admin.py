from django.contrib import admin

from .models import EstimationRun


@admin.register(EstimationRun)
class EstimationRunAdmin(admin.ModelAdmin):
    list_display = ("label", "command", "final_mre", "iterations", "stop_reason", "created_at")
    list_filter = ("command", "stop_reason", "created_at")
    search_fields = ("label", "output_dir")
    readonly_fields = ("created_at", "updated_at")
    fields = (
        "command",
        "label",
        "config",
        "final_mre",
        "iterations",
        "stop_reason",
        "total_seconds",
        "output_dir",
        "report",
        "created_at",
        "updated_at",
    )
