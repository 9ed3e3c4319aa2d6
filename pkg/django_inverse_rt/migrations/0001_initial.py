# Generated by Django 5.2.6 on 2026-10-18 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='EstimationRun',
            fields=[
                ('id', models.AutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(help_text='Management command verb, e.g. run or sweep', max_length=32)),
                ('label', models.CharField(help_text='Experiment label', max_length=255)),
                ('config', models.JSONField(help_text='Resolved experiment configuration')),
                ('final_mre', models.FloatField(blank=True, null=True)),
                ('iterations', models.PositiveIntegerField(blank=True, null=True)),
                ('stop_reason', models.CharField(blank=True, max_length=32)),
                ('total_seconds', models.FloatField(blank=True, null=True)),
                ('output_dir', models.CharField(blank=True, max_length=1024)),
                ('report', models.JSONField(blank=True, help_text='Report or summary emitted by the run', null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'verbose_name': 'Estimation run',
                'verbose_name_plural': 'Estimation runs',
                'ordering': ('-created_at',),
            },
        ),
    ]
