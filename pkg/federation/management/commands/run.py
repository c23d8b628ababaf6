import os

from federation.engine import run_experiment
from reports.utils import write_report

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Runs one federated experiment and writes its report into out_dir."

    def add_arguments(self, parser):
        self.add_config_arguments(parser)
        parser.add_argument(
            "--checkpoints",
            action="store_true",
            help="Also save every client's final model under out_dir/checkpoints",
        )

    def handle(self, *args, **options):
        config = self.load_config(options)
        checkpoint_dir = None
        if options["checkpoints"]:
            checkpoint_dir = os.path.join(config.out_dir, "checkpoints")
        report = run_experiment(config, checkpoint_dir=checkpoint_dir)
        paths = write_report(report, config.out_dir)

        self.stdout.write(
            f"{config.strategy.name}: mean final test accuracy {report.mean_final_accuracy:.4f}"
            f" over {report.n_clients} clients"
        )
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(paths)} files to {config.out_dir}"))
