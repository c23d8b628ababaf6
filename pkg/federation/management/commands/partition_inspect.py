import json
import os

from clientdata.utils import class_histograms, label_entropy, mean_client_entropy
from federation.engine import config_context, load_dataset, make_partition
from reports.tables import histogram_frame
from reports.utils import atomic_write

from ._base import ExperimentCommand

PARTITION_FILE = "partition.json"


class Command(ExperimentCommand):
    help = (
        "Builds the configured client partition without training and writes it,"
        " with per-client class histograms, to out_dir/partition.json."
    )

    def add_arguments(self, parser):
        self.add_config_arguments(parser)

    def handle(self, *args, **options):
        config = self.load_config(options)
        with config_context("dataset"):
            dataset = load_dataset(config)
        with config_context("partition"):
            spec = make_partition(config, dataset)
        hist = class_histograms(dataset.labels, spec, dataset.n_classes)

        doc = spec.to_dict()
        doc.update(
            {
                "n_samples": len(dataset),
                "n_classes": dataset.n_classes,
                "class_names": dataset.class_names,
                "histograms": hist.tolist(),
                "entropy": [label_entropy(row) for row in hist],
                "seed": config.seed,
            }
        )
        os.makedirs(config.out_dir, exist_ok=True)
        path = os.path.join(config.out_dir, PARTITION_FILE)
        atomic_write(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")

        self.stdout.write(histogram_frame(hist, dataset.class_names).to_string())
        mean = mean_client_entropy(dataset.labels, spec, dataset.n_classes)
        self.stdout.write(f"Mean client label entropy {mean:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {path}"))
