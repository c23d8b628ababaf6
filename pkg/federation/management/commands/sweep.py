import copy
import os
from typing import Dict, List

from federation.config import build_config, expand_dotted, load_document, merge_document
from federation.engine import run_experiment
from lorafed.exceptions import ConfigurationError
from reports.tables import cell_means, summary_frame
from reports.utils import atomic_write, summarize, write_report

from ._base import ExperimentCommand

SWEEP_KEYS = ("base", "cells", "seeds")
SUMMARY_FILE = "summary.csv"


def psi_half_cells(n_layers: int) -> List[Dict]:
    """Distance on the first half of the layers, the second half, and all."""
    first = [1 if i < (n_layers + 1) // 2 else 0 for i in range(n_layers)]
    second = [1 if i >= n_layers // 2 else 0 for i in range(n_layers)]
    return [
        {"name": "psi-first-half", "overrides": [{"model.psi": first}]},
        {"name": "psi-second-half", "overrides": [{"model.psi": second}]},
        {"name": "psi-all", "overrides": [{"model.psi": [1] * n_layers}]},
    ]


def strategy_cells(names: List[str]) -> List[Dict]:
    return [{"name": n, "overrides": [{"strategy": {"name": n}}]} for n in names]


def _layers(cell: Dict) -> List[Dict]:
    overrides = cell.get("overrides") or {}
    return list(overrides) if isinstance(overrides, list) else [overrides]


def cross(outer: List[Dict], inner: List[Dict]) -> List[Dict]:
    """Every pairing of two cell lists; an empty list leaves the other as is."""
    if not outer or not inner:
        return outer or inner
    return [
        {"name": f"{a['name']}-{b['name']}", "overrides": _layers(a) + _layers(b)}
        for a in outer
        for b in inner
    ]


class Command(ExperimentCommand):
    help = (
        "Runs a grid of experiments. The sweep file holds a base config, a list of"
        " cells, each {name, overrides}, and a list of seeds. Every (cell, seed)"
        " writes its report to out_dir/<cell>/seed-<seed>/ and summary.csv goes"
        " to out_dir."
    )

    def add_arguments(self, parser):
        parser.add_argument("--sweep", help="JSON sweep file: {base, cells, seeds}")
        self.add_config_arguments(parser)
        parser.add_argument(
            "--psi-halves",
            action="store_true",
            help="One cell each for psi on the first half, second half and all layers",
        )
        parser.add_argument("--strategies", help="Comma-separated strategies, one cell each")
        parser.add_argument("--seeds", help="Comma-separated seeds")

    def read_sweep(self, path: str) -> Dict:
        doc = load_document(path) if path else {}
        for key in doc:
            if key not in SWEEP_KEYS:
                raise ConfigurationError(f"sweep.{key}: unknown key")
        for i, cell in enumerate(doc.get("cells") or []):
            if not isinstance(cell, dict) or not cell.get("name"):
                raise ConfigurationError(f"sweep.cells[{i}]: needs a name")
        return doc

    def seeds(self, options: Dict, sweep: Dict, default: int) -> List[int]:
        if options.get("seeds"):
            try:
                return [int(s) for s in options["seeds"].split(",")]
            except ValueError as e:
                raise ConfigurationError(f"--seeds: {e}") from e
        return list(sweep.get("seeds") or [default])

    def handle(self, *args, **options):
        sweep = self.read_sweep(options.get("sweep"))
        base = self.config_document(options, sweep.get("base"))
        base_config = build_config(copy.deepcopy(base))

        extra = []  # type: List[Dict]
        if options.get("strategies"):
            names = [s.strip() for s in options["strategies"].split(",") if s.strip()]
            extra = strategy_cells(names)
        if options.get("psi_halves"):
            extra = cross(extra, psi_half_cells(base_config.model.n_layers))
        cells = cross(list(sweep.get("cells") or []), extra) or [{"name": "base"}]
        names = [cell["name"] for cell in cells]
        if len(set(names)) != len(names):
            raise ConfigurationError("sweep.cells: names must be unique")

        rows = []
        for cell in cells:
            for seed in self.seeds(options, sweep, base_config.seed):
                doc = copy.deepcopy(base)
                for layer in _layers(cell):
                    merge_document(doc, expand_dotted(copy.deepcopy(layer)))
                out_dir = os.path.join(base_config.out_dir, cell["name"], f"seed-{seed}")
                merge_document(doc, {"seed": seed, "out_dir": out_dir})
                config = build_config(doc)

                report = run_experiment(config)
                write_report(report, out_dir)
                rows.append({"cell": cell["name"], **summarize(report)})
                self.stdout.write(f"{cell['name']} seed {seed}: {report.mean_final_accuracy:.4f}")

        summary = summary_frame(rows)
        path = os.path.join(base_config.out_dir, SUMMARY_FILE)
        atomic_write(path, summary.to_csv(index=False, lineterminator="\n"))
        self.stdout.write(cell_means(summary).to_string())
        self.stdout.write(self.style.SUCCESS(f"Ran {len(rows)} experiments; summary in {path}"))
