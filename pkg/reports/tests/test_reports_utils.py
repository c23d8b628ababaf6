import json
import math
import os

import numpy as np
import pytest

from adapters.models import LoraLinear, LoraMlp, init_model
from federation.models import StrategyConfig
from lorafed.exceptions import InputError, LoraFedError, StructuralError
from reports.models import ParamReport, Report, RoundMetrics
from reports.tables import cell_means, histogram_frame, summary_frame
from reports.utils import (
    evaluate_accuracy,
    param_counts,
    read_trace,
    read_weights,
    reference_param_counts,
    rounds_to_fraction,
    summarize,
    write_report,
)


def identity_model(n: int = 2) -> LoraMlp:
    """Logits equal the input: identity base and head, zero adapter product."""
    layer = LoraLinear(np.eye(n), np.zeros(n), np.zeros((1, n)), np.zeros((n, 1)))
    return LoraMlp([layer], np.eye(n), np.zeros(n))


def make_report(strategy: str = "epfl", rounds: int = 3, clients: int = 2) -> Report:
    rng = np.random.default_rng(rounds * 10 + clients)
    trace = [
        RoundMetrics(t + 1, list(rng.uniform(size=clients)), list(rng.uniform(0, 3, size=clients)))
        for t in range(rounds)
    ]
    similarity = None
    if strategy == "epfl":
        similarity = np.full((clients, clients), 0.5 / (clients - 1))
        np.fill_diagonal(similarity, 0.5)
    return Report(
        config={"strategy": {"name": strategy}, "seed": 4},
        trace=trace,
        final_test_accuracy=list(rng.uniform(size=clients)),
        params=ParamReport(10, 4, 2, 16, 20),
        seed=4,
        wall_clock_seconds=1.25,
        final_similarity=similarity,
    )


class TestEvaluateAccuracy:
    def test_perfect_logits(self):
        assert evaluate_accuracy(identity_model(3), np.eye(3), [0, 1, 2]) == 1.0

    def test_ties_go_to_the_first_class(self):
        model = identity_model()
        model.head_weight[...] = 0.0
        assert evaluate_accuracy(model, np.eye(2)[[0, 1, 0, 1]], [0, 1, 0, 1]) == 0.5

    def test_single_wrong_sample(self):
        assert evaluate_accuracy(identity_model(), [0.0, 1.0], 0) == 0.0

    def test_empty_set(self):
        with pytest.raises(InputError):
            evaluate_accuracy(identity_model(), np.zeros((0, 2)), [])


class TestParamCounts:
    def setup_method(self):
        # one layer, d = 16 outputs, k = 8 inputs, rank 2, two classes
        self.model = init_model([8, 16], 2, 0, 2)
        self.head = 2 * 16 + 2

    def test_adapter_versus_full_matrix(self):
        counts = param_counts(self.model, StrategyConfig.build("epfl"))
        assert counts.trainable_per_client - self.head == 48
        assert counts.full_matrix_equivalent == 128

    def test_local_only_communicates_nothing(self):
        counts = param_counts(self.model, StrategyConfig.build("local-only"))
        assert counts.communicated_up == counts.communicated_down == 0
        assert counts.total_per_round == counts.trainable_per_client

    def test_epfl_keeps_b_at_home(self):
        counts = param_counts(self.model, StrategyConfig.build("epfl"))
        assert counts.communicated_up == 48
        assert counts.communicated_down == 2 * 8
        assert counts.communicated_down < counts.communicated_up
        shared = param_counts(self.model, StrategyConfig.build("epfl", share_head=True))
        assert shared.communicated_up == 48 + self.head

    @pytest.mark.parametrize("name", ["fedavg", "fedprox", "scaffold", "apfl", "simple-avg-a"])
    def test_matches_tensor_walk(self, name):
        model = init_model([5, 7, 6], 3, 1, 4)
        sizes = {k: v.size for k, v in model.trainable().items()}
        total = sum(sizes.values())
        a_total = sum(v for k, v in sizes.items() if k.endswith(".A"))
        expected_up = {
            "fedavg": total,
            "fedprox": total,
            "scaffold": 2 * total,
            "apfl": total,
            "simple-avg-a": a_total,
        }[name]
        counts = param_counts(model, StrategyConfig.build(name))
        assert counts.communicated_up == counts.communicated_down == expected_up
        assert counts.trainable_per_client == (2 * total if name == "apfl" else total)
        assert counts.total_per_round == (
            counts.trainable_per_client + counts.communicated_up + counts.communicated_down
        )
        assert counts.full_matrix_equivalent == sum(
            v.size for k, v in model.frozen().items() if k.endswith("W0")
        )

    def test_full_fine_tuning(self):
        full = param_counts(self.model, StrategyConfig.build("fedavg"), full=True)
        expected = sum(v.size for v in self.model.frozen().values()) + self.head
        assert full.trainable_per_client == full.communicated_up == expected

    def test_reference_architecture(self):
        epfl = reference_param_counts(StrategyConfig.build("epfl"))
        full = reference_param_counts(StrategyConfig.build("fedavg"), full=True)
        assert epfl.communicated_up == 4 * 8 * (768 + 768)
        assert epfl.communicated_down == 4 * 8 * 768
        epfl_traffic = epfl.communicated_up + epfl.communicated_down
        full_traffic = full.communicated_up + full.communicated_down
        assert epfl_traffic < full_traffic / 10


class TestWriteReport:
    def test_files(self, tmp_path):
        report = make_report()
        paths = write_report(report, str(tmp_path))
        assert sorted(os.path.basename(p) for p in paths) == [
            "report.json",
            "timing.json",
            "trace.csv",
            "weights_final.csv",
        ]
        lines = (tmp_path / "trace.csv").read_text().split("\n")
        assert lines[0] == "round,client,val_accuracy,train_loss"
        assert len(lines) - 1 == 3 * 2 + 1
        assert b"\r" not in (tmp_path / "trace.csv").read_bytes()

        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["schema_version"] == 1
        assert "wall_clock_seconds" not in doc
        assert json.loads((tmp_path / "timing.json").read_text()) == {"wall_clock_seconds": 1.25}

    def test_idempotent(self, tmp_path):
        report = make_report()
        write_report(report, str(tmp_path))
        first = {name: (tmp_path / name).read_bytes() for name in os.listdir(tmp_path)}
        write_report(report, str(tmp_path))
        assert {name: (tmp_path / name).read_bytes() for name in os.listdir(tmp_path)} == first

    def test_no_weights_for_other_strategies(self, tmp_path):
        write_report(make_report(), str(tmp_path))
        write_report(make_report("fedavg"), str(tmp_path))
        assert not (tmp_path / "weights_final.csv").exists()

    def test_trace_round_trip(self, tmp_path):
        report = make_report(rounds=5, clients=3)
        write_report(report, str(tmp_path))
        assert read_trace(str(tmp_path / "trace.csv")) == report.trace

    def test_weights_round_trip(self, tmp_path):
        report = make_report(clients=4)
        write_report(report, str(tmp_path))
        assert np.array_equal(read_weights(str(tmp_path / "weights_final.csv")), report.final_similarity)

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(LoraFedError, match="file"):
            write_report(make_report(), str(blocker / "out"))


class TestReport:
    def test_means_match_entries(self):
        report = make_report(rounds=4, clients=5)
        assert math.isclose(
            report.mean_final_accuracy, sum(report.final_test_accuracy) / 5, abs_tol=1e-12
        )
        for metrics in report.trace:
            assert math.isclose(metrics.mean_accuracy, np.mean(metrics.val_accuracy), abs_tol=1e-12)

    def test_client_count_must_agree(self):
        with pytest.raises(StructuralError):
            Report({}, [RoundMetrics(1, [0.5], [0.1])], [0.5, 0.5], ParamReport(1, 1, 1, 3, 1), 0)
        with pytest.raises(StructuralError):
            RoundMetrics(1, [0.5, 0.5], [0.1])

    def test_rounds_to_fraction(self):
        trace = [RoundMetrics(t, [acc], [0.0]) for t, acc in enumerate([0.2, 0.5, 0.95, 1.0], 1)]
        assert rounds_to_fraction(trace) == 3
        assert rounds_to_fraction(trace, 0.5) == 2
        assert rounds_to_fraction([]) is None

    def test_summarize(self):
        row = summarize(make_report("fedavg"))
        assert row["strategy"] == "fedavg"
        assert row["communicated_up"] == 4


class TestTables:
    def test_histogram_frame(self):
        frame = histogram_frame(np.array([[3, 1], [0, 4]]), ["a", "b"])
        assert list(frame["total"]) == [4, 4]
        assert frame.loc[1, "entropy"] == 0.0
        assert frame.index.name == "client"

    def test_cell_means(self):
        rows = [
            {"cell": "b", "seed": 1, "mean_final_accuracy": 0.6},
            {"cell": "a", "seed": 0, "mean_final_accuracy": 0.5},
            {"cell": "b", "seed": 0, "mean_final_accuracy": 0.8},
        ]
        summary = summary_frame(rows)
        assert list(summary["cell"]) == ["a", "b", "b"]
        means = cell_means(summary)
        assert means.loc["b", "mean"] == pytest.approx(0.7)
        assert means.loc["b", "std"] == pytest.approx(0.1)
        assert means.loc["a", "seeds"] == 1
