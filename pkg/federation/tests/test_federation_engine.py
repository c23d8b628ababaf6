import json
import os

import numpy as np
import pytest

from adapters.checkpoints import load_checkpoint
from federation.engine import evaluate_clients, run_experiment, run_round
from federation.models import StrategyConfig
from federation.strategies import Epfl, TrainingParams
from federation.tests.utils import (
    CLUSTERED,
    same_tensors,
    small_config,
    small_server,
    snapshot,
)
from federation.utils import HEAD_NAMES, adapter_names
from lorafed.exceptions import ConfigurationError, InputError
from reports.utils import rounds_to_fraction

PARAMS = TrainingParams(rounds=3, local_epochs=1, learning_rate=0.05, batch_size=16)


def models_of(server):
    return [c.model for c in server.clients]


class PersonalPartsCheck(Epfl):
    """Epfl that asserts B's and heads survive every aggregation bit for bit."""

    checked = 0

    def aggregate(self, server):
        names = adapter_names(server.clients[0].model, "B") + HEAD_NAMES
        before = snapshot(models_of(server), names)
        super().aggregate(server)
        assert same_tensors(snapshot(models_of(server), names), before)
        self.checked += 1


class TestRunRound:
    def test_one_round(self):
        server = small_server(small_config())
        server, metrics = run_round(server, StrategyConfig.build("epfl"), PARAMS)
        assert server.round == metrics.round == 1
        assert metrics.n_clients == len(metrics.train_loss) == server.n_clients
        assert server.similarity.n_clients == server.n_clients
        assert metrics.mean_accuracy == pytest.approx(np.mean(metrics.val_accuracy), abs=1e-12)

    def test_no_round_past_the_last(self):
        server = small_server(small_config(training__rounds=1))
        run_round(server, StrategyConfig.build("local-only"), PARAMS)
        with pytest.raises(ConfigurationError):
            run_round(server, StrategyConfig.build("local-only"), PARAMS)

    def test_deterministic(self):
        first, second = small_server(small_config()), small_server(small_config())
        for __ in range(2):
            run_round(first, StrategyConfig.build("epfl"), PARAMS)
            run_round(second, StrategyConfig.build("epfl"), PARAMS)
        assert same_tensors(snapshot(models_of(first)), snapshot(models_of(second)))
        assert np.array_equal(first.similarity.s, second.similarity.s)

    @pytest.mark.parametrize("name", ["epfl", "fedavg", "scaffold", "apfl"])
    def test_parallel_training_matches_sequential(self, name):
        sequential, parallel = small_server(small_config()), small_server(small_config())
        threaded = TrainingParams(3, 1, 0.05, 16, workers=3)
        for __ in range(2):
            __, seq_metrics = run_round(sequential, StrategyConfig.build(name), PARAMS)
            __, par_metrics = run_round(parallel, StrategyConfig.build(name), threaded)
        assert same_tensors(snapshot(models_of(sequential)), snapshot(models_of(parallel)))
        assert seq_metrics == par_metrics

    def test_lambda_one_is_local_only(self):
        epfl, local = small_server(small_config()), small_server(small_config())
        for __ in range(3):
            run_round(epfl, StrategyConfig.build("epfl", lam=1.0), PARAMS)
            run_round(local, StrategyConfig.build("local-only"), PARAMS)
        assert same_tensors(snapshot(models_of(epfl)), snapshot(models_of(local)))

    def test_b_and_heads_stay_personal(self):
        config = small_config(
            training__rounds=50,
            partition__clients=10,
            dataset__synthetic__samples_per_class=100,
        )
        server = small_server(config)
        strategy = PersonalPartsCheck(config.strategy)
        for __ in range(50):
            run_round(server, strategy, PARAMS)
        assert strategy.checked == 50
        assert server.round == server.total_rounds

    def test_shared_head(self):
        server = small_server(small_config())
        run_round(server, StrategyConfig.build("epfl", share_head=True), PARAMS)
        heads = snapshot(models_of(server), HEAD_NAMES)
        assert all(same_tensors([h], [heads[0]]) for h in heads)

    def test_simple_average_of_a(self):
        server = small_server(small_config())
        run_round(server, StrategyConfig.build("simple-avg-a"), PARAMS)
        a_names = adapter_names(server.clients[0].model, "A")
        a = snapshot(models_of(server), a_names)
        assert all(same_tensors([x], [a[0]]) for x in a)
        b = snapshot(models_of(server), adapter_names(server.clients[0].model, "B"))
        assert not same_tensors([b[0]], [b[1]])


class TestRunExperiment:
    def test_zero_rounds(self):
        config = small_config(training__rounds=0)
        report = run_experiment(config)
        assert report.trace == []
        assert report.final_test_accuracy == evaluate_clients(small_server(config), "test")

    def test_local_only_equals_lambda_one(self):
        local = run_experiment(small_config(strategy={"name": "local-only"}))
        epfl = run_experiment(small_config(strategy={"name": "epfl", "lam": 1.0}))
        assert local.final_test_accuracy == epfl.final_test_accuracy

    def test_report_is_deterministic(self):
        first = run_experiment(small_config())
        second = run_experiment(small_config())
        assert json.dumps(first.to_dict(), sort_keys=True) == json.dumps(
            second.to_dict(), sort_keys=True
        )

    def test_report_contents(self):
        report = run_experiment(small_config())
        assert len(report.trace) == 3
        assert report.n_clients == 4
        assert report.final_similarity.shape == (4, 4)
        assert report.params.communicated_down < report.params.communicated_up
        assert report.full_model_params.communicated_up > report.params.communicated_up
        assert set(report.affinity) == {"within", "cross"}

    def test_checkpoints(self, tmp_path):
        run_experiment(small_config(), checkpoint_dir=str(tmp_path))
        files = sorted(os.listdir(tmp_path))
        assert files == [f"client-{i:03d}.json" for i in range(4)]
        assert load_checkpoint(str(tmp_path / files[0])).layers[0].rank == 2

    def test_errors_name_the_config_section(self, tmp_path):
        config = small_config(
            dataset__source="csv", dataset__csv_path=str(tmp_path / "missing.csv")
        )
        with pytest.raises(InputError, match="^dataset: "):
            run_experiment(config)


class TestClusteredTask:
    """Two clusters with conflicting labels: personalization has to pay off."""

    SEEDS = (0, 1, 2)
    ROUNDS = 100

    @pytest.fixture(scope="class")
    def reports(self):
        runs = {}
        for seed in self.SEEDS:
            for name in ("epfl", "fedavg", "simple-avg-a"):
                config = small_config(
                    CLUSTERED, seed=seed, training__rounds=self.ROUNDS, strategy={"name": name}
                )
                runs[name, seed] = run_experiment(config)
        return runs

    def mean_gap(self, reports, other):
        return np.mean(
            [
                reports["epfl", s].mean_final_accuracy - reports[other, s].mean_final_accuracy
                for s in self.SEEDS
            ]
        )

    def test_epfl_beats_fedavg(self, reports):
        assert self.mean_gap(reports, "fedavg") >= 0.05

    def test_epfl_beats_uniform_a_average(self, reports):
        assert self.mean_gap(reports, "simple-avg-a") >= 0.02

    def test_similarity_follows_clusters(self, reports):
        for seed in self.SEEDS:
            affinity = reports["epfl", seed].affinity
            assert affinity["within"] > affinity["cross"]

    def test_epfl_converges_in_fewer_rounds(self, reports):
        faster = [
            rounds_to_fraction(reports["epfl", s].trace)
            < rounds_to_fraction(reports["fedavg", s].trace)
            for s in self.SEEDS
        ]
        assert sum(faster) >= 2
