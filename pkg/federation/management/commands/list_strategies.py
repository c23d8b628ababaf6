from federation.models import EXTENSION_POINTS, STRATEGY_PARAMS, StrategyConfig
from federation.strategies import REGISTRY
from reports.utils import reference_param_counts

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = (
        "Lists the registered aggregation strategies, their parameters and the"
        " elements each client sends up/down per round on the reference"
        " architecture at rank 8."
    )

    def handle(self, *args, **options):
        for name, cls in REGISTRY.items():
            if name in EXTENSION_POINTS:
                params, traffic = "not implemented", "-"
            else:
                params = ", ".join(STRATEGY_PARAMS[name]) or "-"
                counts = reference_param_counts(StrategyConfig.build(name))
                traffic = f"{counts.communicated_up}/{counts.communicated_down}"
            self.stdout.write(f"{name:<14} {params:<40} {traffic:>15}  {cls.description}")
