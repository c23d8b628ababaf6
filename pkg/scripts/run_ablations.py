"""Runs the strategy and psi-subset ablations into runs/ablations/<stamp>."""

import datetime
import os
import subprocess  # nosec
import sys

STRATEGIES = "epfl,simple-avg-a,fedavg,fedprox,scaffold,apfl,local-only"
SEEDS = "0,1,2"

if __name__ == "__main__":
    # Define paths
    repo_dir = os.path.join(os.path.dirname(__file__), os.pardir)
    manage_path = os.path.join(repo_dir, "manage.py")
    datestr = datetime.datetime.now().strftime("%y%m%d_%H%M%S")
    out_dir = os.path.join(repo_dir, "runs", "ablations", datestr)
    extra = sys.argv[1:]

    # Every strategy on the same federation
    code = subprocess.call(  # nosec
        [
            sys.executable,
            manage_path,
            "sweep",
            f"--strategies={STRATEGIES}",
            f"--seeds={SEEDS}",
            f"--out-dir={os.path.join(out_dir, 'strategies')}",
            *extra,
        ]
    )
    if code:
        sys.exit(code)

    # Distance over the first half, second half and all layers
    sys.exit(
        subprocess.call(  # nosec
            [
                sys.executable,
                manage_path,
                "sweep",
                "--psi-halves",
                f"--seeds={SEEDS}",
                f"--out-dir={os.path.join(out_dir, 'psi')}",
                *extra,
            ]
        )
    )
