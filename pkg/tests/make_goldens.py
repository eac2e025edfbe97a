"""Regenerate the frozen fixtures under tests/data/.

Run from the repository root:

    python3 tests/make_goldens.py

Outputs are deterministic; regenerating on the same platform must leave
the files byte-identical unless intended behavior changed (in which case
the diff documents exactly what moved).
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

TESTS = Path(__file__).parent
DATA = TESTS / "data"
sys.path.insert(0, str(TESTS))

from tercon import cli  # noqa: E402
from tercon.eval import write_report_csv  # noqa: E402
from tercon.grid import GridSpec  # noqa: E402
from tercon.hmm import HmmParams  # noqa: E402
from tercon.ingest import write_panel_csv  # noqa: E402
from tercon.sim import SimConfig, simulate  # noqa: E402

from test_eval import golden_fixture_report  # noqa: E402


def make_golden_report() -> None:
    write_report_csv(golden_fixture_report(), DATA / "golden_report.csv")
    print(f"wrote {DATA / 'golden_report.csv'}")


def make_fit_golden() -> None:
    """A frozen small panel plus the params the fit subcommand emits for it."""
    params = HmmParams(
        pi=np.array([0.5, 0.5]),
        trans=np.array([[0.88, 0.12], [0.15, 0.85]]),
        lambda_t=np.array([5.0, 0.4]),
        lambda_c=np.array([0.3, 4.0]),
    )
    cfg = SimConfig(
        grid_spec=GridSpec(0.0, 0.0, 5.0, 4.0, cell_size=1.0),
        years=12,
        params=params,
        seed=11,
    )
    truth = simulate(cfg)
    write_panel_csv(truth.panel, DATA / "fit_panel.csv")
    print(f"wrote {DATA / 'fit_panel.csv'}")

    with tempfile.TemporaryDirectory() as tmp:
        config = Path(tmp) / "fit.json"
        config.write_text(json.dumps({"k": 2, "mode": "independent"}))
        rc = cli.main(
            [
                "fit",
                "--config", str(config),
                "--panel", str(DATA / "fit_panel.csv"),
                "--out", tmp,
                "--seed", "11",
            ]
        )
        if rc != 0:
            raise SystemExit(f"fit subcommand failed with exit code {rc}")
        golden = (Path(tmp) / "params.txt").read_bytes()
    (DATA / "golden_params.txt").write_bytes(golden)
    print(f"wrote {DATA / 'golden_params.txt'}")


if __name__ == "__main__":
    DATA.mkdir(exist_ok=True)
    make_golden_report()
    make_fit_golden()
