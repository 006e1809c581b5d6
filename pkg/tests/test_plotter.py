from dataclasses import replace
from pathlib import Path

import pytest
from stzoo.analysis import acc_vs_flops, disentangle, read_results, tp_gain
from stzoo.plotter import ReportPlotter

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def plotter():
    records = read_results(FIXTURES / "results.csv")
    pooled = [r for r in records if r.temporal_pool]
    twins = [replace(r, temporal_pool=False, top1=r.top1 / 2) for r in pooled]
    return ReportPlotter(
        costs=acc_vs_flops(records), gains=tp_gain(pooled + twins).gains, summary=disentangle(records).summary
    )


@pytest.mark.parametrize("figure", ["accuracy_vs_flops", "gains", "contributions"])
def test_save_figures(plotter, tmp_path, figure):
    path = tmp_path / f"{figure}.png"
    getattr(plotter, f"save_{figure}")(path)
    assert path.stat().st_size > 0


def test_empty_gains(tmp_path):
    records = read_results(FIXTURES / "results.csv")
    plotter = ReportPlotter(gains=tp_gain(records).gains)
    plotter.save_gains(tmp_path / "gains.png")
    assert (tmp_path / "gains.png").is_file()
