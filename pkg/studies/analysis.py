import os
import sys

from stzoo import ReportPlotter
from stzoo.analysis import acc_vs_flops, disentangle, read_results, tp_gain, write_report

results = sys.argv[1] if len(sys.argv) > 1 else "runs/results.csv"
allow_partial = True


if __name__ == "__main__":
    dirpath = "studies/analysis"
    if not os.path.exists(dirpath):
        os.makedirs(dirpath)

    records = read_results(results)
    print(f"Analyzing {len(records)} results from {results}...")

    ######################### Disentanglement #########################
    report = disentangle(records, allow_partial=allow_partial)
    write_report(report.rows, f"{dirpath}/disentangle.csv")
    write_report(report.summary, f"{dirpath}/disentangle-summary.csv")
    for group, (backbones, frames) in report.grids.items():
        print(f"{group}: backbones {', '.join(backbones)}; frames {', '.join(map(str, frames))}")
    print(report.summary.to_string(index=False))

    ######################## Temporal pooling ########################
    gains = tp_gain(records)
    write_report(gains.gains, f"{dirpath}/tp-gain.csv")
    if len(gains.missing):
        print(f"{len(gains.missing)} results have no temporal pooling partner")

    ########################## Cost ##########################
    costs = acc_vs_flops(records)
    write_report(costs, f"{dirpath}/acc-vs-flops.csv")

    plotter = ReportPlotter(costs=costs, gains=gains.gains, summary=report.summary)
    plotter.save_contributions(f"{dirpath}/contributions.pdf")
    plotter.save_gains(f"{dirpath}/tp-gain.pdf")
    plotter.save_accuracy_vs_flops(f"{dirpath}/acc-vs-flops.pdf")
