import os

import pandas as pd
from stzoo import ArchSpec, assemble, audit
from stzoo.archspec import Backbone, Family, Placement
from stzoo.profiler import count_flops, count_params

backbone = Backbone.RESNET50
frames = 8
input_size = 224

aggregations = [Family.TSN, Family.CONV1D, Family.TAM, Family.TSM, Family.TSN_NLN]
placements = [Placement.BOTTOM_HALF, Placement.TOP_HALF, Placement.UNIFORM_HALF, Placement.ALL]
placement_families = [Family.TAM, Family.TSM]


def cost_row(spec):
    model = assemble(spec)
    report = audit(model)
    return {
        "name": spec.name,
        "placement": spec.placement.value,
        "temporal_modules": report.total_temporal_modules,
        "params": count_params(model),
        "flops": count_flops(model, input_size),
    }


if __name__ == "__main__":
    dirpath = "studies/aggregation"
    if not os.path.exists(dirpath):
        os.makedirs(dirpath)

    print(f"Temporal aggregations on {backbone.value}, {frames} frames at {input_size}px...")
    rows = [cost_row(ArchSpec(family, backbone, frames=frames)) for family in aggregations]
    table = pd.DataFrame(rows)
    reference = table.iloc[0]
    table["extra_params"] = table["params"] - reference["params"]
    table["extra_flops"] = table["flops"] - reference["flops"]
    table.to_csv(f"{dirpath}/aggregations.csv", index=False, lineterminator="\n")
    print(table.to_string(index=False))

    print("Module placements...")
    rows = [
        cost_row(ArchSpec(family, backbone, frames=frames, placement=placement))
        for family in placement_families
        for placement in placements
    ]
    table = pd.DataFrame(rows)
    table.to_csv(f"{dirpath}/placements.csv", index=False, lineterminator="\n")
    print(table.to_string(index=False))
