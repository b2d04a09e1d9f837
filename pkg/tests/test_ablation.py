import math

import pytest

from selfdenoise.ablation import (DROP_PROBS, PLACEMENTS, PRESETS, SIGMAS, AblationRow, aggregate, means,
                                  preset_cells, to_csv)
from selfdenoise.config import make_config, merge


@pytest.mark.parametrize("name,count", [("aux_noise", 5), ("spatial", 7), ("sigma", len(SIGMAS)),
                                        ("pdrop", len(DROP_PROBS)), ("placement", len(PLACEMENTS))])
def test_preset_sizes(name, count):
    cells = preset_cells(name)
    assert len(cells) == count
    assert len({label for label, _ in cells}) == count
    for _, override in cells:
        make_config(merge(make_config(), override))


def test_all_presets_listed():
    assert set(PRESETS) == {"aux_noise", "spatial", "sigma", "pdrop", "placement"}


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset_cells("nope")


def test_aux_noise_cells():
    cells = dict(preset_cells("aux_noise"))
    assert cells["aux=no noise=none"]["model"]["aux"] is False
    assert cells["aux=yes noise=gaussian"]["noise"]["kind"] == "gaussian"
    assert cells["aux=yes noise=gaussian"]["noise"]["spatial"] is False


def test_placement_flags():
    cells = dict(preset_cells("placement"))
    assert cells["G13"]["noise"]["per_block"] == [True, False, True]
    assert cells["none"]["noise"]["kind"] == "none"


def test_spatial_pooling_variants():
    cells = dict(preset_cells("spatial"))
    assert cells["gaussian(avg) spatial"]["model"]["pool_mode"] == "avg"
    assert cells["gaussian spatial"]["noise"]["spatial"] is True


def test_aggregate():
    rows = [AblationRow("x", str(s), a, 0.0, math.nan, math.nan) for s, a in enumerate([0.5, 0.6, 0.7])]
    agg = aggregate(rows, "x")
    assert agg.seed == "mean"
    assert agg.shot1_mean == pytest.approx(0.6)
    assert agg.shot1_ci95 == pytest.approx(1.96 * 0.1 / math.sqrt(3))
    assert math.isnan(agg.shot5_mean)
    assert means(rows + [agg]) == {"x": pytest.approx(0.6)}


def test_csv_header():
    text = to_csv([AblationRow("x", "0", 0.5, 0.01, 0.7, 0.02)])
    assert text.splitlines()[0] == "config,seed,shot1_mean,shot1_ci95,shot5_mean,shot5_ci95"
