import math
from dataclasses import replace

import pytest

from trail.models import (
    HEADLINE,
    ModelError,
    Report,
    SizeModelParams,
    archive_size_model,
    block_size_model,
    compact_block_size_model,
    device_memory_model,
    input_size_model,
    proof_entries,
    scenario_report,
    tx_size_model,
)


def test_tx_model_headline_values():
    assert proof_entries(HEADLINE) == 29
    assert input_size_model(HEADLINE) == 1056
    assert input_size_model(HEADLINE, truncated=False) == 8288
    assert tx_size_model(HEADLINE) == 1216
    for i in (1, 2, 5):
        for o in (1, 2, 5):
            assert tx_size_model(replace(HEADLINE, i=i, o=o)) == 32 + 1056 * i + 128 * o


def test_block_models():
    assert block_size_model(255) == 8288
    assert compact_block_size_model(255, 10_000) == 88288


def test_device_and_archive_headline_values():
    assert device_memory_model(HEADLINE) == pytest.approx(1_632_256, abs=1)
    assert archive_size_model(HEADLINE) == pytest.approx(183_046_999, abs=1)


def test_device_model_zero_unused():
    assert device_memory_model(replace(HEADLINE, u=0)) == 0


def test_archive_model_at_h_delete_equal_b():
    p = replace(HEADLINE, u=1, f=1, h_delete=HEADLINE.b)
    L = math.log2(p.b * p.n)
    assert archive_size_model(p) == pytest.approx(32 * (p.u * p.b * L + (p.H - L)) + 128)


@pytest.mark.parametrize("field,values", [("u", [1, 2, 5]), ("f", [1, 2, 3]), ("h_archive", [10, 100, 1000])])
def test_device_model_monotone(field, values):
    out = [device_memory_model(replace(HEADLINE, **{field: v})) for v in values]
    assert out == sorted(out)


def test_device_model_flat_past_b():
    small_b = replace(HEADLINE, b=50)
    assert device_memory_model(replace(small_b, h_archive=60)) == device_memory_model(replace(small_b, h_archive=99))


def test_archive_model_monotone_in_h_delete():
    out = [archive_size_model(replace(HEADLINE, h_delete=h)) for h in (40320, 10**5, 10**6)]
    assert out == sorted(out)


def test_log_term_clamped_to_tree_height():
    p = replace(HEADLINE, H=16, b=1000, n=1000)
    assert device_memory_model(p) == 100 * 32 * 2 * 16 + 128 * 2


def test_parameter_validation():
    with pytest.raises(ModelError):
        SizeModelParams(h_archive=10, h_delete=10)
    with pytest.raises(ModelError):
        SizeModelParams(n=0)
    with pytest.raises(ModelError):
        archive_size_model(replace(HEADLINE, h_delete=1000))
    with pytest.raises(ModelError):
        proof_entries(replace(HEADLINE, t=1, n=1, interval=15))


def test_report_formats():
    rep = Report("demo")
    rep.add("a", 100, 50, "half")
    rep.add("b", None, 3)
    assert rep.get("a").ratio == 0.5 and rep.get("b").ratio is None
    table = rep.to_table().splitlines()
    assert table[0].split("\t") == ["metric", "model", "measured", "ratio", "note"]
    assert table[1].split("\t") == ["a", "100", "50", "0.500000", "half"]
    text = rep.to_text()
    assert text.startswith("demo\n") and "0.5000" in text
    assert rep.to_dict()["rows"][0]["ratio"] == 0.5
    with pytest.raises(KeyError):
        rep.get("c")


def test_scenario_report_rows():
    scenario = {"seed": 1, "tree_height": 16, "blocks": 5,
                "archive": {"h_archive": 3, "h_delete": 20, "b": 10, "n": 4}}
    summary = {"block_sizes": [640], "compact_mismatch": 0, "tx_size_mismatch": 0, "node_state_max": 640,
               "full_node_bytes": 1, "device_max": [10, 20], "archive_max": [0, 5], "u_max": [1, 2],
               "f_max": [1, 1], "outputs_max": 4, "violations": 0, "fixtures": 0, "fixtures_ok": 0}
    rep = scenario_report(scenario, summary)
    assert rep.get("block bytes").model == rep.get("block bytes").measured == 640
    worst = rep.get("device bytes (worst client)")
    assert worst.measured == 20
    assert worst.model == device_memory_model(SizeModelParams(u=2, f=1, b=10, n=4, h_archive=3, h_delete=20, H=16))
