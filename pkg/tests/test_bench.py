from deskdp.bench import bench_memory, chain_activation_ratio, fmt_table, measured_scaling, model_scaling, to_csv
from deskdp.config import parse_config

CFG = parse_config("model: {}\ntrain: {steps: 3}\n")


def test_memory_modes_are_ordered_and_fp16_halves_activations():
    rows = {r.mode: r for r in bench_memory(CFG)}
    assert rows["+FP16"].activation_peak * 2 == rows["fp32"].activation_peak
    peaks = [rows[m].total_peak for m in ("fp32", "+FP16", "+FP16+Chpt", "+FP16+Chpt+IABN")]
    assert peaks == sorted(peaks, reverse=True) and len(set(peaks)) == 4
    assert rows["chain64+Chpt"].activation_ratio <= 0.25


def test_chain_ratio_grows_sublinearly():
    small = chain_activation_ratio(CFG, 16)
    big = chain_activation_ratio(CFG, 64)
    assert big[1] / big[0] < small[1] / small[0]


def test_model_scaling_rows():
    rows = model_scaling(CFG, ks=(1, 4))
    assert len(rows) == 8
    ring = {(r.precision, r.K): r.efficiency for r in rows if r.algorithm == "ring"}
    assert abs(ring["fp32", 4] - 0.912409) < 1e-6 and abs(ring["fp16", 4] - 0.954198) < 1e-6
    assert all(r.efficiency == 1.0 for r in rows if r.K == 1)


def test_measured_scaling_runs():
    rows = measured_scaling(CFG, ks=(1, 2), steps=1)
    assert [r.K for r in rows] == [1, 2] and rows[0].efficiency == 1.0
    assert all(r.step_time > 0 and r.source == "measured" for r in rows)


def test_table_formats():
    rows = model_scaling(CFG, ks=(1,))
    assert to_csv(rows).splitlines()[0].split(",")[0] == "K"
    assert fmt_table(rows).splitlines()[0].split()[:2] == ["K", "algorithm"]
    assert to_csv([]) == "" and fmt_table([]) == ""
