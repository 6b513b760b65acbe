import csv
import math

import numpy as np
import pytest

from ssmrec.bench import (
    BenchRow,
    BenchSpec,
    affine_residual,
    bench_step,
    quadratic_improvement,
    run_suite,
    write_gnuplot,
)
from ssmrec.errors import ConfigError
from ssmrec.model import ENCODERS

SMALL = dict(warmup=0, steps=3, d_model=8, vocab_size=50)


def test_spec_validation_and_defaults():
    spec = BenchSpec()
    assert spec.encoders == ENCODERS and spec.warmup == 3 and spec.steps == 10
    assert BenchSpec(encoders=("linear",)).encoders == ("linear_attention",)
    for bad in (dict(lengths=(512, 256)), dict(lengths=(256, 256)), dict(steps=2), dict(encoders=()),
                dict(batch=0), dict(encoders=("cnn",))):
        with pytest.raises(ConfigError):
            BenchSpec(**bad)


@pytest.mark.parametrize("encoder", ENCODERS)
def test_bench_step_row(encoder):
    row = bench_step(encoder, 32, 2, **SMALL)
    assert (row.encoder, row.seq_len, row.batch) == (encoder, 32, 2)
    assert row.train_ms > 0 and row.infer_ms > 0 and row.peak_bytes > 0 and not row.oom
    assert row.infer_ms <= row.train_ms


def test_peak_bytes_are_deterministic():
    first = bench_step("attention", 48, 2, rng=3, **SMALL).peak_bytes
    assert bench_step("attention", 48, 2, rng=3, **SMALL).peak_bytes == first


def test_memory_limit_gives_oom_row():
    row = bench_step("attention", 64, 2, memory_limit=10_000, **SMALL)
    assert row.oom
    assert row.cells()[3:] == ["OOM", "OOM", "OOM"]


def test_run_suite_csv_and_gnuplot(tmp_path):
    spec = BenchSpec(encoders=("gru", "ssm"), lengths=(16, 32), **SMALL)
    out = tmp_path / "bench.csv"
    logged = []
    rows = run_suite(spec, out, log=logged.append)
    assert [(r.encoder, r.seq_len) for r in rows] == [("gru", 16), ("gru", 32), ("ssm", 16), ("ssm", 32)]
    lines = list(csv.reader(out.open()))
    assert lines[0] == ["encoder", "seq_len", "batch", "train_ms", "infer_ms", "peak_bytes"]
    assert len(lines) == 5 and all(len(line) == 6 for line in lines)
    assert len(logged) == 4
    run_suite(BenchSpec(encoders=("gru",), lengths=(16,), **SMALL), out)
    assert len(list(csv.reader(out.open()))) == 6  # appended, header not repeated
    rows.append(BenchRow("ssm", 64, 2, math.nan, math.nan, 0, oom=True))
    write_gnuplot(rows, tmp_path / "bench.dat")
    text = (tmp_path / "bench.dat").read_text()
    assert text.startswith("# gru\n") and "\n\n\n# ssm\n" in text and "64 NaN NaN NaN" in text


def test_fit_helpers():
    x = np.array([256, 512, 1024, 2048])
    assert affine_residual(x, 3 * x + 7) < 1e-12
    assert quadratic_improvement(x, 3 * x + 7 + 1e-9 * np.sin(x)) < 10
    y = 1e-3 * x**2 + x
    assert affine_residual(x, y) > 0.05
    assert quadratic_improvement(x, y) == math.inf or quadratic_improvement(x, y) > 1e6


def test_peak_memory_scaling_shapes():
    lengths = (256, 384, 512, 640)
    ssm = [bench_step("ssm", n, 1, **SMALL).peak_bytes for n in lengths]
    att = [bench_step("attention", n, 1, **SMALL).peak_bytes for n in lengths]
    assert affine_residual(lengths, ssm) < 0.15
    assert quadratic_improvement(lengths, att) >= 2.0
