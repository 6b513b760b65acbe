"""Wall-clock and tracked-memory scaling of the four encoders versus sequence length."""

from __future__ import annotations

import csv
import gc
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ENCODERS, ModelConfig, SeqRecModel, canonical_encoder
from .numerics.rng import derive_seed, make_rng
from .numerics.tensor import TRACKER, Tape
from .training import batch_loss, sample_negatives

CSV_HEADER = ["encoder", "seq_len", "batch", "train_ms", "infer_ms", "peak_bytes"]
OOM = "OOM"


@dataclass
class BenchSpec:
    encoders: tuple[str, ...] = ENCODERS
    lengths: tuple[int, ...] = (256, 512, 1024, 2048)
    batch: int = 2
    warmup: int = 3
    steps: int = 10
    dtype: str = "float32"
    seed: int = 0
    d_model: int = 50
    vocab_size: int = 1001
    memory_limit: int = 0  # tracked-byte cap per cell; 0 means none

    def __post_init__(self):
        self.encoders = tuple(canonical_encoder(e) for e in self.encoders)
        self.lengths = tuple(int(n) for n in self.lengths)
        if not self.encoders or not self.lengths:
            raise ConfigError("bench needs at least one encoder and one length")
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ConfigError(f"lengths must be strictly ascending, got {self.lengths}")
        if self.steps < 3 or self.warmup < 0 or self.batch < 1:
            raise ConfigError("need steps >= 3, warmup >= 0 and batch >= 1")


@dataclass
class BenchRow:
    encoder: str
    seq_len: int
    batch: int
    train_ms: float
    infer_ms: float
    peak_bytes: int
    oom: bool = False

    def cells(self) -> list:
        if self.oom:
            return [self.encoder, self.seq_len, self.batch, OOM, OOM, OOM]
        return [self.encoder, self.seq_len, self.batch, f"{self.train_ms:.3f}", f"{self.infer_ms:.3f}",
                self.peak_bytes]


def _median_ms(fn, warmup: int, steps: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(steps):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def bench_step(encoder: str, seq_len: int, batch: int, dtype: str = "float32", rng=0,
               warmup: int = 3, steps: int = 10, d_model: int = 50, vocab_size: int = 1001,
               memory_limit: int = 0) -> BenchRow:
    """Median timings of one forward+backward and one forward-only pass on random ids.

    ``peak_bytes`` is the tracked high-water mark of a training step above the
    bytes already live before it (parameters), so it measures activations,
    saved state and gradients.
    """
    encoder = canonical_encoder(encoder)
    seed = int(make_rng(rng).integers(2**63))
    gen = make_rng(derive_seed(seed, encoder, seq_len))
    config = ModelConfig(encoder=encoder, max_len=seq_len, d_model=d_model, vocab_size=vocab_size,
                         dtype=dtype)
    model = SeqRecModel(config, seed)
    tensors = model.parameters()
    inputs = gen.integers(1, vocab_size, size=(batch, seq_len))
    targets = gen.integers(1, vocab_size, size=(batch, seq_len))
    mask = np.ones((batch, seq_len))
    negatives = sample_negatives(targets, vocab_size, 1, gen)

    def train_step():
        with Tape() as tape:
            loss = batch_loss(model, inputs, targets, mask, negatives)
        tape.gradient(loss, tensors)

    def infer_step():
        model.score_histories(inputs)

    try:
        with TRACKER.limited(memory_limit or None):
            gc.collect()
            base = TRACKER.live
            TRACKER.reset_peak()
            train_step()
            peak = TRACKER.peak - base
            train_ms = _median_ms(train_step, warmup, steps)
            infer_ms = _median_ms(infer_step, warmup, steps)
    except MemoryError:
        gc.collect()
        return BenchRow(encoder, seq_len, batch, math.nan, math.nan, 0, oom=True)
    return BenchRow(encoder, seq_len, batch, train_ms, infer_ms, int(peak))


def run_suite(spec: BenchSpec, out=None, log=None) -> list[BenchRow]:
    """Every encoder x length cell in order; rows are appended to ``out`` as they finish."""
    rows = []
    writer = None
    fh = None
    if out is not None:
        path = Path(out)
        new = not path.exists() or path.stat().st_size == 0
        fh = path.open("a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(CSV_HEADER)
    try:
        for encoder in spec.encoders:
            for length in spec.lengths:
                row = bench_step(encoder, length, spec.batch, spec.dtype, spec.seed, spec.warmup,
                                 spec.steps, spec.d_model, spec.vocab_size, spec.memory_limit)
                rows.append(row)
                if writer is not None:
                    writer.writerow(row.cells())
                    fh.flush()
                if log is not None:
                    log(",".join(str(c) for c in row.cells()))
    finally:
        if fh is not None:
            fh.close()
    return rows


def write_gnuplot(rows: list[BenchRow], path) -> None:
    """One indexed data block per encoder: ``seq_len train_ms infer_ms peak_bytes``."""
    blocks: dict[str, list[BenchRow]] = {}
    for r in rows:
        blocks.setdefault(r.encoder, []).append(r)
    with Path(path).open("w") as fh:
        for i, (encoder, group) in enumerate(blocks.items()):
            if i:
                fh.write("\n\n")
            fh.write(f"# {encoder}\n")
            for r in group:
                if r.oom:
                    fh.write(f"{r.seq_len} NaN NaN NaN\n")
                else:
                    fh.write(f"{r.seq_len} {r.train_ms:.3f} {r.infer_ms:.3f} {r.peak_bytes}\n")


# ---------------------------------------------------------------- scaling fits

def _fit_residual(x, y, degree: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    design = np.vander(x / x.max(), degree + 1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(np.linalg.norm(y - design @ coef) / np.linalg.norm(y))


def affine_residual(x, y) -> float:
    """Relative residual ``||y - fit|| / ||y||`` of the least-squares affine fit."""
    return _fit_residual(x, y, 1)


def quadratic_improvement(x, y) -> float:
    """How many times smaller the quadratic-fit residual is than the affine one."""
    quad = _fit_residual(x, y, 2)
    return math.inf if quad == 0 else affine_residual(x, y) / quad
