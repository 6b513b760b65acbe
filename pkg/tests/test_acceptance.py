"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line with the
measured quantities, then asserts at the stated tolerance.
"""

import time
from collections import Counter

import numpy as np
import pytest

from ssmrec.bench import BenchSpec, affine_residual, quadratic_improvement, run_suite
from ssmrec.cli import main
from ssmrec.data import Interaction, build_sequences, gen_synthetic, leave_one_out_split, load_cache
from ssmrec.errors import DataError
from ssmrec.evaluation import MetricSpec, evaluate
from ssmrec.model import ENCODERS, ModelConfig
from ssmrec.numerics import Tape, grad_check, make_rng, numeric_gradient
from ssmrec.ssm import ScanInputs, scan_parallel, scan_recurrent
from ssmrec.training import TrainConfig, batch_loss, init_model, load_model, sample_negatives, save_model, train

from oracles import brute_force_report, random_metric_instance, reference_filter

pytestmark = pytest.mark.slow


@pytest.fixture()
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    return emit


# ---------------------------------------------------------------- 1. scan equivalence

def test_scan_equivalence(report):
    rng = make_rng(101)
    start = time.perf_counter()
    worst = 0.0
    lengths = (64, 1024, 8192)
    for k in range(100):
        L = lengths[int(rng.integers(0, 3))] if k >= 3 else lengths[k]
        s = ScanInputs(rng.uniform(0.0, 1.0, size=(L, 8, 4)), rng.normal(size=(L, 8, 4)),
                       rng.normal(size=(L, 8, 4)))
        ref = scan_recurrent(s)
        dev = float(np.max(np.abs(scan_parallel(s) - ref)) / max(float(np.max(np.abs(ref))), 1.0))
        worst = max(worst, dev)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 30
    report(1, ok, f"max rel deviation {worst:.2e} (< 1e-10), {elapsed:.1f} s (< 30 s)")
    assert worst < 1e-10 and elapsed < 30


# ---------------------------------------------------------------- 2. gradients

def _loss_gradient_error(encoder, loss):
    seqs, maps = build_sequences(gen_synthetic(12, 11, 12, 1, 0.0, 0))
    V = len(maps.item_tokens) + 1
    cfg = ModelConfig(encoder=encoder, max_len=8, d_model=4, vocab_size=V, d_state=3,
                      heads=2 if encoder != "gru" else 1, tie_output_embeddings=False)
    model = init_model(cfg, 0)
    rng = make_rng(2)
    inputs = rng.integers(0, V, size=(2, 8))
    inputs[0, :3] = 0
    mask = (inputs > 0).astype(float)
    targets = np.where(mask > 0, rng.integers(1, V, size=(2, 8)), 0)
    negs = sample_negatives(targets, V, 2, 3)
    f = lambda: batch_loss(model, inputs, targets, mask, negs, loss)
    params = model.named_parameters()
    table = params.pop("item_embedding")
    eps, order = (1e-3, 4) if encoder == "ssm" else (1e-5, 2)
    err = grad_check(f, list(params.values()), eps=eps, order=order)
    with Tape() as tape:
        value = f()
    (analytic,) = tape.gradient(value, [table])
    # the padding row sits where the norms see an all-zero input
    for rows, step in ((slice(0, 1), 1e-8), (slice(1, None), 1e-6)):
        a = analytic[rows]
        n = numeric_gradient(f, table, step)[rows]
        err = max(err, float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8))))
    return err


def test_gradient_suite(report):
    start = time.perf_counter()
    errors = {(e, l): _loss_gradient_error(e, l) for e in ENCODERS for l in ("bce", "softmax")}
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst < 1e-4 and elapsed < 120
    detail = ", ".join(f"{e}/{l} {v:.1e}" for (e, l), v in errors.items())
    report(2, ok, f"max rel error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 120 s): {detail}")
    assert worst < 1e-4 and elapsed < 120


# ---------------------------------------------------------------- 3. metric oracle

def test_metric_oracle(report):
    mismatches = 0
    cutoffs = (1, 5, 10, 20)
    for seed in range(1000, 1050):
        split, scorer = random_metric_instance(seed)
        for phase in ("validation", "test"):
            rep = evaluate(scorer, split, MetricSpec(cutoffs=cutoffs, policy="full"), phase, batch_size=16)
            recall, ndcg = brute_force_report(split, scorer, phase, cutoffs)
            mismatches += rep.recall != recall or rep.ndcg != ndcg
    report(3, mismatches == 0, f"{mismatches} exact mismatches over 50 instances x 2 phases")
    assert mismatches == 0


# ---------------------------------------------------------------- 4. preprocessing fixed point

def _toy_log(rng):
    users, items = int(rng.integers(3, 15)), int(rng.integers(3, 12))
    n = int(rng.integers(10, 150))
    rows = [(f"u{rng.integers(users)}", f"i{rng.integers(items)}", int(rng.integers(0, 40))) for _ in range(n)]
    return rows


def test_preprocessing_fixed_point(report):
    rng = make_rng(404)
    violations, kept = 0, 0
    for _ in range(20):
        rows = _toy_log(rng)
        expected = reference_filter(rows)
        try:
            seqs, maps = build_sequences([Interaction(u, i, t) for u, i, t in rows])
        except DataError:
            violations += bool(expected)
            continue
        kept += 1
        counts = Counter(int(i) for s in seqs for i in s.items)
        violations += sum(s.n < 3 for s in seqs)
        violations += sum(c < 3 for c in counts.values())
        violations += sorted(counts) != list(range(1, maps.n_items + 1))
        got = {maps.user_token(s.user_index): [maps.item_token(i) for i in s.items] for s in seqs}
        violations += got != expected
        split = leave_one_out_split(seqs, maps)
        val = split.phase_pairs("validation")
        test = split.phase_pairs("test")
        for u, s in enumerate(seqs):
            items = s.items.tolist()
            rebuilt = split.train_region(u).tolist() + [val[u][1], test[u][1]]
            violations += rebuilt != items
            violations += test[u][0].tolist() != items[:-1] or val[u][0].tolist() != items[:-2]
    report(4, violations == 0 and kept > 0, f"{violations} violations over 20 logs ({kept} non-empty)")
    assert violations == 0 and kept > 0


# ---------------------------------------------------------------- 5. overfit analog

CHAIN_TRAIN = dict(learning_rate=1e-3, batch_size=32, patience=400)


def _epochs_to_recall(encoder, split, budget):
    """First epoch whose model reaches test Recall@1 >= 0.95, or None."""
    spec = MetricSpec(cutoffs=(1,), policy="full")
    reached = []

    def on_epoch(entry, model):
        if evaluate(model, split, spec, "test").recall[1] >= 0.95:
            reached.append(entry.epoch)
            return True
        return False

    cfg = ModelConfig(encoder=encoder, max_len=32, d_model=32, vocab_size=split.vocab_size)
    train(cfg, TrainConfig(epochs=budget, seed=0, **CHAIN_TRAIN), split, on_epoch=on_epoch)
    return reached[0] if reached else None


def test_overfit_chain(report):
    split = leave_one_out_split(*build_sequences(gen_synthetic(100, 50, 40, 1, 0.0, 0)))
    start = time.perf_counter()
    ssm_epochs = _epochs_to_recall("ssm", split, 200)
    ssm_seconds = time.perf_counter() - start
    att_epochs = _epochs_to_recall("attention", split, 400)
    ok = ssm_epochs is not None and ssm_seconds < 300 and att_epochs is not None
    ratio = att_epochs / ssm_epochs if ok else float("nan")
    report(5, ok, f"SSM reaches R@1>=0.95 at epoch {ssm_epochs} in {ssm_seconds:.0f} s (<= 200, < 300 s); "
                  f"attention at epoch {att_epochs} (<= 400 budget); epoch ratio {ratio:.1f} "
                  f"({'within' if ratio <= 2 else 'above'} 2x the SSM's own epoch count)")
    assert ssm_epochs is not None and ssm_seconds < 300
    assert att_epochs is not None


# ---------------------------------------------------------------- 6. length benefit

# a catalog much larger than the lag makes "successor of an item seen about
# 100 steps ago" informative; the untied head learns the successor map per row
LAG_DATA = dict(num_users=300, num_items=500, seq_len=300, lag=100, noise=0.1)
LAG_MODEL = dict(d_model=32, dtype="float32", scan_mode="recurrent", tie_output_embeddings=False)
LAG_TRAIN = dict(learning_rate=3e-3, batch_size=8, epochs=30, patience=30, loss="softmax")


def _lag_ndcg(split, L, seed):
    cfg = ModelConfig(encoder="ssm", max_len=L, vocab_size=split.vocab_size, **LAG_MODEL)
    result = train(cfg, TrainConfig(seed=seed, **LAG_TRAIN), split)
    return evaluate(result.model, split, MetricSpec(cutoffs=(10,), policy="full"), "test").ndcg[10]


def test_length_benefit(report):
    start = time.perf_counter()
    scores = {32: [], 256: []}
    for seed in range(3):
        split = leave_one_out_split(*build_sequences(gen_synthetic(rng=seed, **LAG_DATA)))
        for L in scores:
            scores[L].append(_lag_ndcg(split, L, seed))
    elapsed = time.perf_counter() - start
    short, long = float(np.mean(scores[32])), float(np.mean(scores[256]))
    ratio = long / short if short > 0 else float("inf")
    ok = ratio >= 1.2 and elapsed < 1800
    report(6, ok, f"NDCG@10 L=256 {long:.4f} vs L=32 {short:.4f}, ratio {ratio:.2f} (>= 1.2); "
                  f"random ~{4.54 / LAG_DATA['num_items']:.4f}; per seed {scores}; {elapsed:.0f} s (< 1800 s)")
    assert ratio >= 1.2 and elapsed < 1800


# ---------------------------------------------------------------- 7. efficiency scaling

def test_efficiency_scaling(report, tmp_path):
    start = time.perf_counter()
    rows = run_suite(BenchSpec(encoders=("ssm", "attention")), tmp_path / "bench.csv")
    elapsed = time.perf_counter() - start
    by = {e: [r for r in rows if r.encoder == e] for e in ("ssm", "attention")}
    lengths = [r.seq_len for r in by["ssm"]]
    ssm_res = affine_residual(lengths, [r.train_ms for r in by["ssm"]])
    att_gain = quadratic_improvement(lengths, [r.train_ms for r in by["attention"]])
    peak_ratio = by["ssm"][-1].peak_bytes / by["attention"][-1].peak_bytes
    ok = ssm_res < 0.15 and att_gain >= 2 and peak_ratio <= 0.5 and elapsed < 1200
    times = {e: [round(r.train_ms) for r in rs] for e, rs in by.items()}
    report(7, ok, f"SSM affine residual {ssm_res:.3f} (< 0.15); attention quadratic gain {att_gain:.1f} (>= 2); "
                  f"peak ratio at {lengths[-1]} {peak_ratio:.3f} (<= 0.5); train ms {times}; {elapsed:.0f} s (< 1200 s)")
    assert ssm_res < 0.15
    assert att_gain >= 2
    assert peak_ratio <= 0.5
    assert elapsed < 1200


# ---------------------------------------------------------------- 8. determinism and persistence

def _pipeline(root):
    root.mkdir()
    argv = [
        ["synth", "--users", "40", "--items", "30", "--len", "20", "--lag", "3", "--noise", "0.1",
         "--seed", "7", "--out", str(root / "log.tsv")],
        ["prepare", "--input", str(root / "log.tsv"), "--output", str(root / "data.bin")],
        ["train", "--data", str(root / "data.bin"), "--out", str(root / "run"), "--encoder", "ssm",
         "--max-len", "16", "--epochs", "5", "--seed", "7", "--set", "model.d_model=8", "--quiet"],
    ]
    for a in argv:
        assert main(a) == 0
    model, _, _ = load_model(root / "run" / "model.ckpt")
    split = load_cache(root / "data.bin")
    spec = MetricSpec(policy="sampled", num_candidates=10, seed=7)
    return model, split, spec, evaluate(model, split, spec, "test")


def test_determinism_and_persistence(report, tmp_path):
    model, split, spec, first = _pipeline(tmp_path / "a")
    _, _, _, second = _pipeline(tmp_path / "b")
    save_model(tmp_path / "copy.ckpt", model)
    reloaded, _, _ = load_model(tmp_path / "copy.ckpt")
    again = evaluate(reloaded, split, spec, "test")
    same_run = first == second
    same_ckpt = again == first and all(
        np.array_equal(p.data, reloaded.named_parameters()[k].data) for k, p in model.named_parameters().items())
    report(8, same_run and same_ckpt, f"repeat pipeline identical: {same_run}; checkpoint round trip identical: {same_ckpt}")
    assert same_run and same_ckpt
