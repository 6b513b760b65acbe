"""Loss, Adam, the epoch loop with early stopping, and RECSSM01 checkpoints."""

from __future__ import annotations

import csv
import io
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as kv
from .data import SplitDataset, make_training_batches, training_arrays
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    EvaluationError,
    NonFiniteGradientError,
    ShapeError,
)
from .evaluation import MetricSpec, evaluate
from .model import PAD, ModelConfig, SeqRecModel
from .numerics import ops
from .numerics.rng import derive_seed, make_rng
from .numerics.tensor import Tape, Tensor

LOSSES = ("bce", "softmax")
LOG_HEADER = ["epoch", "loss", "recall@10", "ndcg@10", "seconds"]
BEST_FILE = "model.ckpt"
LAST_FILE = "last.ckpt"
LOG_FILE = "train_log.csv"


@dataclass
class TrainConfig:
    learning_rate: float = 0.0004
    batch_size: int = 256
    epochs: int = 500
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    negatives: int = 1
    loss: str = "bce"
    clip_norm: float = 5.0  # 0 disables clipping
    seed: int = 0
    eval_policy: str = "full"
    eval_candidates: int = 100
    checkpoint_dir: str = ""  # empty: keep everything in memory

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.patience < 1:
            raise ConfigError("epochs must be >= 0 and patience >= 1")
        if self.negatives < 1:
            raise ConfigError(f"negatives must be >= 1, got {self.negatives}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0")

    def validation_spec(self) -> MetricSpec:
        return MetricSpec(cutoffs=(10,), policy=self.eval_policy,
                          num_candidates=self.eval_candidates, seed=self.seed)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, named: dict[str, Tensor]) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in named.items()},
                   {k: np.zeros_like(p.data) for k, p in named.items()}, 0)


def init_model(model_config: ModelConfig, seed: int = 0) -> SeqRecModel:
    return SeqRecModel(model_config, seed)


# ---------------------------------------------------------------- losses

def sample_negatives(targets: np.ndarray, vocab_size: int, count: int, rng) -> np.ndarray:
    """Uniform ids in [1, V) excluding each position's positive, shape [..., count]."""
    if vocab_size < 3:
        raise ConfigError("negative sampling needs at least two items")
    targets = np.asarray(targets)[..., None]
    draws = make_rng(rng).integers(1, vocab_size - 1, size=targets.shape[:-1] + (count,))
    return draws + (draws >= targets)


def _mask_total(mask: np.ndarray) -> float:
    total = float(np.sum(mask))
    if total <= 0:
        raise EvaluationError("loss mask is all zero: no training signal in batch")
    return total


def sampled_bce_loss(pos_scores, neg_scores, mask) -> Tensor:
    """Mean over masked positions of ``-[log s(pos) + sum_s log(1 - s(neg_s))]``."""
    pos = ops.as_tensor(pos_scores)
    neg = ops.as_tensor(neg_scores)
    mask = np.asarray(mask, dtype=pos.dtype)
    if neg.shape[:-1] != pos.shape or mask.shape != pos.shape:
        raise ShapeError(f"scores {pos.shape}/{neg.shape} and mask {mask.shape} do not align")
    total = _mask_total(mask)
    per_position = ops.add(ops.log_sigmoid(pos), ops.sum(ops.log_sigmoid(ops.neg(neg)), axis=-1))
    return ops.mul(ops.sum(ops.mul(per_position, mask)), -1.0 / total)


def softmax_loss(logits: Tensor, targets: np.ndarray, mask) -> Tensor:
    """Full-catalogue cross-entropy; ``logits[..., j]`` scores item ``j + 1``."""
    mask = np.asarray(mask, dtype=logits.dtype)
    total = _mask_total(mask)
    logp = ops.log_softmax(logits, axis=-1)
    cols = np.maximum(np.asarray(targets) - 1, 0)
    picked = ops.getitem(logp, tuple(np.indices(cols.shape)) + (cols,))
    return ops.mul(ops.sum(ops.mul(picked, mask)), -1.0 / total)


def batch_loss(model: SeqRecModel, inputs, targets, mask, negatives=None, loss: str = "bce") -> Tensor:
    h = model.encode(inputs)
    table = model.output_table()
    if loss == "softmax":
        items = ops.getitem(table, slice(1, None))
        return softmax_loss(ops.matmul(h, ops.swapaxes(items, 0, 1)), targets, mask)
    if negatives is None:
        raise ConfigError("bce loss needs sampled negatives")
    pos = ops.sum(ops.mul(h, ops.embedding(table, targets)), axis=-1)
    b, length, d = h.shape
    neg = ops.sum(ops.mul(ops.embedding(table, negatives), ops.reshape(h, (b, length, 1, d))), axis=-1)
    return sampled_bce_loss(pos, neg, mask)


# ---------------------------------------------------------------- optimizer

def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam, in place. Row 0 of embedding tables never moves."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"step rejected: {bad} non-finite gradient entries in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name.endswith("embedding"):
            g[PAD] = 0.0
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------- checkpoint container

CHECKPOINT_MAGIC = b"RECSSM01"
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(arrays: dict[str, np.ndarray], configs: dict[str, str], path) -> None:
    """Write named arrays plus a ``key=value`` config block; records sorted by name."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    text = kv.dumps(configs).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse a whole file; nothing is returned unless every record is intact."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"checkpoint {path} is truncated at byte {len(raw)}")
        out = raw[pos:pos + n]
        pos += n
        return out

    magic = take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (text_len,) = struct.unpack("<I", take(4))
    try:
        configs = kv.loads(take(text_len).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8", errors="replace")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: record {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after last record")
    return arrays, configs


def save_model(path, model: SeqRecModel, train_config: TrainConfig | None = None,
               extra_arrays: dict[str, np.ndarray] | None = None,
               extra_config: dict[str, str] | None = None) -> None:
    configs = kv.to_kv(model.config, "model")
    if train_config is not None:
        configs.update(kv.to_kv(train_config, "train"))
    configs.update(extra_config or {})
    arrays = {k: p.data for k, p in model.named_parameters().items()}
    arrays.update(extra_arrays or {})
    save_checkpoint(arrays, configs, path)


_EXTRA_PREFIXES = ("adam.", "best.")


def load_model(path) -> tuple[SeqRecModel, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, config text, extra records)."""
    arrays, configs = load_checkpoint(path)
    try:
        model_config = kv.from_kv(ModelConfig, {k: v for k, v in configs.items() if k.startswith("model.")},
                                  "model")
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    extras = {k: v for k, v in arrays.items() if k.startswith(_EXTRA_PREFIXES)}
    params = {k: v for k, v in arrays.items() if k not in extras}
    model = SeqRecModel(model_config)
    try:
        model.load_arrays(params)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: checkpoint does not match its model config: {exc}") from exc
    return model, configs, extras


# ---------------------------------------------------------------- epoch loop

@dataclass
class EpochLog:
    epoch: int
    loss: float
    recall: float
    ndcg: float
    seconds: float

    def row(self) -> list:
        return [self.epoch, repr(self.loss), repr(self.recall), repr(self.ndcg), f"{self.seconds:.3f}"]


@dataclass
class TrainResult:
    model: SeqRecModel  # best-validation parameters
    history: list[EpochLog]
    best_epoch: int  # 0 means the initialization was never beaten
    best_ndcg: float
    epochs_run: int
    stopped_early: bool = False


@dataclass
class _LoopState:
    epoch: int = 0
    best_epoch: int = 0
    best_ndcg: float = -math.inf
    best: dict[str, np.ndarray] = field(default_factory=dict)

    def to_kv(self) -> dict[str, str]:
        return {"state.epoch": str(self.epoch), "state.best_epoch": str(self.best_epoch),
                "state.best_ndcg": repr(self.best_ndcg)}


def _snapshot(model: SeqRecModel) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def _save_last(path: Path, model, train_config, adam: AdamState, loop: _LoopState) -> None:
    extras = {f"adam.m.{k}": v for k, v in adam.m.items()}
    extras.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    extras.update({f"best.{k}": v for k, v in loop.best.items()})
    config = loop.to_kv()
    config["state.step"] = str(adam.step)
    save_model(path, model, train_config, extras, config)


def _load_last(path: Path, model_config: ModelConfig):
    model, configs, extras = load_model(path)
    if model.config != model_config:
        raise CheckpointError(f"{path}: model config differs from the requested run")
    names = list(model.named_parameters())
    try:
        adam = AdamState({k: extras[f"adam.m.{k}"] for k in names},
                         {k: extras[f"adam.v.{k}"] for k in names},
                         int(configs["state.step"]))
        loop = _LoopState(int(configs["state.epoch"]), int(configs["state.best_epoch"]),
                          float(configs["state.best_ndcg"]),
                          {k: extras[f"best.{k}"] for k in names})
    except KeyError as exc:
        raise CheckpointError(f"{path}: not a resumable checkpoint (missing {exc})") from None
    return model, adam, loop


def _best_model(model_config: ModelConfig, best: dict[str, np.ndarray]) -> SeqRecModel:
    out = SeqRecModel(model_config)
    out.load_arrays(best)
    return out


def train(model_config: ModelConfig, train_config: TrainConfig, split: SplitDataset,
          resume: bool = False, log=None, on_epoch=None) -> TrainResult:
    """Train with per-epoch validation and early stopping on NDCG@10.

    With ``train_config.checkpoint_dir`` set, the best model goes to
    ``model.ckpt``, the resumable state to ``last.ckpt`` and the epoch log to
    ``train_log.csv``. Epoch ``e`` draws its shuffle and negatives from seeds
    derived from ``(seed, e)``, so a resumed run repeats the uninterrupted one.
    ``on_epoch(entry, model)`` runs after each epoch; a true return stops training.
    """
    if not split.training_users():
        raise ConfigError("no user has enough interactions to train on")
    if model_config.vocab_size != split.vocab_size:
        raise ConfigError(f"model vocab_size {model_config.vocab_size} != dataset vocab_size {split.vocab_size}")
    cfg = train_config
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if out_dir is None or not (out_dir / LAST_FILE).exists():
            raise CheckpointError("resume requested but no last.ckpt in checkpoint_dir")
        model, adam, loop = _load_last(out_dir / LAST_FILE, model_config)
    else:
        model = init_model(model_config, cfg.seed)
        adam = AdamState.zeros_like(model.named_parameters())
        loop = _LoopState(best=_snapshot(model))
        if out_dir is not None:
            save_model(out_dir / BEST_FILE, model, cfg)
            _save_last(out_dir / LAST_FILE, model, cfg, adam, loop)
            with (out_dir / LOG_FILE).open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)

    params = model.named_parameters()
    names = list(params)
    tensors = list(params.values())
    arrays = training_arrays(split, model_config.max_len)
    spec = cfg.validation_spec()
    history: list[EpochLog] = []
    stopped = False

    def result() -> TrainResult:
        return TrainResult(_best_model(model_config, loop.best), history, loop.best_epoch,
                           loop.best_ndcg, loop.epoch, stopped)

    while loop.epoch < cfg.epochs:
        if loop.epoch - loop.best_epoch >= cfg.patience:
            stopped = True
            break
        epoch = loop.epoch + 1
        started = time.perf_counter()
        neg_rng = make_rng(derive_seed(cfg.seed, "negatives", epoch))
        batches = make_training_batches(split, model_config.max_len, cfg.batch_size,
                                        derive_seed(cfg.seed, "shuffle", epoch), arrays)
        losses = []
        for inputs, targets, mask in batches:
            negs = None
            if cfg.loss == "bce":
                negs = sample_negatives(targets, model_config.vocab_size, cfg.negatives, neg_rng)
            with Tape() as tape:
                loss = batch_loss(model, inputs, targets, mask, negs, cfg.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"epoch {epoch}: loss became {value}; best checkpoint kept", result())
            grads = dict(zip(names, tape.gradient(loss, tensors)))
            clip_gradients(grads, cfg.clip_norm)
            try:
                adam_step(params, grads, adam, cfg)
            except NonFiniteGradientError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}; best checkpoint kept", result()) from exc
            losses.append(value)
        report = evaluate(model, split, spec, phase="validation")
        loop.epoch = epoch
        entry = EpochLog(epoch, sum(losses) / len(losses), report.recall[10], report.ndcg[10],
                         time.perf_counter() - started)
        history.append(entry)
        if log is not None:
            log(f"epoch {epoch}: loss={entry.loss:.5f} R@10={entry.recall:.4f} "
                f"N@10={entry.ndcg:.4f} ({entry.seconds:.1f}s)")
        if entry.ndcg > loop.best_ndcg:
            loop.best_ndcg = entry.ndcg
            loop.best_epoch = epoch
            loop.best = _snapshot(model)
            if out_dir is not None:
                save_model(out_dir / BEST_FILE, model, cfg)
        if out_dir is not None:
            _save_last(out_dir / LAST_FILE, model, cfg, adam, loop)
            with (out_dir / LOG_FILE).open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(entry.row())
        if on_epoch is not None and on_epoch(entry, model):
            stopped = True
            break
    return result()
