"""Adam, step-decay schedule, early stopping, checkpoints and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SceneSample, augment, batch_arrays, random_crop
from .decoder import MPCMNet
from .layers import softmax
from .losses import LossConfig, joint_loss
from .metrics import ConfusionMatrix, confusion_accumulate, metrics
from .tensor import ShapeError, Tape, Tensor, precision

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    early_stop_patience: int = 20
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0
    crop_size: int = 64
    c0: int = 8
    state_dim: int = 4
    heads: int = 1
    augment: bool = True
    flip_probability: float = 0.3
    joint_alpha: float = 0.6
    joint_beta: float = 0.4
    focal_gamma: float = 0.25
    focal_delta: float = 0.2
    dice_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("lr", "lr_decay_every", "lr_decay_factor", "early_stop_patience", "batch_size",
                     "epochs", "crop_size", "c0", "state_dim", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.joint_alpha, self.joint_beta, self.focal_gamma, self.focal_delta, self.dice_eps)


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = asdict(base or TrainConfig())
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(types[key], raw)
        except ValueError as e:
            raise ValueError(f"config line {lineno}: {e}") from None
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class TrainState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    since_improvement: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Sequence[Tensor], seed: int) -> "TrainState":
        rng = np.random.default_rng(seed)
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   rng_state=rng.bit_generator.state)

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        g.bit_generator.state = self.rng_state
        return g


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: TrainState, cfg: TrainConfig,
              lr: float | None = None) -> None:
    """In-place Adam with bias correction and decoupled weight decay (applied first)."""
    lr = cfg.lr if lr is None else lr
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1**t
    c2 = 1 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} / moment {m.shape} do not match parameter {p.shape}")
        if cfg.weight_decay:
            p.data *= 1 - lr * cfg.weight_decay
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


class EarlyStopping:
    """Stops once validation loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int, best: float = math.inf, since: int = 0):
        self.patience, self.best, self.since = patience, best, since

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best, self.since = val_loss, 0
            return True, False
        self.since += 1
        return False, self.since >= self.patience


# ----------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def save_tensors(path: Path, items: Sequence[tuple[str, np.ndarray]]) -> None:
    path.mkdir(parents=True, exist_ok=True)
    lines, blobs, offset = [], [], 0
    for name, arr in items:
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        shape = "x".join(str(n) for n in arr.shape) if arr.ndim else "scalar"
        lines.append(f"{name} {shape} {offset} {code}")
        blobs.append(raw)
        offset += len(raw)
    (path / "weights.bin").write_bytes(b"".join(blobs))
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_tensors(path: Path) -> dict[str, np.ndarray]:
    manifest = path / "manifest.txt"
    blob_path = path / "weights.bin"
    if not manifest.exists() or not blob_path.exists():
        raise CheckpointError(f"{path} is missing manifest.txt or weights.bin")
    blob = blob_path.read_bytes()
    out: dict[str, np.ndarray] = {}
    end = 0
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4 or parts[3] not in _DTYPES:
            raise CheckpointError(f"manifest line {lineno} malformed: {line!r}")
        name, shape_s, off_s, code = parts
        shape = () if shape_s == "scalar" else tuple(int(n) for n in shape_s.split("x"))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        off = int(off_s)
        if off + nbytes > len(blob):
            raise CheckpointError(
                f"entry {name!r} needs bytes {off}..{off + nbytes} but weights.bin has {len(blob)}"
            )
        out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        end = max(end, off + nbytes)
    if end != len(blob):
        raise CheckpointError(f"weights.bin has {len(blob) - end} trailing bytes not named in the manifest")
    return out


def _rng_lines(state: dict) -> list[str]:
    inner = state["state"]
    return [f"rng_bit_generator = {state['bit_generator']}", f"rng_state = {inner['state']}",
            f"rng_inc = {inner['inc']}", f"rng_has_uint32 = {state['has_uint32']}",
            f"rng_uinteger = {state['uinteger']}"]


def checkpoint_save(path, model: MPCMNet, state: TrainState | None, cfg: TrainConfig) -> None:
    path = Path(path)
    names = [n for n, _ in model.named_parameters()]
    items = [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    items += [(f"buffer.{n}", b) for n, b in model.named_buffers()]
    if state is not None:
        items += [(f"adam.m.{n}", m) for n, m in zip(names, state.m)]
        items += [(f"adam.v.{n}", v) for n, v in zip(names, state.v)]
    save_tensors(path, items)
    (path / "config.txt").write_text(format_config(cfg))
    if state is not None:
        lines = [f"step = {state.step}", f"epoch = {state.epoch}", f"best_val = {state.best_val!r}",
                 f"since_improvement = {state.since_improvement}"] + _rng_lines(state.rng_state)
        (path / "train_state.txt").write_text("\n".join(lines) + "\n")


def _kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def checkpoint_load(path, with_state: bool = True) -> tuple[MPCMNet, TrainState | None, TrainConfig]:
    path = Path(path)
    cfg_path = path / "config.txt"
    if not cfg_path.exists():
        raise CheckpointError(f"{path} has no config.txt")
    cfg = parse_config(cfg_path.read_text())
    tensors = load_tensors(path)
    with precision(cfg.dtype):
        model = MPCMNet(cfg.c0, cfg.state_dim, cfg.heads, rng=np.random.default_rng(0))
    items = {}
    for n, _ in model.named_parameters():
        key = f"param.{n}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks entry {key!r}")
        items[n] = tensors[key]
    for n, _ in model.named_buffers():
        key = f"buffer.{n}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks entry {key!r}")
        items[n] = tensors[key]
    try:
        model.load_state(items)
    except ShapeError as e:
        raise CheckpointError(str(e)) from None
    state = None
    st_path = path / "train_state.txt"
    if with_state and st_path.exists():
        kv = _kv(st_path.read_text())
        names = [n for n, _ in model.named_parameters()]
        try:
            m = [tensors[f"adam.m.{n}"] for n in names]
            v = [tensors[f"adam.v.{n}"] for n in names]
        except KeyError as e:
            raise CheckpointError(f"checkpoint lacks optimizer entry {e.args[0]!r}") from None
        rng_state = {"bit_generator": kv["rng_bit_generator"],
                     "state": {"state": int(kv["rng_state"]), "inc": int(kv["rng_inc"])},
                     "has_uint32": int(kv["rng_has_uint32"]), "uinteger": int(kv["rng_uinteger"])}
        state = TrainState(m, v, int(kv["step"]), int(kv["epoch"]), float(kv["best_val"]),
                           int(kv["since_improvement"]), rng_state)
    return model, state, cfg


# ----------------------------------------------------------------------------
# loop


def build_model(cfg: TrainConfig) -> MPCMNet:
    with precision(cfg.dtype):
        return MPCMNet(cfg.c0, cfg.state_dim, cfg.heads, rng=np.random.default_rng(cfg.seed))


def evaluate(model: MPCMNet, samples: Sequence[SceneSample], cfg: TrainConfig,
             batch_size: int | None = None) -> tuple[float, ConfusionMatrix]:
    """Mean joint loss (pixel-weighted over batches) and confusion matrix, eval mode."""
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix()
    total, count = 0.0, 0
    bs = batch_size or cfg.batch_size
    for i in range(0, len(samples), bs):
        x, y = batch_arrays(list(samples[i : i + bs]), cfg.dtype)
        logits = model(Tensor(x))
        probs = softmax(logits, axis=1)
        total += float(joint_loss(probs, y, cfg.loss_config()).item()) * len(x)
        count += len(x)
        confusion_accumulate(np.argmax(logits.data, axis=1), y, cm)
    model.train(was_training)
    return total / max(count, 1), cm


def _prepare(samples: Sequence[SceneSample], cfg: TrainConfig, rng: np.random.Generator) -> list[SceneSample]:
    out = []
    for s in samples:
        if cfg.augment:
            s = augment(s, rng, cfg.flip_probability)
        out.append(random_crop(s, cfg.crop_size, rng))
    return out


def train_loop(
    model: MPCMNet,
    train: Sequence[SceneSample],
    val: Sequence[SceneSample],
    cfg: TrainConfig,
    out_dir=None,
    state: TrainState | None = None,
    log: Callable[[str], None] = print,
    max_epochs: int | None = None,
) -> TrainState:
    """Train until early stopping or ``cfg.epochs``; ``max_epochs`` caps this call only (for resume tests).

    With ``out_dir`` the latest state is written to ``out_dir/last`` every epoch and
    the best-validation parameters to ``out_dir/best``.
    """
    if len(train) == 0:
        raise ValueError("training split is empty")
    params = model.parameters()
    state = state or TrainState.fresh(params, cfg.seed)
    stopper = EarlyStopping(cfg.early_stop_patience, state.best_val, state.since_improvement)
    out = Path(out_dir) if out_dir is not None else None
    lcfg = cfg.loss_config()
    ran = 0
    model.train()
    with precision(cfg.dtype):
        while state.epoch < cfg.epochs and (max_epochs is None or ran < max_epochs):
            epoch = state.epoch
            lr = lr_schedule(epoch, cfg)
            rng = state.rng()
            order = rng.permutation(len(train))
            losses, weights = [], []
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                if len(idx) < 2 and len(order) >= 2:
                    continue  # batch norm needs two samples; drop a trailing singleton
                batch = _prepare([train[j] for j in idx], cfg, rng)
                x, y = batch_arrays(batch, cfg.dtype)
                with Tape() as tape:
                    probs = softmax(model(Tensor(x)), axis=1)
                    loss = joint_loss(probs, y, lcfg)
                grads = tape.gradients(loss, params)
                adam_step(params, grads, state, cfg, lr)
                losses.append(float(loss.item()))
                weights.append(len(idx))
            state.rng_state = rng.bit_generator.state
            train_loss = float(np.average(losses, weights=weights))
            if len(val):
                val_loss, cm = evaluate(model, val, cfg)
                val_miou = metrics(cm)[2]
            else:
                val_loss, val_miou = train_loss, float("nan")
            improved, stop = stopper.update(val_loss)
            state.best_val, state.since_improvement = stopper.best, stopper.since
            state.epoch += 1
            ran += 1
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_miou": val_miou, "lr": lr}
            state.history.append(record)
            log(f"epoch {epoch} train_loss {train_loss:.9g} val_loss {val_loss:.9g} val_miou {val_miou:.6f} lr {lr:.6g}")
            if out is not None:
                if improved:
                    checkpoint_save(out / "best", model, None, cfg)
                checkpoint_save(out / "last", model, state, cfg)
            if stop:
                log(f"early stop after epoch {epoch}: no validation improvement in {cfg.early_stop_patience} epochs")
                break
    return state
