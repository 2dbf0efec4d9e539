"""Adam optimisation with a phased learning-rate schedule, evaluation and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from . import postprocess as pp
from .data import IMAGENET_MEAN, IMAGENET_STD, AugmentParams, Sample, make_batch, standardize
from .errors import ConfigError
from .nets import Network, NetworkSpec, build, forward_segment
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "phase_rate", "train_loss", "train_jaccard", "val_iou", "val_dice")


class TrainingError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


class SpecMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------- optimiser

@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "OptState":
        return OptState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptState, rate: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if rate <= 0:
        raise ConfigError("learning rate must be > 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ConfigError(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------- schedule

@dataclass
class Schedule:
    phases: list[tuple[int, float]] = field(default_factory=lambda: [(10, 1e-3), (5, 1e-4)])
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.phases = [(int(e), float(r)) for e, r in self.phases]

    def validate(self) -> list[str]:
        errors = []
        if not self.phases:
            errors.append("schedule.phases must not be empty")
        for i, (epochs, rate) in enumerate(self.phases):
            if epochs < 1:
                errors.append(f"schedule.phases[{i}] epochs must be >= 1")
            if not rate > 0:
                errors.append(f"schedule.phases[{i}] rate must be > 0")
        if self.batch_size < 1:
            errors.append("schedule.batch_size must be >= 1")
        return errors

    def check(self):
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.phases)

    def rates(self) -> list[float]:
        """Learning rate of every epoch, in order."""
        return [r for e, r in self.phases for _ in range(e)]


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    per_image: list[dict]
    iou: float
    dice: float
    tp: int
    fp: int
    fn: int
    ms_per_image: float | None = None

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def predict_proba(net: Network, samples: list[Sample], mean=IMAGENET_MEAN, std=IMAGENET_STD,
                  batch_size: int = 16) -> list[np.ndarray]:
    net.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start: start + batch_size]
        x = np.stack([standardize(s, mean, std).image for s in chunk])
        probs = forward_segment(net, x).data
        out.extend(probs[i, 0] for i in range(len(chunk)))
    return out


def score_prediction(prob: np.ndarray, truth: np.ndarray, threshold=pp.THRESHOLD, min_area=pp.MIN_AREA,
                     connectivity=pp.CONNECTIVITY, radius=pp.MATCH_RADIUS) -> dict:
    pred = pp.binarize(prob, threshold)
    det = pp.detect_mask(pred, connectivity, min_area)
    match = pp.match_lesions([c.centroid for c in det.lesions], truth, radius, connectivity)
    return {"iou": losses.iou_binary(pred, truth), "dice": losses.dice(pred, truth),
            "tp": match.tp, "fp": match.fp, "fn": match.fn, "present": det.present}


def evaluate(net: Network, samples: list[Sample], threshold=pp.THRESHOLD, min_area=pp.MIN_AREA,
             connectivity=pp.CONNECTIVITY, radius=pp.MATCH_RADIUS, timing: bool = False,
             repeats: int = 20, mean=IMAGENET_MEAN, std=IMAGENET_STD, batch_size: int = 16,
             predictor: Callable[[list[Sample]], list[np.ndarray]] | None = None) -> EvalResult:
    """Hard IoU/Dice per image at ``threshold`` plus lesion matching; means over images.

    ``predictor`` replaces the network (used for oracle predictors). With
    ``timing`` each image is pushed through forward + detection ``repeats``
    times after one warm-up and the median is kept.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty fold")
    probs = predictor(samples) if predictor else predict_proba(net, samples, mean, std, batch_size)
    rows = []
    for s, prob in zip(samples, probs):
        row = {"id": s.source_id}
        row.update(score_prediction(prob, s.mask, threshold, min_area, connectivity, radius))
        rows.append(row)
    ms = None
    if timing:
        medians = []
        for s in samples:
            one = [s]

            def run():
                p = predictor(one)[0] if predictor else predict_proba(net, one, mean, std)[0]
                pp.detect(p, threshold, connectivity, min_area)

            run()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                times.append((time.perf_counter() - t0) * 1000)
            medians.append(float(np.median(times)))
        ms = float(np.mean(medians))
    return EvalResult(rows, float(np.mean([r["iou"] for r in rows])), float(np.mean([r["dice"] for r in rows])),
                      sum(r["tp"] for r in rows), sum(r["fp"] for r in rows), sum(r["fn"] for r in rows), ms)


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    opt: OptState = field(default_factory=OptState)
    epochs_done: int = 0
    history: list[dict] = field(default_factory=list)
    best_iou: float = -1.0


def train_step(net: Network, x: np.ndarray, y: np.ndarray, opt: OptState, rate: float,
               variant: str = "aggregate") -> tuple[float, float]:
    params = dict(net.named_parameters())
    net.train()
    net.zero_grad()
    with Graph() as g:
        probs = net(Tensor(x.astype(net.dtype)))
        loss, j = losses.combined_loss_parts(probs, y, variant)
    loss_value = float(loss.data)
    if not math.isfinite(loss_value):
        raise TrainingError("non-finite loss")
    g.backward(loss, wrt=params.values())
    grads = {name: p.grad for name, p in params.items()}
    adam_step(params, grads, opt, rate)
    return loss_value, float(j.data)


def train(net: Network, train_samples: list[Sample], val_samples: list[Sample], schedule: Schedule,
          variant: str = "aggregate", augment: AugmentParams | None = None, state: TrainState | None = None,
          mean=IMAGENET_MEAN, std=IMAGENET_STD, threshold=pp.THRESHOLD, threads: int = 1,
          on_epoch: Callable[[Network, TrainState, dict], None] | None = None) -> TrainState:
    """Run the remaining epochs of ``schedule``; resumes from ``state.epochs_done``."""
    schedule.check()
    if not train_samples:
        raise ValueError("no training samples")
    state = state or TrainState()
    rates = schedule.rates()
    n = len(train_samples)
    for epoch in range(state.epochs_done, len(rates)):
        rate = rates[epoch]
        order = np.random.default_rng([schedule.seed, epoch]).permutation(n)
        batch_losses, batch_js = [], []
        for b, start in enumerate(range(0, n, schedule.batch_size)):
            idx = order[start: start + schedule.batch_size]
            x, y = make_batch(train_samples, idx, augment, schedule.seed, epoch, mean, std, threads)
            try:
                loss, j = train_step(net, x, y, state.opt, rate, variant)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch + 1}, batch {b}: {exc}") from exc
            batch_losses.append(loss)
            batch_js.append(j)
        row = {"epoch": epoch + 1, "phase_rate": rate, "train_loss": float(np.mean(batch_losses)),
               "train_jaccard": float(np.mean(batch_js))}
        if val_samples:
            res = evaluate(net, val_samples, threshold=threshold, mean=mean, std=std)
            row.update(val_iou=res.iou, val_dice=res.dice)
        else:
            row.update(val_iou=float("nan"), val_dice=float("nan"))
        state.history.append(row)
        state.epochs_done = epoch + 1
        log.info("epoch=%d rate=%g train_loss=%.6f train_jaccard=%.6f val_iou=%.4f val_dice=%.4f",
                 row["epoch"], rate, row["train_loss"], row["train_jaccard"], row["val_iou"], row["val_dice"])
        if on_epoch is not None:
            on_epoch(net, state, row)
    return state


def write_history(history: list[dict], path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SEGKIT-CHECKPOINT\n"
FORMAT_VERSION = 1


def _tensor_table(net: Network, opt: OptState | None):
    arrays = {f"model/{k}": v for k, v in net.state_dict().items()}
    if opt is not None:
        arrays.update({f"adam.m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam.v/{k}": v for k, v in opt.v.items()})
    return arrays


def checkpoint_save(path, net: Network, state: TrainState | None = None, extra: dict | None = None) -> None:
    """Little-endian raw tensors behind a one-line JSON header, closed by a SHA-256 trailer."""
    opt = state.opt if state is not None else None
    arrays = _tensor_table(net, opt)
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        directory.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "tensors": directory,
        "payload_bytes": offset,
        "train": None if state is None else {"t": state.opt.t, "epochs_done": state.epochs_done,
                                             "history": state.history, "best_iou": state.best_iou},
        "extra": extra or {},
    }
    body = MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(chunks)
    digest = hashlib.sha256(body).hexdigest().encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + b"SHA256 " + digest + b"\n")
    tmp.replace(path)


def checkpoint_load(path, expected_spec: NetworkSpec | None = None) -> tuple[Network, TrainState | None, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a segkit checkpoint")
    cut = raw.rfind(b"SHA256 ")
    if cut < 0 or not raw.endswith(b"\n"):
        raise CheckpointError(f"{path}: checksum trailer missing (truncated file?)")
    body, digest = raw[:cut], raw[cut + 7: -1]
    if hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    nl = body.index(b"\n", len(MAGIC))
    header = json.loads(body[len(MAGIC): nl])
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('version')}")
    spec = NetworkSpec.from_dict(header["spec"])
    if expected_spec is not None and spec.to_dict() != expected_spec.to_dict():
        raise SpecMismatchError(f"{path}: checkpoint spec {spec.to_dict()} != expected {expected_spec.to_dict()}")
    payload = body[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload size mismatch")
    arrays = {}
    for entry in header["tensors"]:
        buf = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    net = build(spec)
    model = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    dtypes = {a.dtype for a in model.values()}
    if len(dtypes) == 1 and dtypes != {np.dtype(np.float32)}:
        net.astype(dtypes.pop())
    net.load_state_dict(model)
    state = None
    if header["train"] is not None:
        tr = header["train"]
        opt = OptState({k[len("adam.m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")},
                       {k[len("adam.v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")},
                       tr["t"])
        state = TrainState(opt, tr["epochs_done"], tr["history"], tr["best_iou"])
    return net, state, header["extra"]
