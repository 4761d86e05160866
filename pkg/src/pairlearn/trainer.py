"""Training loops for the four run modes, plus evaluation and checkpoints.

Modes
-----
vpl          both branches forward on one shared batch, one backward over
             the summed stage loss, one simultaneous update event.
independent  the same loop with the pair losses disabled; the control arm.
distill      one branch loaded from a checkpoint and frozen; the other
             trains with cross entropy plus the pair loss that routes
             into it (no stage schedule).
dml          two sub-steps per batch: each branch in turn minimizes its
             own cross entropy plus a KL toward the other's (detached)
             predictions, re-forwarding between sub-steps.

Branch "a" plays the guide role in the pair losses (the conv side in the
reference pairing) and branch "b" the guided role, regardless of the
actual backbone kinds, so architecture sweeps stay well defined.

All randomness is derived from named seed streams keyed by (seed, epoch),
so a resumed run recomputes exactly the batches and augmentations the
uninterrupted run would have seen; nothing stateful needs serializing
beyond parameters, optimizer moments, and EMA shadows.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass
from math import ceil

import numpy as np

from . import plm as P
from . import tensor as T
from .backbones import Branch, build_pair
from .config import RunConfig, run_config_text
from .data import Dataset, epoch_batches, load_dataset
from .nn import ConfigError
from .optim import AdamW, Ema, StageLosses, stage_of
from .tensor import NumericOverflow, Tape, Tensor


class TrainingAborted(RuntimeError):
    """A run stopped on a non-finite loss or gradient; carries diagnostics."""

    def __init__(self, message: str, last_report: dict | None = None):
        super().__init__(message)
        self.last_report = last_report or {}


CSV_COLUMNS = [
    "epoch",
    "cl_active",
    "kl_active",
    "lr_a",
    "lr_b",
    "ce_a",
    "ce_b",
    "cl",
    "kl",
    "total",
    "eval_top1_a",
    "eval_top5_a",
    "eval_top1_b",
    "eval_top5_b",
    "wall_s",
]


@dataclass
class MetricsRow:
    epoch: int
    cl_active: bool
    kl_active: bool
    lr_a: float
    lr_b: float
    ce_a: float
    ce_b: float
    cl: float | None
    kl: float | None
    total: float
    eval_top1_a: float
    eval_top5_a: float
    eval_top1_b: float
    eval_top5_b: float
    wall_s: float

    def values(self) -> list[str]:
        def num(v):
            return "" if v is None else repr(float(v))

        return [
            str(self.epoch),
            str(int(self.cl_active)),
            str(int(self.kl_active)),
            num(self.lr_a),
            num(self.lr_b),
            num(self.ce_a),
            num(self.ce_b),
            num(self.cl),
            num(self.kl),
            num(self.total),
            num(self.eval_top1_a),
            num(self.eval_top5_a),
            num(self.eval_top1_b),
            num(self.eval_top5_b),
            num(self.wall_s),
        ]


def topk_accuracy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Top-1 and top-5 accuracy; top-5 uses min(5, classes) candidates."""
    top1 = float(np.mean(logits.argmax(axis=1) == labels))
    k = min(5, logits.shape[1])
    part = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    top5 = float(np.mean((part == labels[:, None]).any(axis=1)))
    return top1, top5


def evaluate(branch: Branch, ds: Dataset, spec, batch_size: int,
             ema: Ema | None = None) -> tuple[float, float]:
    """Deterministic eval-mode accuracy; swaps in EMA weights when given."""
    saved = ema.swap_in() if ema is not None else None
    try:
        chunks = []
        for batch in epoch_batches(ds, spec, batch_size, epoch=0, train=False):
            out = branch(Tensor(batch.images), train=False)
            chunks.append(out.logits.values)
        logits = np.concatenate(chunks)
    finally:
        if saved is not None:
            ema.swap_out(saved)
    return topk_accuracy(logits, ds.labels)


class _EpochStats:
    """Example-weighted means of per-batch loss values."""

    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, name: str, value: float, n: int) -> None:
        self.sums[name] = self.sums.get(name, 0.0) + value * n
        self.counts[name] = self.counts.get(name, 0) + n

    def mean(self, name: str) -> float | None:
        if name not in self.sums:
            return None
        return self.sums[name] / self.counts[name]


class Trainer:
    """Owns the branch pair, optimizers, EMA, and the epoch counter."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.schedule = config.schedule()
        self.train_ds = load_dataset(config.data, "train")
        self.eval_ds = load_dataset(config.data, "eval")
        image_size = config.data.image_size
        channels = config.data.channels
        self.branch_a, self.branch_b = build_pair(
            config.branch_a, config.branch_b, channels, image_size, config.seed
        )
        steps_per_epoch = ceil(len(self.train_ds) / config.batch_size)
        total_steps = steps_per_epoch * config.epochs
        self.opt_a = AdamW(
            self.branch_a.parameter_store(), config.optim_a.max_lr,
            config.optim_a.min_lr, total_steps, config.optim_a.weight_decay,
        )
        self.opt_b = AdamW(
            self.branch_b.parameter_store(), config.optim_b.max_lr,
            config.optim_b.min_lr, total_steps, config.optim_b.weight_decay,
        )
        self.ema_a = Ema(self.branch_a.parameter_store(), config.ema_decay_max) if config.ema else None
        self.ema_b = Ema(self.branch_b.parameter_store(), config.ema_decay_max) if config.ema else None
        self.epoch = 0
        self.step_events = 0
        self._last_report: dict = {}
        if config.mode == "distill":
            self._init_distill()

    # -- distillation plumbing ------------------------------------------------

    def _init_distill(self) -> None:
        ckpt = load_checkpoint(self.config.teacher_checkpoint)
        side = self.config.distill_teacher
        teacher = self.branch_a if side == "a" else self.branch_b
        try:
            teacher.parameter_store().load_values(ckpt.sections[f"params_{side}"])
            buffers = ckpt.sections.get(f"buffers_{side}", {})
            if buffers:
                teacher.buffer_store().load_values(buffers)
        except (KeyError, ConfigError, ValueError) as e:
            raise ConfigError(
                f"teacher checkpoint incompatible with branch_{side}: {e}"
            ) from e

    @property
    def student_side(self) -> str:
        return "b" if self.config.distill_teacher == "a" else "a"

    # -- epoch loop -----------------------------------------------------------

    def active_losses(self, epoch: int) -> StageLosses:
        mode = self.config.mode
        if mode == "vpl":
            return stage_of(epoch, self.schedule)
        if mode == "independent":
            return StageLosses(cl_active=False, kl_active=False)
        if mode == "dml":
            return StageLosses(cl_active=False, kl_active=True)
        # distill: the single routed term, every epoch
        if self.student_side == "b":
            return StageLosses(cl_active=True, kl_active=False)
        return StageLosses(cl_active=False, kl_active=True)

    def train(self, until_epoch: int | None = None, on_row=None) -> list[MetricsRow]:
        until = self.config.epochs if until_epoch is None else until_epoch
        if until > self.config.epochs:
            raise ConfigError(f"cannot train past configured epochs ({self.config.epochs})")
        rows = []
        while self.epoch < until:
            row = self._run_epoch(self.epoch)
            rows.append(row)
            self.epoch += 1
            if on_row is not None:
                on_row(row)
        return rows

    def _run_epoch(self, epoch: int) -> MetricsRow:
        t0 = time.perf_counter()
        active = self.active_losses(epoch)
        stats = _EpochStats()
        lr_a = lr_b = 0.0
        try:
            for batch in epoch_batches(
                self.train_ds, self.config.data, self.config.batch_size, epoch, train=True
            ):
                n = batch.images.shape[0]
                if self.config.mode == "dml":
                    lr_a, lr_b = self._dml_step(batch, stats, n)
                elif self.config.mode == "distill":
                    lr_a, lr_b = self._distill_step(batch, stats, n, active)
                else:
                    lr_a, lr_b = self._joint_step(batch, stats, n, active)
        except (NumericOverflow, FloatingPointError) as e:
            raise TrainingAborted(
                f"epoch {epoch}: {e}", last_report=self._last_report
            ) from e
        top1_a, top5_a = evaluate(
            self.branch_a, self.eval_ds, self.config.data, self.config.batch_size, self.ema_a
        )
        top1_b, top5_b = evaluate(
            self.branch_b, self.eval_ds, self.config.data, self.config.batch_size, self.ema_b
        )
        return MetricsRow(
            epoch=epoch,
            cl_active=active.cl_active,
            kl_active=active.kl_active,
            lr_a=lr_a,
            lr_b=lr_b,
            ce_a=stats.mean("ce_a"),
            ce_b=stats.mean("ce_b"),
            cl=stats.mean("cl"),
            kl=stats.mean("kl"),
            total=stats.mean("total"),
            eval_top1_a=top1_a,
            eval_top5_a=top5_a,
            eval_top1_b=top1_b,
            eval_top5_b=top5_b,
            wall_s=time.perf_counter() - t0,
        )

    def _record(self, report: P.LossReport, stats: _EpochStats, n: int) -> None:
        present = report.present()
        self._last_report = present
        for name, value in present.items():
            key = {"ce_cnn": "ce_a", "ce_trans": "ce_b"}.get(name, name)
            stats.add(key, value, n)

    def _joint_step(self, batch, stats, n, active) -> tuple[float, float]:
        """vpl and independent: one backward over the summed loss."""
        x = Tensor(batch.images)
        with Tape() as tape:
            out_a = self.branch_a(x, train=True)
            out_b = self.branch_b(x, train=True)
            report = P.route(
                out_a.embeddings, out_b.embeddings, out_a.logits, out_b.logits,
                batch.labels, self.config.plm, active,
            )
            grads = tape.backward(report.total)
        self._record(report, stats, n)
        lr_a = self.opt_a.step(grads)
        lr_b = self.opt_b.step(grads)
        self._ema_update()
        self.step_events += 1
        return lr_a, lr_b

    def _distill_step(self, batch, stats, n, active) -> tuple[float, float]:
        x = Tensor(batch.images)
        teacher = self.branch_a if self.student_side == "b" else self.branch_b
        student = self.branch_b if self.student_side == "b" else self.branch_a
        t_out = teacher(x, train=False)  # outside any tape: constants
        with Tape() as tape:
            s_out = student(x, train=True)
            ce_s = P.cross_entropy(s_out.logits, batch.labels)
            if self.student_side == "b":
                pair = P.contrastive_loss(t_out.embeddings, s_out.embeddings, self.config.plm.tau)
            else:
                pair = P.kl_loss(t_out.logits, s_out.logits, self.config.plm.rho)
            total = T.add(ce_s, pair)
            grads = tape.backward(total)
        ce_t = P.cross_entropy(t_out.logits, batch.labels)  # reporting only
        report = P.LossReport(
            ce_cnn=ce_t if self.student_side == "b" else ce_s,
            ce_trans=ce_s if self.student_side == "b" else ce_t,
            cl=pair if active.cl_active else None,
            kl=pair if active.kl_active else None,
            total=total,
        )
        self._record(report, stats, n)
        if self.student_side == "b":
            lr_s = self.opt_b.step(grads)
            if self.ema_b is not None:
                self.ema_b.update(self.opt_b.step_count - 1)
            lrs = (0.0, lr_s)
        else:
            lr_s = self.opt_a.step(grads)
            if self.ema_a is not None:
                self.ema_a.update(self.opt_a.step_count - 1)
            lrs = (lr_s, 0.0)
        self.step_events += 1
        return lrs

    def _dml_step(self, batch, stats, n) -> tuple[float, float]:
        """Two sub-steps: update a against b's predictions, re-forward, then b."""
        x = Tensor(batch.images)
        rho = self.config.plm.rho
        with Tape() as tape:
            out_a = self.branch_a(x, train=True)
            out_b = self.branch_b(x, train=True)
            ce_a = P.cross_entropy(out_a.logits, batch.labels)
            kl_a = P.kl_loss(T.detach(out_b.logits), out_a.logits, rho)
            total_a = T.add(ce_a, kl_a)
            grads = tape.backward(total_a)
        lr_a = self.opt_a.step(grads)
        if self.ema_a is not None:
            self.ema_a.update(self.opt_a.step_count - 1)
        self.step_events += 1
        with Tape() as tape:
            out_a = self.branch_a(x, train=True)
            out_b = self.branch_b(x, train=True)
            ce_b = P.cross_entropy(out_b.logits, batch.labels)
            kl_b = P.kl_loss(T.detach(out_a.logits), out_b.logits, rho)
            total_b = T.add(ce_b, kl_b)
            grads = tape.backward(total_b)
        lr_b = self.opt_b.step(grads)
        if self.ema_b is not None:
            self.ema_b.update(self.opt_b.step_count - 1)
        self.step_events += 1
        stats.add("ce_a", ce_a.item(), n)
        stats.add("ce_b", ce_b.item(), n)
        kl_mean = 0.5 * (kl_a.item() + kl_b.item())
        stats.add("kl", kl_mean, n)
        stats.add("total", total_a.item() + total_b.item(), n)
        self._last_report = {
            "ce_cnn": ce_a.item(), "ce_trans": ce_b.item(), "kl": kl_mean,
            "total": total_a.item() + total_b.item(),
        }
        return lr_a, lr_b

    def _ema_update(self) -> None:
        if self.ema_a is not None:
            self.ema_a.update(self.opt_a.step_count - 1)
        if self.ema_b is not None:
            self.ema_b.update(self.opt_b.step_count - 1)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PAIRCKPT"
_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    step_events: int
    opt_steps: tuple[int, int]
    sections: dict[str, dict[str, np.ndarray]]


def _write_entry(f, name: str, array: np.ndarray) -> None:
    blob = name.encode("utf-8")
    f.write(struct.pack("<H", len(blob)))
    f.write(blob)
    code = _DTYPE_CODES[np.dtype(array.dtype)]
    f.write(struct.pack("<BB", code, array.ndim))
    for dim in array.shape:
        f.write(struct.pack("<I", dim))
    f.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def _read_entry(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", f.read(2))
    name = f.read(name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", f.read(2))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    dtype = np.dtype(_DTYPES[code])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
    return name, data.reshape(shape).copy()


def save_checkpoint(path: str, trainer: Trainer) -> None:
    """Single little-endian binary file: header, config echo, named tensors."""
    sections: dict[str, dict[str, np.ndarray]] = {
        "params_a": trainer.branch_a.parameter_store().value_dict(),
        "params_b": trainer.branch_b.parameter_store().value_dict(),
        "buffers_a": trainer.branch_a.buffer_store().value_dict(),
        "buffers_b": trainer.branch_b.buffer_store().value_dict(),
        "opt_a": trainer.opt_a.state_arrays(),
        "opt_b": trainer.opt_b.state_arrays(),
        "ema_a": dict(trainer.ema_a.shadow) if trainer.ema_a is not None else {},
        "ema_b": dict(trainer.ema_b.shadow) if trainer.ema_b is not None else {},
    }
    config_blob = run_config_text(trainer.config).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", trainer.epoch))
        f.write(struct.pack("<Q", trainer.step_events))
        f.write(struct.pack("<QQ", trainer.opt_a.step_count, trainer.opt_b.step_count))
        f.write(struct.pack("<I", len(sections)))
        for sec_name, entries in sections.items():
            blob = sec_name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(entries)))
            for name, array in entries.items():
                _write_entry(f, name, array)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<Q", f.read(8))
        config_text = f.read(config_len).decode("utf-8")
        (epoch,) = struct.unpack("<I", f.read(4))
        (step_events,) = struct.unpack("<Q", f.read(8))
        steps_a, steps_b = struct.unpack("<QQ", f.read(16))
        (n_sections,) = struct.unpack("<I", f.read(4))
        sections: dict[str, dict[str, np.ndarray]] = {}
        for _ in range(n_sections):
            (name_len,) = struct.unpack("<H", f.read(2))
            sec_name = f.read(name_len).decode("utf-8")
            (n_entries,) = struct.unpack("<I", f.read(4))
            entries = {}
            for _ in range(n_entries):
                name, array = _read_entry(f)
                entries[name] = array
            sections[sec_name] = entries
    return Checkpoint(
        config_text=config_text,
        epoch=epoch,
        step_events=step_events,
        opt_steps=(steps_a, steps_b),
        sections=sections,
    )


def resume_trainer(config: RunConfig, path: str) -> Trainer:
    """Rebuild a Trainer and restore every piece of mutable state."""
    ckpt = load_checkpoint(path)
    expected = run_config_text(config)
    if ckpt.config_text != expected:
        raise ConfigError(
            f"checkpoint {path} was written by a different configuration; "
            "resume requires an identical config file"
        )
    trainer = Trainer(config)
    trainer.branch_a.parameter_store().load_values(ckpt.sections["params_a"])
    trainer.branch_b.parameter_store().load_values(ckpt.sections["params_b"])
    if ckpt.sections["buffers_a"]:
        trainer.branch_a.buffer_store().load_values(ckpt.sections["buffers_a"])
    if ckpt.sections["buffers_b"]:
        trainer.branch_b.buffer_store().load_values(ckpt.sections["buffers_b"])
    trainer.opt_a.load_state_arrays(ckpt.sections["opt_a"], ckpt.opt_steps[0])
    trainer.opt_b.load_state_arrays(ckpt.sections["opt_b"], ckpt.opt_steps[1])
    if trainer.ema_a is not None and ckpt.sections["ema_a"]:
        trainer.ema_a.load_shadow(ckpt.sections["ema_a"])
    if trainer.ema_b is not None and ckpt.sections["ema_b"]:
        trainer.ema_b.load_shadow(ckpt.sections["ema_b"])
    trainer.epoch = ckpt.epoch
    trainer.step_events = ckpt.step_events
    return trainer


# ---------------------------------------------------------------------------
# run orchestration


def write_metrics_header(f, config: RunConfig) -> None:
    for line in run_config_text(config).splitlines():
        f.write(f"# {line}\n")
    f.write(",".join(CSV_COLUMNS) + "\n")


def read_metrics_csv(path: str) -> list[dict[str, str]]:
    """Rows as column-name dicts; '#' config-echo lines are skipped."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if not line.startswith("#")]
    if not lines:
        return []
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:] if line]


def run_experiment(config: RunConfig, out_dir: str, resume_path: str | None = None,
                   stop_after: int | None = None) -> tuple[list[MetricsRow], str]:
    """Train, stream metrics rows to CSV, save the final checkpoint.

    Returns the new rows and the checkpoint path. Metrics are flushed
    row by row so an aborted run keeps everything completed so far.
    """
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    if resume_path is not None:
        trainer = resume_trainer(config, resume_path)
        mode = "a" if os.path.exists(csv_path) else "w"
    else:
        trainer = Trainer(config)
        mode = "w"
    with open(csv_path, mode, encoding="utf-8") as f:
        if mode == "w":
            write_metrics_header(f, config)

        def on_row(row: MetricsRow) -> None:
            f.write(",".join(row.values()) + "\n")
            f.flush()

        rows = trainer.train(until_epoch=stop_after, on_row=on_row)
    save_checkpoint(ckpt_path, trainer)
    return rows, ckpt_path
