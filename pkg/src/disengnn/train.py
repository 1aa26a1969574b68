"""Training loop, model selection and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes  b"DGNNCKPT"
    version      u32
    header_len   u64
    header       header_len bytes of UTF-8 JSON (sorted keys)
    payload      raw row-major tensor bytes, offsets listed in header["tensors"]
    crc32        u32 over every preceding byte

The header carries the model config, vocabulary, tensor manifest
(name, shape, dtype, offset, nbytes), optimizer scalars, epoch and the best
validation MRR@20.  Adam moments are stored as tensors ``adam.m/<name>`` and
``adam.v/<name>``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PreparedDataset, make_batches
from .evaluation import evaluate_model
from .model import ModelConfig, ModelParams, forward, init_params, param_shapes
from .optim import AdamState, adam_step, make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"DGNNCKPT"
FORMAT_VERSION = 1


class CheckpointIntegrityError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 100
    base_lr: float = 0.005
    lr_decay: float = 0.1
    decay_every: int = 3
    l2: float = 1e-5
    seed: int = 0
    patience: int = 5
    checkpoint_dir: str | None = None
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        if self.base_lr <= 0 or self.lr_decay <= 0 or self.l2 < 0:
            raise ValueError("learning rate and decay must be positive, l2 non-negative")
        if self.patience < 1 or self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size, decay_every and patience must be >= 1")
        return self


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: list[str]
    params: ModelParams
    optimizer: AdamState
    epoch: int
    best_valid_mrr: float
    trainer: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]


# -- checkpoint I/O -----------------------------------------------------

_OPT_SCALARS = ("base_lr", "decay_rate", "decay_every", "beta1", "beta2", "epsilon", "l2_weight", "step")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in ckpt.params.items()]
    for name in ckpt.params.names():
        if name in ckpt.optimizer.m:
            arrays.append((f"adam.m/{name}", ckpt.optimizer.m[name]))
            arrays.append((f"adam.v/{name}", ckpt.optimizer.v[name]))
    manifest = []
    payload = bytearray()
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str,
                         "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "vocab": list(ckpt.vocab),
        "tensors": manifest,
        "optimizer": {k: getattr(ckpt.optimizer, k) for k in _OPT_SCALARS},
        "epoch": int(ckpt.epoch),
        "best_valid_mrr": float(ckpt.best_valid_mrr),
        "trainer": ckpt.trainer,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 16 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic bytes)")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointIntegrityError("checkpoint checksum mismatch (truncated or corrupt)")
    start = len(MAGIC) + 12
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint header: {exc}") from None
    payload = blob[start + hlen:-4]

    config = ModelConfig.from_dict(header["model_config"])
    vocab = header["vocab"]
    expected = param_shapes(config, len(vocab))
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointIntegrityError(f"tensor {entry['name']!r} runs past the payload")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
    params = OrderedDict()
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"checkpoint lacks parameter {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise ValueError(f"parameter {name!r} has shape {tensors[name].shape}, config implies {shape}")
        params[name] = Tensor(tensors[name].copy(), requires_grad=True, dtype=tensors[name].dtype)
    opt = AdamState(**header["optimizer"])
    for name in expected:
        if f"adam.m/{name}" in tensors:
            opt.m[name] = tensors[f"adam.m/{name}"].copy()
            opt.v[name] = tensors[f"adam.v/{name}"].copy()
    return Checkpoint(config, vocab, ModelParams(params), opt, header["epoch"], header["best_valid_mrr"],
                      header.get("trainer", {}))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def _copy_optimizer(opt: AdamState) -> AdamState:
    out = AdamState(**{k: getattr(opt, k) for k in _OPT_SCALARS})
    out.m = {k: v.copy() for k, v in opt.m.items()}
    out.v = {k: v.copy() for k, v in opt.v.items()}
    return out


def _snapshot(config, vocab, params: ModelParams, opt: AdamState, epoch: int, best_mrr: float,
              trainer: dict) -> Checkpoint:
    return Checkpoint(config, list(vocab), params.copy(), _copy_optimizer(opt), epoch, best_mrr, dict(trainer))


# -- training -----------------------------------------------------------

def train(
    config: ModelConfig,
    tcfg: TrainConfig,
    dataset: PreparedDataset,
    resume: Checkpoint | None = None,
    resume_best: Checkpoint | None = None,
    log_path=None,
) -> TrainResult:
    """Seeded training with per-epoch validation and best-MRR@20 selection.

    Every random draw comes from ``make_rng(seed, stream, epoch)``, so a run
    resumed from the checkpoint written after epoch ``e`` replays epochs
    ``e+1, ...`` exactly.
    """
    config.validate()
    tcfg.validate()
    dtype = np.dtype(tcfg.dtype).type
    ckpt_dir = Path(tcfg.checkpoint_dir) if tcfg.checkpoint_dir else None
    if ckpt_dir is not None:
        try:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            probe = ckpt_dir / ".write_probe"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise OSError(f"checkpoint directory {ckpt_dir} is not writable: {exc}") from None
    if not dataset.train_pairs:
        raise ValueError("dataset has no training pairs")

    n_items = dataset.n_items
    if resume is not None:
        if resume.vocab != dataset.vocab:
            raise ValueError("resume checkpoint vocabulary does not match the dataset")
        params = resume.params.copy()
        opt = _copy_optimizer(resume.optimizer)
        start = resume.epoch + 1
        best_mrr = resume.best_valid_mrr
        best_epoch = resume.trainer.get("best_epoch", resume.epoch)
        bad = resume.trainer.get("bad_epochs", 0)
        best = resume_best if resume_best is not None else resume
    else:
        params = init_params(config, n_items, make_rng(tcfg.seed, "init"), dtype=dtype)
        opt = AdamState(base_lr=tcfg.base_lr, decay_rate=tcfg.lr_decay, decay_every=tcfg.decay_every,
                        l2_weight=tcfg.l2)
        start, best_mrr, best_epoch, bad, best = 0, -1.0, -1, 0, None

    decay = params.decay_flags()
    history: list[dict] = []
    last = resume
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start, tcfg.epochs):
            t0 = time.perf_counter()
            lr = opt.lr(epoch)
            batches = make_batches(dataset.train_pairs, tcfg.batch_size, n_items,
                                   make_rng(tcfg.seed, "shuffle", epoch), shuffle=True)
            drop_rng = make_rng(tcfg.seed, "dropout", epoch)
            tot = ce = dec = 0.0
            seen = 0
            for bi, batch in enumerate(batches):
                params.zero_grad()
                seqs = [row[:n].tolist() for row, n in zip(batch.sequences, batch.lengths)]
                out = forward(config, params, seqs, batch.labels, training=True, rng=drop_rng)
                loss_val = float(out.loss.data)
                if not math.isfinite(loss_val):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {bi}")
                out.loss.backward()
                adam_step(opt, params.tensors, params.grads(), epoch, decay=decay)
                n = len(batch)
                tot += loss_val * n
                ce += float(out.loss_c.data) * n
                dec += float(out.loss_dec.data) * n
                seen += n

            if dataset.valid_pairs:
                rep = evaluate_model(config, params, dataset.valid_pairs, k=20)
                vp, vm = rep.precision, rep.mrr
            else:
                vp = vm = float("nan")
            # ties keep the earlier epoch; without a validation split every epoch counts as best
            improved = math.isnan(vm) or vm > best_mrr
            if improved:
                best_epoch, bad = epoch, 0
                if not math.isnan(vm):
                    best_mrr = vm
            else:
                bad += 1
            trainer = {"best_epoch": best_epoch, "bad_epochs": bad, "seed": tcfg.seed}
            last = _snapshot(config, dataset.vocab, params, opt, epoch, best_mrr, trainer)
            if improved:
                best = last
            record = {
                "epoch": epoch, "lr": lr, "train_loss": tot / seen, "ce_loss": ce / seen,
                "dec_loss": dec / seen, "valid_P@20": vp, "valid_MRR@20": vm,
                "best_valid_MRR@20": best_mrr, "wall_time": round(time.perf_counter() - t0, 4),
            }
            history.append(record)
            log.info("epoch %d lr=%.2e loss=%.4f dec=%.4f valid P@20=%.4f MRR@20=%.4f",
                     epoch, lr, record["train_loss"], record["dec_loss"], vp, vm)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if ckpt_dir is not None:
                save_checkpoint(last, ckpt_dir / "last.ckpt")
                if improved:
                    save_checkpoint(best, ckpt_dir / "best.ckpt")
            if bad >= tcfg.patience:
                log.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    if best is None:
        raise ValueError("no epochs were run (resume epoch beyond the epoch limit?)")
    return TrainResult(best, last, history)

