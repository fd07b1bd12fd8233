"""Alternating training loop: weights by cross-entropy, distortion by
descent on the ERC surrogate.

Each mini-batch runs the same cycle: clean features at every attachment
point, fresh mask / signs / epsilon, ``steps_per_batch`` distortion
updates, the distorted forward, then one SGD step on the weights with the
distortion held constant.  The dropout and dropblock baselines ride the identical
code path with zero distortion steps, which is what makes the
bit-identical equivalence runs possible.

Determinism: one config seed feeds five named Philox substreams
(init, mask, sigma, aux, augment) spawned in fixed order, and the shuffle
permutation is keyed by (seed, epoch) alone.  Separate substreams keep
the mask/sign draws aligned across regularizers that consume different
amounts of auxiliary randomness.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import (
    AugmentConfig,
    BatchIterator,
    Dataset,
    load_cifar10_bin,
    load_mnist,
    normalize_images,
    split_dataset,
    synthetic_blobs,
    synthetic_digits,
)
from .disout import (
    DistortionConfig,
    DistortionState,
    ErcReport,
    approx_grad_conv,
    approx_grad_fc,
    erc_surrogate_conv,
    erc_surrogate_fc,
    exact_grad_conv,
    exact_grad_fc,
    init_distortion,
    ramp_p,
    sample_block_mask,
    sample_element_mask,
    sample_rademacher,
    update_distortion,
)
from .errors import ConfigError, FormatError, NumericError, TrainingDiverged
from .nn import (
    attachment_plans,
    backward,
    build_preset,
    forward,
    init_network,
    sgd_step,
    softmax_crossentropy,
)
from .nn import PRESETS
from .tensor import column_max, dtype_for

REGULARIZERS = ("none", "dropout", "dropblock", "disout-element", "disout-block")
GRAD_MODES = ("exact", "approx")
DATA_SOURCES = ("blobs", "digits", "mnist", "cifar10")
STREAM_NAMES = ("init", "mask", "sigma", "aux", "augment")

CHECKPOINT_MAGIC = b"DLCHKPT1"
_TAG_F32, _TAG_F64, _TAG_U64, _TAG_I64 = 1, 2, 3, 4
_TAG_FOR = {np.dtype(np.float32): _TAG_F32, np.dtype(np.float64): _TAG_F64,
            np.dtype(np.uint64): _TAG_U64, np.dtype(np.int64): _TAG_I64}
_DTYPE_FOR = {tag: dt for dt, tag in _TAG_FOR.items()}


@dataclass
class DataConfig:
    """Which dataset to train on and how much of it."""

    source: str = "blobs"
    n_train: int = 512
    n_val: int = 256
    classes: int = 4
    dims: int = 16
    shape: str = ""
    separation: float = 6.0
    seed: int = 0
    root: str = ""
    mean: str = ""
    std: str = ""

    def validate(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(
                f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("data.n_train and data.n_val must be >= 1")
        if self.source == "blobs":
            if self.classes < 2:
                raise ConfigError(f"data.classes must be >= 2, got {self.classes}")
            if self.dims < 1:
                raise ConfigError(f"data.dims must be >= 1, got {self.dims}")
        if self.seed < 0:
            raise ConfigError(f"data.seed must be >= 0, got {self.seed}")
        if bool(self.mean) != bool(self.std):
            raise ConfigError("data.mean and data.std must be set together")
        return self


@dataclass
class TrainConfig:
    """Everything a training run needs; flat dotted keys in config files."""

    preset: str = "mlp"
    hidden: int = 64
    classes: int = 0
    use_bias: bool = True
    precision: int = 32
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    decay_epochs: str = ""
    decay_factor: float = 5.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    regularizer: str = "none"
    grad_mode: str = "exact"
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    distortion: DistortionConfig = field(default_factory=DistortionConfig)

    def decay_schedule(self):
        if not self.decay_epochs:
            return []
        try:
            return [int(tok) for tok in str(self.decay_epochs).split(",")]
        except ValueError as exc:
            raise ConfigError(
                f"decay_epochs must be comma-separated ints, got "
                f"{self.decay_epochs!r}") from exc

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        schedule = self.decay_schedule()
        if any(b <= a for a, b in zip(schedule, schedule[1:])):
            raise ConfigError(
                f"decay_epochs must be strictly increasing, got {schedule}")
        if self.decay_factor <= 0:
            raise ConfigError(f"decay_factor must be positive, got {self.decay_factor}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(
                f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(
                f"grad_mode must be one of {GRAD_MODES}, got {self.grad_mode!r}")
        self.data.validate()
        self.augment.validate()
        self.distortion.validate()
        return self


@dataclass
class MetricsRecord:
    """One logged training iteration."""

    epoch: int
    iteration: int
    train_loss: float
    train_acc: float
    val_acc: float | None = None
    train_eval_acc: float | None = None
    p_effective: float | None = None
    reports: list = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class TrainResult:
    net: object
    records: list
    final_train_acc: float
    final_val_acc: float
    best_val_acc: float


class RngStreams:
    """Named Philox substreams spawned from one seed in fixed order."""

    def __init__(self, generators: dict):
        for name in STREAM_NAMES:
            setattr(self, name, generators[name])

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        children = np.random.SeedSequence(int(seed)).spawn(len(STREAM_NAMES))
        return cls({name: np.random.Generator(np.random.Philox(child))
                    for name, child in zip(STREAM_NAMES, children)})

    def state_words(self) -> dict:
        """13 raw uint64 words per stream: counter, key, buffer, position
        and pending-value fields of the Philox generator."""
        out = {}
        for name in STREAM_NAMES:
            st = getattr(self, name).bit_generator.state
            words = np.concatenate([
                st["state"]["counter"], st["state"]["key"], st["buffer"],
                np.array([st["buffer_pos"], st["has_uint32"], st["uinteger"]],
                         dtype=np.uint64)])
            out[name] = words
        return out

    def restore_words(self, words: dict):
        for name in STREAM_NAMES:
            w = np.asarray(words[name], dtype=np.uint64)
            if w.shape != (13,):
                raise FormatError(f"rng state for {name!r} must hold 13 words")
            gen = getattr(self, name)
            gen.bit_generator.state = {
                "bit_generator": "Philox",
                "state": {"counter": w[0:4].copy(), "key": w[4:6].copy()},
                "buffer": w[6:10].copy(),
                "buffer_pos": int(w[10]),
                "has_uint32": int(w[11]),
                "uinteger": int(w[12]),
            }


def save_checkpoint(path, net, opt_state, streams=None, meta=None):
    """Write parameters, optimizer velocity, RNG words, and counters.

    Container: magic, little-endian entry count, then per entry a
    length-prefixed name, a dtype tag, rank, dims, and raw values.
    """
    entries = {}
    for key, value in net.params.items():
        entries[f"param/{key}"] = value
    for key, value in opt_state.items():
        entries[f"vel/{key}"] = value
    if streams is not None:
        for name, words in streams.state_words().items():
            entries[f"rng/{name}"] = words
    for key, value in (meta or {}).items():
        entries[f"meta/{key}"] = np.array([value], dtype=np.int64)
    blob = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name in sorted(entries):
        value = np.ascontiguousarray(entries[name])
        tag = _TAG_FOR.get(value.dtype)
        if tag is None:
            raise ValueError(f"unsupported checkpoint dtype {value.dtype}")
        encoded = name.encode("utf-8")
        blob.append(struct.pack("<H", len(encoded)))
        blob.append(encoded)
        blob.append(struct.pack("<BB", tag, value.ndim))
        blob.append(struct.pack(f"<{value.ndim}I", *value.shape))
        blob.append(value.astype(value.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_checkpoint(path) -> dict:
    """Read a checkpoint container back into a {name: array} dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4:
        raise FormatError(f"{path}: truncated checkpoint")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    entries = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, rank = struct.unpack_from("<BB", raw, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            dtype = _DTYPE_FOR.get(tag)
            if dtype is None:
                raise FormatError(f"{path}: unknown dtype tag {tag}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(raw):
                raise FormatError(f"{path}: truncated entry {name!r}")
            entries[name] = np.frombuffer(
                raw, dtype=dtype.newbyteorder("<"), count=int(np.prod(dims, dtype=np.int64)),
                offset=offset).astype(dtype).reshape(dims)
            offset += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return entries


def _parse_floats(text):
    return [float(tok) for tok in str(text).split(",") if tok != ""]


def resolve_datasets(cfg: DataConfig):
    """Build (train, val) datasets from a data config."""
    if cfg.source == "blobs":
        dims = tuple(int(t) for t in cfg.shape.split(",")) if cfg.shape else cfg.dims
        full = synthetic_blobs(cfg.n_train + cfg.n_val, cfg.classes, dims,
                               cfg.seed, cfg.separation)
        parts = split_dataset(full, {"train": cfg.n_train, "val": cfg.n_val})
        return parts["train"], parts["val"]
    if cfg.source == "digits":
        full = synthetic_digits(cfg.n_train + cfg.n_val, cfg.seed)
        parts = split_dataset(full, {"train": cfg.n_train, "val": cfg.n_val})
        return parts["train"], parts["val"]
    if cfg.source == "mnist":
        train = load_mnist(cfg.root or None, "train")
        val = load_mnist(cfg.root or None, "test")
        return (_take(train, cfg.n_train, "train"), _take(val, cfg.n_val, "val"))
    root = cfg.root or os.path.join("data", "cifar10")
    train_paths = [os.path.join(root, f"data_batch_{i}.bin") for i in range(1, 6)]
    train_paths = [p for p in train_paths if os.path.exists(p)]
    if not train_paths:
        raise FileNotFoundError(f"no CIFAR-10 train batches under {root}")
    train = load_cifar10_bin(train_paths, "train")
    val = load_cifar10_bin(os.path.join(root, "test_batch.bin"), "val")
    return _take(train, cfg.n_train, "train"), _take(val, cfg.n_val, "val")


def _take(ds: Dataset, n: int, split: str) -> Dataset:
    n = min(n, len(ds)) if n > 0 else len(ds)
    return Dataset(ds.images[:n], ds.labels[:n], ds.class_count, split)


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for d in cfg.decay_schedule() if epoch >= d)
    return cfg.lr / cfg.decay_factor ** drops


def _mask_kind(regularizer: str) -> str:
    return "block" if regularizer in ("dropblock", "disout-block") else "element"


def _check_block_feasible(cfg: TrainConfig, plans):
    if _mask_kind(cfg.regularizer) != "block":
        return
    for plan in plans:
        if len(plan.feature_shape) != 3:
            raise ConfigError(
                f"block masks need conv-shaped features at layer {plan.layer}, "
                f"got shape {plan.feature_shape}")
        h, w = plan.feature_shape[1], plan.feature_shape[2]
        if cfg.distortion.block_size > min(h, w):
            raise ConfigError(
                f"block_size {cfg.distortion.block_size} exceeds the "
                f"{h}x{w} feature map at layer {plan.layer}")


def _distortion_hook(net, plans, cfg, streams, p_eff, reports_out):
    """Per-layer distortion procedure run inside the training forward.

    Draw order per attachment, in layer order: mask, then sigma, then the
    auxiliary variables of each approximate step.  The inner update loop
    works on the unrescaled f - m*eps; rescaling happens only when the
    state is applied to the network features.
    """
    by_layer = {plan.layer: plan for plan in plans}
    dcfg = cfg.distortion
    distorting = cfg.regularizer.startswith("disout")
    steps = dcfg.steps_per_batch if distorting else 0

    def hook(layer, feats):
        plan = by_layer[layer]
        n = feats.shape[0]
        if _mask_kind(cfg.regularizer) == "block":
            mask = sample_block_mask(feats.shape, p_eff, dcfg.block_size,
                                     streams.mask, feats.dtype)
        else:
            mask = sample_element_mask(feats.shape, p_eff, streams.mask,
                                       feats.dtype)
        sigma = sample_rademacher(n, streams.sigma, feats.dtype)
        eps = init_distortion(feats)
        std = float(feats.std())
        k_next = net.params[plan.weight_key]
        if plan.mode == "fc":
            f_flat = feats.reshape(n, -1)
            m_flat = mask.reshape(n, -1)
            e = eps.reshape(n, -1)
            before = erc_surrogate_fc(k_next, f_flat - m_flat * e, sigma, e,
                                      dcfg.lam)
            for _ in range(steps):
                if cfg.grad_mode == "exact":
                    grad = exact_grad_fc(k_next, f_flat - m_flat * e, sigma,
                                         m_flat, e, dcfg.lam)
                else:
                    u = streams.aux.standard_normal(
                        f_flat.shape[1]).astype(feats.dtype)
                    grad = approx_grad_fc(column_max(k_next), sigma, u,
                                          m_flat, e, dcfg.lam, n)
                e = update_distortion(e, grad, dcfg.gamma, std)
            after = erc_surrogate_fc(k_next, f_flat - m_flat * e, sigma, e,
                                     dcfg.lam)
            eps = e.reshape(feats.shape)
        else:
            e = eps
            before = erc_surrogate_conv(k_next, feats - mask * e, sigma, e,
                                        dcfg.lam, plan.stride, plan.padding)
            for _ in range(steps):
                if cfg.grad_mode == "exact":
                    grad = exact_grad_conv(k_next, feats - mask * e, sigma,
                                           mask, e, dcfg.lam, plan.stride,
                                           plan.padding)
                else:
                    s_prime = sample_rademacher(
                        k_next.shape[2] * k_next.shape[3], streams.aux,
                        feats.dtype).reshape(k_next.shape[2], k_next.shape[3])
                    u = streams.aux.standard_normal(
                        feats.shape[1:]).astype(feats.dtype)
                    grad = approx_grad_conv(k_next, sigma, s_prime, u, mask,
                                            e, dcfg.lam, n, plan.q_area)
                e = update_distortion(e, grad, dcfg.gamma, std)
            after = erc_surrogate_conv(k_next, feats - mask * e, sigma, e,
                                       dcfg.lam, plan.stride, plan.padding)
            eps = e
        reports_out.append(ErcReport(layer, before.total, after.total,
                                     after.sup_term, after.penalty_term))
        return DistortionState(mask=mask, epsilon=eps, sigma=sigma,
                               p_effective=p_eff)

    return hook


def evaluate(net, dataset: Dataset, batch_size: int = 512, transform=None):
    """Clean forward over a dataset; returns (top-1 accuracy, mean loss)."""
    total = len(dataset)
    correct = 0
    loss_sum = 0.0
    for start in range(0, total, batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        if transform is not None:
            x = transform(x)
        logits, _ = forward(net, x, mode="eval")
        loss, _ = softmax_crossentropy(logits, y)
        loss_sum += loss * len(y)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    return correct / total, loss_sum / total


def metrics_csv(records, plan_layers) -> str:
    """Render metrics rows as CSV text (fixed newlines, repr floats)."""
    header = ["epoch", "iter", "train_loss", "train_acc", "val_acc",
              "train_eval_acc", "p_effective"]
    for layer in plan_layers:
        header.append(f"t_before_L{layer}")
        header.append(f"t_after_L{layer}")
    lines = [",".join(header)]
    for rec in records:
        row = [str(rec.epoch), str(rec.iteration), repr(float(rec.train_loss)),
               repr(float(rec.train_acc)),
               "" if rec.val_acc is None else repr(float(rec.val_acc)),
               "" if rec.train_eval_acc is None
               else repr(float(rec.train_eval_acc)),
               "" if rec.p_effective is None else repr(float(rec.p_effective))]
        by_layer = {rep.layer: rep for rep in rec.reports}
        for layer in plan_layers:
            rep = by_layer.get(layer)
            row.append("" if rep is None else repr(float(rep.t_before)))
            row.append("" if rep is None else repr(float(rep.t_after)))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def build_network(cfg: TrainConfig, input_shape, class_count, rng):
    """Materialize the configured preset for a given input geometry."""
    classes = cfg.classes or class_count
    distort = cfg.regularizer != "none"
    layers = build_preset(cfg.preset, distort=distort, hidden=cfg.hidden,
                          classes=classes)
    return init_network(layers, input_shape, rng, dtype_for(cfg.precision),
                        cfg.use_bias)


def normalization_transform(data_cfg: DataConfig):
    """Batch transform for the configured mean/std, or None."""
    if not data_cfg.mean:
        return None
    mean, stdv = _parse_floats(data_cfg.mean), _parse_floats(data_cfg.std)
    return lambda x: normalize_images(x, mean, stdv)


def train(config: TrainConfig, out_dir=None, resume=None,
          checkpoint_every: int = 0) -> TrainResult:
    """Run the full training loop; deterministic for a fixed config.

    When ``out_dir`` is given, metrics.csv is rewritten (flushed) at every
    epoch boundary and checkpoints land in ``out_dir/checkpoints``.
    ``resume`` takes a checkpoint path and continues from the epoch after
    the one it recorded.  Raises TrainingDiverged (carrying the metrics
    collected so far) when a non-finite loss appears.
    """
    cfg = config.validate()
    dtype = dtype_for(cfg.precision)
    train_ds, val_ds = resolve_datasets(cfg.data)
    streams = RngStreams.from_seed(cfg.seed)
    net = build_network(cfg, train_ds.images.shape[1:],
                        train_ds.class_count, streams.init)
    distort = cfg.regularizer != "none"
    plans = attachment_plans(net) if distort else []
    _check_block_feasible(cfg, plans)
    plan_layers = [plan.layer for plan in plans]
    transform = normalization_transform(cfg.data)

    aug = cfg.augment if cfg.augment.active() else None
    iterator = BatchIterator(train_ds, cfg.batch_size, cfg.seed,
                             augment_cfg=aug, augment_rng=streams.augment)
    total_iters = cfg.epochs * iterator.batches_per_epoch
    opt_state = {}
    start_epoch = 0
    global_iter = 0

    if resume is not None:
        entries = load_checkpoint(resume)
        for key in net.params:
            saved = entries.get(f"param/{key}")
            if saved is None or saved.shape != net.params[key].shape:
                raise FormatError(
                    f"checkpoint does not match the configured network "
                    f"(parameter {key})")
            net.params[key] = saved.astype(dtype)
        for name, value in entries.items():
            if name.startswith("vel/"):
                opt_state[name[4:]] = value.astype(dtype)
        streams.restore_words({name: entries[f"rng/{name}"]
                               for name in STREAM_NAMES})
        start_epoch = int(entries["meta/epoch"][0]) + 1
        global_iter = int(entries["meta/iter"][0])

    ckpt_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    records = []
    best_val = 0.0

    def flush():
        if out_dir is not None:
            path = os.path.join(out_dir, "metrics.csv")
            with open(path, "w", newline="") as fh:
                fh.write(metrics_csv(records, plan_layers))

    def checkpoint(epoch):
        if ckpt_dir is None:
            return
        path = os.path.join(ckpt_dir, f"epoch_{epoch:03d}.ckpt")
        save_checkpoint(path, net, opt_state, streams,
                        {"epoch": epoch, "iter": global_iter})

    started = time.perf_counter()
    final_accs = None
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_for_epoch(cfg, epoch)
        for x, y in iterator.epoch(epoch):
            if transform is not None:
                x = transform(x)
            p_eff = ramp_p(global_iter, total_iters, cfg.distortion) \
                if distort else None
            reports = []
            try:
                if plans:
                    hook = _distortion_hook(net, plans, cfg, streams, p_eff,
                                            reports)
                    logits, cache = forward(net, x, distortion=hook,
                                            mode="train")
                else:
                    logits, cache = forward(net, x, mode="train")
                loss, _ = softmax_crossentropy(logits, y)
            except NumericError as exc:
                records.append(MetricsRecord(
                    epoch, global_iter + 1, float("nan"), 0.0,
                    p_effective=p_eff, reports=reports,
                    wall_time=time.perf_counter() - started))
                flush()
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, iteration "
                    f"{global_iter + 1}: {exc}", records) from exc
            train_acc = float((np.argmax(logits, axis=1) == y).mean())
            grads = backward(net, cache, y)
            sgd_step(net.params, grads, opt_state, lr, cfg.momentum,
                     cfg.weight_decay)
            global_iter += 1
            records.append(MetricsRecord(
                epoch, global_iter, float(loss), train_acc,
                p_effective=p_eff, reports=reports,
                wall_time=time.perf_counter() - started))
        val_acc, _ = evaluate(net, val_ds, transform=transform)
        train_eval_acc, _ = evaluate(net, train_ds, transform=transform)
        records[-1].val_acc = val_acc
        records[-1].train_eval_acc = train_eval_acc
        best_val = max(best_val, val_acc)
        final_accs = (train_eval_acc, val_acc)
        flush()
        if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            checkpoint(epoch)

    if ckpt_dir is not None:
        checkpoint(cfg.epochs - 1)
    if final_accs is None:
        final_accs = (evaluate(net, train_ds, transform=transform)[0],
                      evaluate(net, val_ds, transform=transform)[0])
    flush()
    return TrainResult(net, records, final_accs[0], final_accs[1],
                       max(best_val, final_accs[1]))
