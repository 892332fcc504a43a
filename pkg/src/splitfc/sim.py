"""Round-robin split training with compressed cut-layer traffic.

A small fully-connected model is cut after the device-side rectifier: each
scheduled device runs the front half on its local mini-batch, ships the
(optionally compressed) feature matrix up, receives the corresponding
feature-gradient matrix back, and both sides take a plain SGD step.  Every
transmission is accounted in bits; compressed modes go through the real
encoder, byte packer, and decoder, so the simulated server sees exactly what
the wire carries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import baselines, dropout, quantizer, wire
from .core import make_rng, normalize_per_channel
from .quantizer import CodecConfig

__all__ = [
    "Dataset",
    "SplitModel",
    "TrainingConfig",
    "TraceRow",
    "TrainingTrace",
    "COMPRESSORS",
    "load_idx",
    "synthesize_blobs",
    "partition",
    "init_model",
    "device_forward",
    "server_forward",
    "server_backward",
    "device_backward",
    "evaluate",
    "train",
]

COMPRESSORS = ("lossless", "splitfc", "rand", "deterministic", "tops")

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")

    @property
    def size(self):
        return self.inputs.shape[0]


def _read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX file")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == _IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == _IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"{path}: unrecognized IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != count:
        raise ValueError(f"{path}: payload size does not match header dimensions")
    return body.reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Load a big-endian IDX image/label pair into a flat float dataset."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected a rank-3 image file")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected a rank-1 label file")
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label counts differ")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(inputs=inputs, labels=labels, num_classes=int(labels.max()) + 1)


def synthesize_blobs(num_classes, dims, samples, seed, center_scale=6.0, noise=1.0) -> Dataset:
    """Well-separated Gaussian class blobs (deterministic in ``seed``)."""
    rng = make_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(num_classes, dims))
    labels = rng.permutation(np.arange(samples) % num_classes).astype(np.int64)
    inputs = centers[labels] + rng.normal(0.0, noise, size=(samples, dims))
    return Dataset(inputs=inputs, labels=labels, num_classes=num_classes)


def _partition_label_shard(labels, num_devices, rng):
    """Two single-label shards per device, shard labels distinct."""
    num_shards = 2 * num_devices
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValueError("label sharding needs at least two distinct labels")
    # Shards per label, proportional to count, each label capped at one
    # shard per device so the offset pairing below never pairs a label
    # with itself.
    quota = np.maximum(1, np.rint(counts / labels.size * num_shards).astype(int))
    quota = np.minimum(quota, num_devices)
    while quota.sum() > num_shards:
        quota[int(np.argmax(quota))] -= 1
    while quota.sum() < num_shards:
        room = (quota < num_devices) & (quota < counts)
        if not room.any():
            raise ValueError("not enough data to build label shards")
        grow = int(np.argmax(np.where(room, counts / quota, -1.0)))
        quota[grow] += 1
    shards = []
    label_order = rng.permutation(classes.size)
    for li in label_order:
        members = np.flatnonzero(labels == classes[li])
        members = members[rng.permutation(members.size)]
        shards.extend(np.array_split(members, quota[li]))
    if any(s.size == 0 for s in shards):
        raise ValueError("not enough data to build label shards")
    return [
        np.sort(np.concatenate([shards[k], shards[k + num_devices]]))
        for k in range(num_devices)
    ]


def _partition_dirichlet(labels, num_devices, rng, beta):
    """Each device draws class proportions once; classes split accordingly."""
    classes = np.unique(labels)
    props = rng.dirichlet(np.full(classes.size, float(beta)), size=num_devices)
    buckets = [[] for _ in range(num_devices)]
    for ci, cls in enumerate(classes):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        weights = props[:, ci] / props[:, ci].sum()
        cuts = np.floor(np.cumsum(weights) * members.size).astype(int)
        start = 0
        for k in range(num_devices):
            end = members.size if k == num_devices - 1 else cuts[k]
            buckets[k].append(members[start:end])
            start = end
    parts = [np.sort(np.concatenate(b)) for b in buckets]
    if any(p.size == 0 for p in parts):
        raise ValueError("dirichlet split left a device without data; raise beta or reduce devices")
    return parts


def partition(dataset: Dataset, num_devices, mode, rng, beta=0.5):
    """Split sample indices across devices: iid | label-shard | dirichlet."""
    if num_devices < 1 or num_devices > dataset.size:
        raise ValueError("device count out of range for dataset size")
    if mode == "iid":
        perm = rng.permutation(dataset.size)
        return [np.sort(p) for p in np.array_split(perm, num_devices)]
    if mode == "label-shard":
        return _partition_label_shard(dataset.labels, num_devices, rng)
    if mode == "dirichlet":
        return _partition_dirichlet(dataset.labels, num_devices, rng, beta)
    raise ValueError(f"unknown partition mode {mode!r}")


@dataclass
class SplitModel:
    """Device-side affine+rectifier, server-side (optional) hidden layer + softmax."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray | None
    b2: np.ndarray | None
    w3: np.ndarray
    b3: np.ndarray

    @property
    def feature_dim(self):
        return self.w1.shape[1]

    @property
    def device_params(self):
        return self.w1.size + self.b1.size

    @property
    def server_params(self):
        hidden = 0 if self.w2 is None else self.w2.size + self.b2.size
        return hidden + self.w3.size + self.b3.size


def init_model(rng, input_dim, feature_dim, hidden_dim, num_classes, scale=1.0) -> SplitModel:
    w1 = rng.normal(0.0, np.sqrt(2.0 / input_dim) * scale, size=(input_dim, feature_dim))
    b1 = np.zeros(feature_dim)
    if hidden_dim:
        w2 = rng.normal(0.0, np.sqrt(2.0 / feature_dim) * scale, size=(feature_dim, hidden_dim))
        b2 = np.zeros(hidden_dim)
        top_in = hidden_dim
    else:
        w2 = None
        b2 = None
        top_in = feature_dim
    w3 = rng.normal(0.0, np.sqrt(1.0 / top_in) * scale, size=(top_in, num_classes))
    b3 = np.zeros(num_classes)
    return SplitModel(w1, b1, w2, b2, w3, b3)


def device_forward(model: SplitModel, x):
    z1 = x @ model.w1 + model.b1
    features = np.maximum(z1, 0.0)
    return features, {"x": x, "z1": z1}


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def server_forward(model: SplitModel, features, labels):
    cache = {"features": features, "labels": labels}
    if model.w2 is not None:
        z2 = features @ model.w2 + model.b2
        hidden = np.maximum(z2, 0.0)
        cache["z2"] = z2
        cache["hidden"] = hidden
    else:
        hidden = features
    logits = hidden @ model.w3 + model.b3
    probs = _softmax(logits)
    batch = features.shape[0]
    loss = float(-np.log(probs[np.arange(batch), labels] + 1e-300).mean())
    cache["probs"] = probs
    return loss, cache


def server_backward(model: SplitModel, cache):
    """Server parameter gradients plus the feature-gradient matrix."""
    probs = cache["probs"]
    labels = cache["labels"]
    batch = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch
    grads = {}
    if model.w2 is not None:
        hidden = cache["hidden"]
        grads["w3"] = hidden.T @ dlogits
        grads["b3"] = dlogits.sum(axis=0)
        dhidden = dlogits @ model.w3.T
        dz2 = dhidden * (cache["z2"] > 0)
        grads["w2"] = cache["features"].T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        feature_grad = dz2 @ model.w2.T
    else:
        grads["w3"] = cache["features"].T @ dlogits
        grads["b3"] = dlogits.sum(axis=0)
        feature_grad = dlogits @ model.w3.T
    return grads, feature_grad


def device_backward(model: SplitModel, cache, feature_grad):
    dz1 = feature_grad * (cache["z1"] > 0)
    return {"w1": cache["x"].T @ dz1, "b1": dz1.sum(axis=0)}


def _apply(model: SplitModel, grads, lr):
    for name, grad in grads.items():
        param = getattr(model, name)
        param -= lr * grad


def evaluate(model: SplitModel, dataset: Dataset, chunk=2048) -> float:
    hits = 0
    for start in range(0, dataset.size, chunk):
        x = dataset.inputs[start : start + chunk]
        features, _ = device_forward(model, x)
        if model.w2 is not None:
            features = np.maximum(features @ model.w2 + model.b2, 0.0)
        logits = features @ model.w3 + model.b3
        hits += int((logits.argmax(axis=1) == dataset.labels[start : start + chunk]).sum())
    return hits / dataset.size


@dataclass(frozen=True)
class TrainingConfig:
    dataset: Dataset
    test_set: Dataset | None = None
    compressor: str = "splitfc"
    num_devices: int = 5
    rounds: int = 50
    batch_size: int = 64
    lr: float = 0.1
    reduction_ratio: float = 16.0
    uplink_bits_per_entry: float = 0.4
    downlink_bits_per_entry: float = 0.4
    endpoint_levels: int = 200
    feature_dim: int = 128
    hidden_dim: int = 64
    partition_mode: str = "label-shard"
    dirichlet_beta: float = 0.5
    bias_override: float | None = None
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.compressor not in COMPRESSORS:
            raise ValueError(f"unknown compressor {self.compressor!r}")
        if self.reduction_ratio < 1:
            raise ValueError("reduction ratio must be at least 1")
        if not 64 <= self.feature_dim <= 256:
            raise ValueError("feature width must lie in [64, 256]")


@dataclass(frozen=True)
class TraceRow:
    round: int
    device: int
    loss: float
    uplink_bits: float
    downlink_bits: float
    test_acc: float | None = None


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    param_transfer_bits: float = 0.0
    final_accuracy: float | None = None
    model: SplitModel | None = None

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,k,loss,uplink_bits,downlink_bits,test_acc\n")
            for row in self.rows:
                acc = "" if row.test_acc is None else repr(row.test_acc)
                fh.write(
                    f"{row.round},{row.device},{row.loss!r},"
                    f"{row.uplink_bits!r},{row.downlink_bits!r},{acc}\n"
                )


def _draw_batch(part, batch_size, rng):
    replace = part.size < batch_size
    return rng.choice(part, size=batch_size, replace=replace)


def train(config: TrainingConfig) -> TrainingTrace:
    """Run round-robin split training and account every transmitted bit."""
    rng = make_rng(config.seed)
    data = config.dataset
    model = init_model(
        rng, data.inputs.shape[1], config.feature_dim, config.hidden_dim, data.num_classes
    )
    parts = partition(data, config.num_devices, config.partition_mode, rng, config.dirichlet_beta)

    width = config.feature_dim
    up_cfg = CodecConfig(config.batch_size, width, config.uplink_bits_per_entry,
                         "uplink", config.endpoint_levels)
    down_cfg = CodecConfig(config.batch_size, width, config.downlink_bits_per_entry,
                           "downlink", config.endpoint_levels)
    raw_bits = 32.0 * config.batch_size * width
    target_cols = width / config.reduction_ratio
    keep_count = int(np.ceil(target_cols))

    trace = TrainingTrace()
    step = 0
    for rnd in range(1, config.rounds + 1):
        for dev in range(config.num_devices):
            step += 1
            idx = _draw_batch(parts[dev], config.batch_size, rng)
            x = data.inputs[idx]
            y = data.labels[idx]
            features, dcache = device_forward(model, x)

            mask = None
            plan = None
            sparse_up = None
            if config.compressor == "lossless":
                f_hat = features
                up_report = wire.CommReport(raw_bits, int(raw_bits), "uplink", step, dev)
            elif config.compressor == "tops":
                sparse_up = baselines.topS_sparsify(
                    features, config.batch_size * width * config.uplink_bits_per_entry
                )
                f_hat = sparse_up.dense()
                up_report = wire.CommReport(
                    sparse_up.nominal_bits, int(np.ceil(sparse_up.nominal_bits / 8)) * 8,
                    "uplink", step, dev,
                )
            else:
                stds = normalize_per_channel(features).data.std(axis=0)
                if config.compressor == "splitfc":
                    if config.reduction_ratio == 1:
                        plan = dropout.keep_all_plan(width)
                    else:
                        plan = dropout.compute_probabilities(stds, target_cols, config.bias_override)
                    mask = dropout.sample_mask(plan, rng)
                    kept = dropout.apply_dropout(features, mask, plan)
                elif config.compressor == "rand":
                    plan = baselines.rand_dropout_plan(width, config.reduction_ratio)
                    mask = dropout.sample_mask(plan, rng)
                    kept = dropout.apply_dropout(features, mask, plan)
                else:  # deterministic
                    mask = baselines.deterministic_drop(stds, keep_count)
                    kept = dropout.drop_gradients(features, mask)
                payload = quantizer.fwq_encode(kept, up_cfg, mask=mask)
                blob = wire.pack(payload, up_cfg)
                up_report = wire.build_report(payload, blob, up_cfg, step, dev)
                f_hat = quantizer.fwq_decode(wire.unpack(blob, up_cfg), up_cfg)

            loss, scache = server_forward(model, f_hat, y)
            sgrads, feature_grad = server_backward(model, scache)
            _apply(model, sgrads, config.lr)

            if config.compressor == "lossless":
                grad_full = feature_grad
                down_report = wire.CommReport(raw_bits, int(raw_bits), "downlink", step, dev)
            elif config.compressor == "tops":
                sparse_down = baselines.topS_sparsify(
                    feature_grad,
                    config.batch_size * width * config.downlink_bits_per_entry,
                    support=sparse_up.indices,
                )
                grad_full = sparse_down.dense()
                down_report = wire.CommReport(
                    sparse_down.nominal_bits, int(np.ceil(sparse_down.nominal_bits / 8)) * 8,
                    "downlink", step, dev,
                )
            else:
                kept_grad = dropout.drop_gradients(feature_grad, mask)
                payload = quantizer.fwq_encode(kept_grad, down_cfg)
                blob = wire.pack(payload, down_cfg)
                down_report = wire.build_report(payload, blob, down_cfg, step, dev)
                decoded = quantizer.fwq_decode(wire.unpack(blob, down_cfg), down_cfg, mask=mask)
                if config.compressor == "deterministic":
                    grad_full = decoded
                else:
                    grad_full = dropout.backprop_scale(decoded[:, mask.kept], mask, plan)

            dgrads = device_backward(model, dcache, grad_full)
            _apply(model, dgrads, config.lr)

            acc = None
            if (
                dev == config.num_devices - 1
                and config.test_set is not None
                and rnd % config.eval_every == 0
            ):
                acc = evaluate(model, config.test_set)
            trace.rows.append(TraceRow(rnd, dev, loss, up_report.nominal_bits,
                                       down_report.nominal_bits, acc))
            trace.reports.extend((up_report, down_report))

    # Model hand-off between consecutively scheduled devices: 32-bit weights.
    device_param_bits = 32.0 * (model.w1.size + model.b1.size)
    trace.param_transfer_bits = device_param_bits * config.rounds * config.num_devices
    if config.test_set is not None:
        trace.final_accuracy = evaluate(model, config.test_set)
    trace.model = model
    return trace
