"""Toy dense classifier with manual gradients, plus the fine-tuning drivers.

The model is a stack of dense layers (tanh hidden activations, identity
into a softmax head) over float64 numpy arrays.  Gradients are derived by
hand so the whole training path stays dependency-free and checkable
against finite differences.

Two drivers share the loop skeleton:

* ``finetune_spider`` -- per iteration: forward, backward, fold the
  gradient into the accumulator, build the update mask (importance
  comparison or one of the ablation selection arms), take the SGD step,
  then merge the result with the pretrained snapshot through the mask.
* ``finetune_baseline`` -- plain SGD plus the counterpart family:
  L2/L1 pull-back regularizers, random half-block gating, and post-hoc
  drop-and-rescale on the final delta.

Runs are deterministic: all randomness flows from the config seed.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, DimensionError, StaleCacheError
from .importance import (
    GradAccumulator,
    ImportanceScores,
    accumulate_gradient,
    generalization_importance,
    pid,
    specialization_importance,
)
from .masking import (
    UpdateMask,
    binary_mask,
    dare_mask_and_rescale,
    merge,
    random_half_mask,
    rescale_mask,
    weighted_mask,
)
from .tensors import FlatTensor, TensorMap

ACTIVATIONS = ("tanh", "identity")

SPIDER_METHODS = ("spider", "spider_binary", "spider_weighted_norescale")
BASELINE_METHODS = ("full_ft", "l2_reg", "l1_graft", "half_ft", "dare")

SELECTIONS = ("discrepancy", "random", "magnitude", "gradient")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    weight: FlatTensor  # (out, in)
    bias: FlatTensor  # (out,)
    activation: str

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class Batch:
    inputs: np.ndarray  # (B, d_in)
    labels: np.ndarray  # (B,) int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DimensionError(f"batch inputs must be (B>=1, d), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DimensionError("labels must be one integer per batch row")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ToyModel:
    """Dense classifier; the final layer's logits feed a softmax."""

    layers: list[Layer]
    trainable: dict[str, bool]
    version: int = 0

    def __post_init__(self):
        for k, (lo, hi) in enumerate(zip(self.layers, self.layers[1:])):
            if lo.out_dim != hi.in_dim:
                raise DimensionError(
                    f"layer {k} out_dim {lo.out_dim} != layer {k + 1} in_dim {hi.in_dim}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    def tensors(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def tensor_map(self, trainable_only: bool = False) -> TensorMap:
        """Live views of the model tensors (copy() before mutating the model)."""
        return TensorMap.from_tensors(
            t for t in self.tensors() if not trainable_only or self.trainable[t.name]
        )

    def load_values(self, values: TensorMap) -> None:
        """Write the given tensors' payloads into the model, in place."""
        own = {t.name: t for t in self.tensors()}
        for t in values:
            target = own.get(t.name)
            if target is None or target.shape != t.shape:
                raise AlignmentError(f"load_values: no matching tensor for {t.name!r}")
            np.copyto(target.data, t.data)
        self.version += 1

    def copy(self) -> "ToyModel":
        layers = [
            Layer(layer.weight.copy(), layer.bias.copy(), layer.activation)
            for layer in self.layers
        ]
        return ToyModel(layers, dict(self.trainable), self.version)


def build_model(layer_dims: Sequence[int], seed: int) -> ToyModel:
    """Random init: tanh hidden layers, identity head, all layers trainable."""
    if len(layer_dims) < 2:
        raise DimensionError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers = []
    head = len(layer_dims) - 2
    for k, (d_in, d_out) in enumerate(zip(layer_dims, layer_dims[1:])):
        w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in))
        b = rng.normal(0.0, 0.1, size=d_out)
        layers.append(
            Layer(
                FlatTensor.of(f"layer{k}.weight", w),
                FlatTensor.of(f"layer{k}.bias", b),
                "identity" if k == head else "tanh",
            )
        )
    trainable = {t.name: True for layer in layers for t in (layer.weight, layer.bias)}
    return ToyModel(layers, trainable)


def model_from_tensor_map(tm: TensorMap) -> ToyModel:
    """Rebuild a model from checkpointed tensors named layer{k}.{weight,bias}."""
    pat = re.compile(r"^layer(\d+)\.(weight|bias)$")
    found: dict[int, dict[str, FlatTensor]] = {}
    for t in tm:
        m = pat.match(t.name)
        if not m:
            raise AlignmentError(f"unrecognized tensor name {t.name!r}")
        found.setdefault(int(m.group(1)), {})[m.group(2)] = t.copy()
    layers = []
    for k in range(len(found)):
        if k not in found or set(found[k]) != {"weight", "bias"}:
            raise AlignmentError(f"layer {k} is incomplete in the tensor map")
        pair = found[k]
        if len(pair["weight"].shape) != 2 or len(pair["bias"].shape) != 1:
            raise AlignmentError(f"layer {k} tensors have unexpected ranks")
        act = "identity" if k == len(found) - 1 else "tanh"
        layers.append(Layer(pair["weight"], pair["bias"], act))
    trainable = {t.name: True for layer in layers for t in (layer.weight, layer.bias)}
    return ToyModel(layers, trainable)


def set_trainable_tail(model: ToyModel, layer_count: int) -> None:
    """Mark the last `layer_count` layers trainable, freeze the rest."""
    if not 1 <= layer_count <= len(model.layers):
        raise ConfigError(
            f"trainable layer count {layer_count} out of range for "
            f"{len(model.layers)}-layer model"
        )
    first = len(model.layers) - layer_count
    for k, layer in enumerate(model.layers):
        model.trainable[layer.weight.name] = k >= first
        model.trainable[layer.bias.name] = k >= first


# ---------------------------------------------------------------------------
# Forward / backward / step
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    model: ToyModel
    version: int
    batch: Batch
    layer_inputs: list[np.ndarray]  # input to layer k (post-activation of k-1)
    probs: np.ndarray


def forward(model: ToyModel, batch: Batch) -> tuple[float, ForwardCache]:
    """Mean softmax cross-entropy over the batch, plus the backward cache."""
    if batch.inputs.shape[1] != model.input_dim:
        raise DimensionError(
            f"batch width {batch.inputs.shape[1]} != model input dim {model.input_dim}"
        )
    if np.any(batch.labels < 0) or np.any(batch.labels >= model.class_count):
        raise DimensionError("label out of range for model head")

    a = batch.inputs
    layer_inputs = []
    for layer in model.layers:
        layer_inputs.append(a)
        z = a @ layer.weight.view().T + layer.bias.data
        a = np.tanh(z) if layer.activation == "tanh" else z

    logits = a
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(batch))
    loss = float(np.mean(lse - shifted[rows, batch.labels]))
    probs = np.exp(shifted - lse[:, None])
    return loss, ForwardCache(model, model.version, batch, layer_inputs, probs)


def backward(model: ToyModel, cache: ForwardCache) -> TensorMap:
    """Gradients of the mean loss for the trainable tensors only."""
    if cache.model is not model or cache.version != model.version:
        raise StaleCacheError("cache does not match the model's current weights")

    n = len(cache.batch)
    dz = cache.probs.copy()
    dz[np.arange(n), cache.batch.labels] -= 1.0
    dz /= n

    grads: dict[str, np.ndarray] = {}
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        a_in = cache.layer_inputs[k]
        grads[layer.weight.name] = dz.T @ a_in
        grads[layer.bias.name] = dz.sum(axis=0)
        if k > 0:
            da = dz @ layer.weight.view()
            below = model.layers[k - 1]
            dz = da * (1.0 - a_in**2) if below.activation == "tanh" else da

    out = TensorMap()
    for t in model.tensors():
        if model.trainable[t.name]:
            out.add(t.with_data(grads[t.name].reshape(-1)))
    return out


def sgd_step(
    model: ToyModel,
    grads: TensorMap,
    lr: float,
    lr_overrides: dict[str, float] | None = None,
) -> ToyModel:
    """w <- w - lr * grad on the trainable tensors, in place."""
    trainables = model.tensor_map(trainable_only=True)
    trainables.require_aligned(grads, "sgd_step")
    for t, g in zip(trainables, grads):
        rate = lr_overrides.get(t.name, lr) if lr_overrides else lr
        t.data -= rate * g.data
    model.version += 1
    return model


# ---------------------------------------------------------------------------
# Fine-tuning drivers
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.12
    epochs: int = 5
    batch_size: int = 16
    method: str = "spider"
    l2_lambda: float = 1e-3
    l1_lambda: float = 1e-6
    dare_drop_p: float = 0.5
    beta: float = 0.9
    seed: int = 0
    trainable_layer_count: int = 2
    normalization_scope: str = "per_tensor"
    accumulator_reset_per_epoch: bool = False
    selection: str = "discrepancy"
    selection_gamma: float = 0.5
    lr_overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must be in [0, 1)")
        if not 0.0 <= self.dare_drop_p < 1.0:
            raise ConfigError("dare_drop_p must be in [0, 1)")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"unknown selection {self.selection!r}")
        if not 0.0 < self.selection_gamma <= 1.0:
            raise ConfigError("selection_gamma must be in (0, 1]")


@dataclass
class RunLog:
    """Per-iteration trace of one fine-tuning run."""

    method: str
    losses: list[float] = field(default_factory=list)
    mask_density: list[float] = field(default_factory=list)
    pid: list[float] = field(default_factory=list)
    persistent_aux_maps: int = 0
    final_accumulator: TensorMap | None = None


def batches_of(inputs: np.ndarray, labels: np.ndarray, batch_size: int) -> list[Batch]:
    """Chunk a dataset into sequential batches (last one may be short)."""
    n = inputs.shape[0]
    return [
        Batch(inputs[i : i + batch_size], labels[i : i + batch_size])
        for i in range(0, n, batch_size)
    ]


def _iteration_seeds(seed: int, count: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(max(count, 1), dtype=np.uint64)


class _AuxMaps:
    """Registry of trainable-sized maps the driver keeps across iterations."""

    def __init__(self, reference: TensorMap):
        self._signature = reference.signature()
        self._held: dict[str, TensorMap] = {}

    def hold(self, name: str, tm: TensorMap) -> TensorMap:
        if tm.signature() != self._signature:
            raise AlignmentError(f"auxiliary map {name!r} is not trainable-sized")
        self._held[name] = tm
        return tm

    @property
    def count(self) -> int:
        return len(self._held)


def _gamma_count(size: int, gamma: float) -> int:
    return int(math.floor(size * gamma))


def _topk_mask(tm: TensorMap, gamma: float, largest: bool) -> UpdateMask:
    """Binary mask on the gamma fraction of entries per tensor, by value."""
    tensors = []
    for t in tm:
        k = _gamma_count(t.size, gamma)
        data = np.zeros(t.size)
        order = np.argsort(t.data, kind="stable")
        idx = order[-k:] if largest else order[:k]
        if k:
            data[idx] = 1.0
        tensors.append(t.with_data(data))
    return UpdateMask(TensorMap.from_tensors(tensors), "binary")


def _random_gamma_mask(tm: TensorMap, gamma: float, rng_seed: int) -> UpdateMask:
    rng = np.random.default_rng(rng_seed)
    tensors = []
    for t in tm:
        k = _gamma_count(t.size, gamma)
        data = np.zeros(t.size)
        if k:
            data[rng.choice(t.size, size=k, replace=False)] = 1.0
        tensors.append(t.with_data(data))
    return UpdateMask(TensorMap.from_tensors(tensors), "binary")


def finetune_spider(
    model: ToyModel,
    pretrained: TensorMap,
    data: Sequence[Batch],
    cfg: TrainConfig,
) -> tuple[ToyModel, RunLog]:
    """Selective fine-tuning: mask-gated merge with the pretrained weights.

    cfg.method picks the mask stage: ``spider`` (weighted + rescaled),
    ``spider_binary`` (hard selection), ``spider_weighted_norescale``.
    With method ``spider_binary``, cfg.selection may swap the importance
    comparison for the random / magnitude / gradient ablation arms.
    """
    if cfg.method not in SPIDER_METHODS:
        raise ConfigError(f"finetune_spider cannot run method {cfg.method!r}")
    if cfg.selection != "discrepancy" and cfg.method != "spider_binary":
        raise ConfigError("selection arms other than discrepancy use spider_binary")

    trainables = model.tensor_map(trainable_only=True)
    trainables.require_aligned(pretrained, "finetune_spider")

    aux = _AuxMaps(pretrained)
    aux.hold("pretrained", pretrained)
    accumulator = GradAccumulator.empty(pretrained, cfg.beta)
    aux.hold("accumulator", accumulator.acc)

    gen_scores: ImportanceScores | None = None
    fixed_selection: UpdateMask | None = None
    if cfg.selection == "discrepancy":
        gen_scores = generalization_importance(pretrained, cfg.normalization_scope)
        aux.hold("generalization_importance", gen_scores.scores)
    elif cfg.selection == "magnitude":
        # smallest pretrained magnitudes = least generalization-critical
        magnitudes = pretrained.map_data(np.abs)
        fixed_selection = _topk_mask(magnitudes, cfg.selection_gamma, largest=False)
        aux.hold("selection_mask", fixed_selection.mask)

    log = RunLog(method=cfg.method)
    seeds = _iteration_seeds(cfg.seed, cfg.epochs * len(data))

    it = 0
    for epoch in range(cfg.epochs):
        if cfg.accumulator_reset_per_epoch and epoch > 0:
            accumulator = GradAccumulator.empty(pretrained, cfg.beta)
            aux.hold("accumulator", accumulator.acc)
        for batch in data:
            loss, cache = forward(model, batch)
            grads = backward(model, cache)
            accumulate_gradient(accumulator, grads)

            if cfg.selection == "discrepancy":
                spec_scores = specialization_importance(accumulator, cfg.normalization_scope)
                if cfg.method == "spider":
                    mask = rescale_mask(
                        weighted_mask(spec_scores, gen_scores), cfg.normalization_scope
                    )
                elif cfg.method == "spider_binary":
                    mask = binary_mask(spec_scores, gen_scores)
                else:  # spider_weighted_norescale
                    mask = weighted_mask(spec_scores, gen_scores)
            elif cfg.selection == "random":
                mask = _random_gamma_mask(pretrained, cfg.selection_gamma, int(seeds[it]))
            elif cfg.selection == "magnitude":
                mask = fixed_selection
            else:  # gradient
                mask = _topk_mask(accumulator.acc, cfg.selection_gamma, largest=True)

            sgd_step(model, grads, cfg.learning_rate, cfg.lr_overrides)
            merged = merge(model.tensor_map(trainable_only=True), pretrained, mask)
            model.load_values(merged)

            log.losses.append(loss)
            log.mask_density.append(mask.density)
            log.pid.append(pid(pretrained, accumulator.acc))
            it += 1

    log.persistent_aux_maps = aux.count
    if accumulator.initialized:
        log.final_accumulator = accumulator.acc
    return model, log


def finetune_baseline(
    model: ToyModel,
    pretrained: TensorMap,
    data: Sequence[Batch],
    cfg: TrainConfig,
) -> tuple[ToyModel, RunLog]:
    """Counterpart fine-tuning methods (full/L2/L1/half-block/drop-rescale).

    An accumulator is maintained for the importance-divergence trace only;
    it never influences the update.
    """
    if cfg.method not in BASELINE_METHODS:
        raise ConfigError(f"finetune_baseline cannot run method {cfg.method!r}")

    trainables = model.tensor_map(trainable_only=True)
    trainables.require_aligned(pretrained, "finetune_baseline")

    accumulator = GradAccumulator.empty(pretrained, cfg.beta)
    log = RunLog(method=cfg.method)
    seeds = _iteration_seeds(cfg.seed, cfg.epochs * len(data) + 1)

    it = 0
    for _epoch in range(cfg.epochs):
        for batch in data:
            loss, cache = forward(model, batch)
            grads = backward(model, cache)

            if cfg.method == "l2_reg" and cfg.l2_lambda != 0.0:
                current = model.tensor_map(trainable_only=True)
                drift = current.zip_data(pretrained, np.subtract, "l2_reg")
                grads = grads.zip_data(
                    drift, lambda g, d: g + 2.0 * cfg.l2_lambda * d, "l2_reg"
                )
                loss += cfg.l2_lambda * float(np.sum(drift.concat() ** 2))
            elif cfg.method == "l1_graft" and cfg.l1_lambda != 0.0:
                current = model.tensor_map(trainable_only=True)
                drift = current.zip_data(pretrained, np.subtract, "l1_graft")
                # subgradient at w == w_pre is 0 (np.sign(0) == 0)
                grads = grads.zip_data(
                    drift, lambda g, d: g + cfg.l1_lambda * np.sign(d), "l1_graft"
                )
                loss += cfg.l1_lambda * float(np.sum(np.abs(drift.concat())))

            if cfg.method == "half_ft":
                gate = random_half_mask(pretrained, int(seeds[it]))
                grads = grads.zip_data(gate.mask, np.multiply, "half_ft")
                log.mask_density.append(gate.density)

            accumulate_gradient(accumulator, grads)
            sgd_step(model, grads, cfg.learning_rate, cfg.lr_overrides)

            log.losses.append(loss)
            log.pid.append(pid(pretrained, accumulator.acc))
            it += 1

    if cfg.method == "dare" and cfg.dare_drop_p != 0.0 and it > 0:
        current = model.tensor_map(trainable_only=True)
        delta = current.zip_data(pretrained, np.subtract, "dare")
        kept = dare_mask_and_rescale(delta, cfg.dare_drop_p, int(seeds[-1]))
        model.load_values(pretrained.zip_data(kept, np.add, "dare"))

    log.persistent_aux_maps = 2  # pretrained snapshot + diagnostic accumulator
    if accumulator.initialized:
        log.final_accumulator = accumulator.acc
    return model, log


def make_train_config(**kwargs) -> TrainConfig:
    return TrainConfig(**kwargs)


def with_method(cfg: TrainConfig, method: str, **overrides) -> TrainConfig:
    return replace(cfg, method=method, **overrides)
