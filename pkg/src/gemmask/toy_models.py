"""Self-contained differentiable toy models with exact hand-written backprop.

Two architectures: a plain MLP, and a single attention block ("attn1")
whose query/key/value/output projections are named ``q_proj`` /
``k_proj`` / ``v_proj`` / ``o_proj``, with only the query and value
projections tunable by default. Synthetic tasks are regenerable exactly
from their seed, and gradients come from analytic backpropagation of the
scalar mean loss (validated against central finite differences in the
test suite).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fnmatch import fnmatch
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import scoring
from .mask_engine import AdamWHyper, AdamWState, MaskSet, adamw_step_, full_mask_set, sgd_step_
from .model_store import GradientSnapshot, LayerTensor, ModelSnapshot
from .scoring import DEFAULT_EPS

MODEL_KINDS = ("mlp", "attn1")
ACTIVATIONS = ("tanh", "relu")
LOSSES = ("cross_entropy", "mse")
TASK_KINDS = ("two_gaussians_classification", "teacher_student_regression")

_HEAD_SALT = 0x5EAD
_CLASS_SEPARATION = 2.0
# Two-Gaussians inputs carry a block of high-variance nuisance dimensions
# that is silent in the base task (shift == 0) and activates under a
# distribution shift, standing in for the novel-domain features a
# fine-tuning corpus introduces; the class direction always lives in the
# remaining informative dimensions.
_NUISANCE_FRACTION = 0.25
_NUISANCE_SCALE = 12.0


class ModelError(ValueError):
    """Invalid model or task specification, or incompatible batch."""


@dataclass(frozen=True)
class ToyModelSpec:
    """Architecture description; ``dims`` is [d_in, hidden..., d_out] for
    the MLP and [d_model, d_out] for attn1."""

    kind: str
    dims: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0
    loss: str = "cross_entropy"
    bias: bool = True
    n_tokens: int = 4
    tunable_patterns: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.tunable_patterns is not None:
            object.__setattr__(self, "tunable_patterns", tuple(self.tunable_patterns))
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ModelError(f"unknown loss {self.loss!r}")
        if any(d < 1 for d in self.dims):
            raise ModelError(f"dims must be positive, got {self.dims}")
        if self.kind == "mlp" and len(self.dims) < 2:
            raise ModelError("mlp needs at least [d_in, d_out] dims")
        if self.kind == "attn1":
            if len(self.dims) != 2:
                raise ModelError("attn1 dims must be [d_model, d_out]")
            if self.n_tokens < 1:
                raise ModelError("attn1 needs at least one token")
        if self.loss == "cross_entropy" and self.dims[-1] < 2:
            raise ModelError("cross_entropy needs at least 2 output classes")

    @property
    def default_patterns(self) -> tuple[str, ...]:
        if self.tunable_patterns is not None:
            return self.tunable_patterns
        return ("q_proj", "v_proj") if self.kind == "attn1" else ("*",)


@dataclass(frozen=True)
class SyntheticTask:
    """Seeded synthetic data generator; ``shift`` rotates/perturbs the
    generating process to stand in for a distribution-shifted target task."""

    kind: str
    n_train: int = 256
    n_eval: int = 256
    noise: float = 0.5
    seed: int = 0
    shift: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ModelError(f"unknown task kind {self.kind!r}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ModelError("need at least one train and one eval sample")
        if self.noise < 0.0:
            raise ModelError("noise must be nonnegative")


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray


class ToyModel:
    """Architecture constants plus pure functions over snapshots.

    Snapshots hold the parameters; the model object owns only what is
    derivable from the spec (layer layout, tunability flags, the frozen
    readout head of attn1).
    """

    def __init__(self, spec: ToyModelSpec):
        self.spec = spec
        if spec.kind == "mlp":
            dims = spec.dims
            self._layer_defs: list[tuple[str, tuple[int, ...]]] = []
            for i in range(len(dims) - 1):
                self._layer_defs.append((f"fc{i}.weight", (dims[i], dims[i + 1])))
                if spec.bias:
                    self._layer_defs.append((f"fc{i}.bias", (dims[i + 1],)))
            self._head = None
        else:
            d = spec.dims[0]
            self._layer_defs = [(name, (d, d)) for name in ("q_proj", "k_proj", "v_proj", "o_proj")]
            head_rng = np.random.default_rng([spec.seed, _HEAD_SALT])
            self._head = head_rng.standard_normal((d, spec.dims[1])) / math.sqrt(d)
            self._head.flags.writeable = False
        patterns = spec.default_patterns
        self._tunable = tuple(
            any(fnmatch(name, pat) for pat in patterns) for name, _ in self._layer_defs
        )

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self._layer_defs)

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.spec.kind == "mlp":
            return (self.spec.dims[0],)
        return (self.spec.n_tokens, self.spec.dims[0])

    @property
    def n_outputs(self) -> int:
        return self.spec.dims[-1]

    def init_snapshot(self) -> ModelSnapshot:
        """Deterministic initialization from the spec seed.

        Weight magnitudes are drawn from [0.5, 1.5]/sqrt(fan_in) with
        random signs, so an untrained weight is never accidentally tiny:
        after pre-training, near-zero weights are ones training drove
        there, which is the regime where relative-scale scores are
        meaningful. Biases start at zero.
        """
        rng = np.random.default_rng(self.spec.seed)
        layers = []
        for name, shape in self._layer_defs:
            if name.endswith(".bias"):
                values = np.zeros(shape)
            else:
                fan_in = shape[0]
                magnitude = rng.uniform(0.5, 1.5, size=shape) / math.sqrt(fan_in)
                sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
                values = sign * magnitude
            layers.append(LayerTensor(name, shape, values.reshape(-1)))
        return ModelSnapshot(tuple(layers), self._tunable)

    # -- array-level internals (shared by the public API and training) ----

    def params_of(self, snapshot: ModelSnapshot) -> dict[str, np.ndarray]:
        """Shaped read-only views of a snapshot's parameter arrays."""
        params = {}
        for name, shape in self._layer_defs:
            layer = snapshot.layer(name)
            if layer.shape != shape:
                raise ModelError(f"layer {name!r}: snapshot shape {layer.shape} != spec shape {shape}")
            params[name] = layer.values.reshape(shape)
        return params

    def snapshot_of(self, params: dict[str, np.ndarray]) -> ModelSnapshot:
        layers = tuple(
            LayerTensor(name, shape, params[name].reshape(-1)) for name, shape in self._layer_defs
        )
        return ModelSnapshot(layers, self._tunable)

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.spec.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.spec.activation == "tanh":
            return 1.0 - a * a
        return (z > 0.0).astype(np.float64)

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ModelError(f"batch shape {x.shape[1:]} incompatible with input {self.input_shape}")
        return x

    def predict_arrays(self, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
        x = self._check_batch(x)
        if self.spec.kind == "mlp":
            return self._mlp_forward(params, x)[0]
        return self._attn_forward(params, x)[0]

    def _mlp_forward(self, params, x):
        acts = [x]
        pres = []
        a = x
        n_layers = len(self.spec.dims) - 1
        for i in range(n_layers):
            z = a @ params[f"fc{i}.weight"]
            if self.spec.bias:
                z = z + params[f"fc{i}.bias"]
            pres.append(z)
            a = self._act(z) if i < n_layers - 1 else z
            acts.append(a)
        return a, (acts, pres)

    def _attn_forward(self, params, x):
        d = self.spec.dims[0]
        q = x @ params["q_proj"]
        k = x @ params["k_proj"]
        v = x @ params["v_proj"]
        s = q @ k.transpose(0, 2, 1) / math.sqrt(d)
        s_max = s.max(axis=-1, keepdims=True)
        e = np.exp(s - s_max)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = attn @ v
        hidden = self._act(ctx)
        out_tok = hidden @ params["o_proj"]
        pooled = out_tok.mean(axis=1)
        outputs = pooled @ self._head
        return outputs, (q, k, v, attn, ctx, hidden)

    def _loss_grad_outputs(self, outputs: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Scalar mean loss and its gradient w.r.t. the network outputs."""
        n = outputs.shape[0]
        if self.spec.loss == "cross_entropy":
            labels = np.asarray(y)
            if labels.shape != (n,):
                raise ModelError(f"cross_entropy labels must be shape ({n},), got {labels.shape}")
            labels = labels.astype(np.int64)
            m = outputs.max(axis=1, keepdims=True)
            e = np.exp(outputs - m)
            z = e.sum(axis=1, keepdims=True)
            log_probs = outputs - m - np.log(z)
            loss = float(-np.mean(log_probs[np.arange(n), labels]))
            dout = e / z
            dout[np.arange(n), labels] -= 1.0
            dout /= n
            return loss, dout
        targets = np.asarray(y, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets.reshape(n, 1)
        if targets.shape != outputs.shape:
            raise ModelError(f"mse targets shape {targets.shape} != outputs {outputs.shape}")
        diff = outputs - targets
        loss = float(np.mean(diff * diff))
        dout = 2.0 * diff / diff.size
        return loss, dout

    def loss_and_grads_arrays(
        self, params: dict[str, np.ndarray], x: np.ndarray, y
    ) -> tuple[float, dict[str, np.ndarray]]:
        x = self._check_batch(x)
        if self.spec.kind == "mlp":
            outputs, (acts, pres) = self._mlp_forward(params, x)
            loss, dout = self._loss_grad_outputs(outputs, y)
            grads: dict[str, np.ndarray] = {}
            n_layers = len(self.spec.dims) - 1
            for i in reversed(range(n_layers)):
                if i < n_layers - 1:
                    dz = dout * self._act_grad(pres[i], acts[i + 1])
                else:
                    dz = dout
                grads[f"fc{i}.weight"] = acts[i].T @ dz
                if self.spec.bias:
                    grads[f"fc{i}.bias"] = dz.sum(axis=0)
                dout = dz @ params[f"fc{i}.weight"].T
            return loss, grads

        d = self.spec.dims[0]
        m = self.spec.n_tokens
        outputs, (q, k, v, attn, ctx, hidden) = self._attn_forward(params, x)
        loss, dout = self._loss_grad_outputs(outputs, y)
        dpooled = dout @ self._head.T
        dout_tok = np.broadcast_to(dpooled[:, None, :] / m, (x.shape[0], m, d))
        d_wo = np.einsum("bmi,bmo->io", hidden, dout_tok)
        dhidden = dout_tok @ params["o_proj"].T
        dctx = dhidden * self._act_grad(ctx, hidden)
        dattn = np.einsum("bid,bjd->bij", dctx, v)
        dv = np.einsum("bij,bid->bjd", attn, dctx)
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds = ds / math.sqrt(d)
        dq = np.einsum("bij,bjd->bid", ds, k)
        dk = np.einsum("bij,bid->bjd", ds, q)
        grads = {
            "q_proj": np.einsum("bmi,bmd->id", x, dq),
            "k_proj": np.einsum("bmi,bmd->id", x, dk),
            "v_proj": np.einsum("bmi,bmd->id", x, dv),
            "o_proj": d_wo,
        }
        return loss, grads

    # -- public snapshot-level API ----------------------------------------

    def forward(self, snapshot: ModelSnapshot, x: np.ndarray) -> np.ndarray:
        return self.predict_arrays(self.params_of(snapshot), x)

    def loss(self, snapshot: ModelSnapshot, x: np.ndarray, y) -> float:
        outputs = self.forward(snapshot, x)
        return self._loss_grad_outputs(outputs, y)[0]

    def loss_and_grads(self, snapshot: ModelSnapshot, x: np.ndarray, y) -> tuple[float, GradientSnapshot]:
        loss, grads = self.loss_and_grads_arrays(self.params_of(snapshot), x, y)
        layers = tuple(
            LayerTensor(name, shape, grads[name].reshape(-1)) for name, shape in self._layer_defs
        )
        return loss, GradientSnapshot(layers, self._tunable)

    def eval_metric(self, snapshot: ModelSnapshot, x: np.ndarray, y) -> float:
        """Accuracy for classification, mean squared error for regression."""
        outputs = self.forward(snapshot, x)
        if self.spec.loss == "cross_entropy":
            return float(np.mean(outputs.argmax(axis=1) == np.asarray(y)))
        return self._loss_grad_outputs(outputs, y)[0]


def init_model(spec: ToyModelSpec) -> ModelSnapshot:
    """Deterministic parameter snapshot for a spec (same spec, same bits)."""
    return ToyModel(spec).init_snapshot()


def forward_backward(model: ToyModel, snapshot: ModelSnapshot, batch) -> tuple[float, GradientSnapshot]:
    """Scalar mean loss and exact analytic gradients for one batch."""
    x, y = batch
    return model.loss_and_grads(snapshot, x, y)


# --------------------------------------------------------------------------
# Synthetic tasks
# --------------------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v.reshape(-1))


def make_dataset(task: SyntheticTask, model: ToyModel) -> Dataset:
    """Generate the task's train/eval splits for a model's input shape.

    One RNG stream seeded by the task seed drives every draw, so the data
    is regenerable exactly; ``shift`` rotates the class structure (or
    perturbs the teacher) to produce a related-but-shifted task.
    """
    rng = np.random.default_rng(task.seed)
    shape = model.input_shape

    if task.kind == "two_gaussians_classification":
        if model.n_outputs < 2:
            raise ModelError("two_gaussians_classification needs at least 2 model outputs")
        d_last = shape[-1]
        n_nuis = int(d_last * _NUISANCE_FRACTION)
        informative = np.ones(shape)
        if n_nuis:
            informative[..., d_last - n_nuis :] = 0.0
        nuisance_active = _NUISANCE_SCALE if task.shift != 0.0 else 0.0
        scale = np.where(informative > 0, 1.0, nuisance_active)
        u0 = _unit(rng.standard_normal(shape) * informative)
        v_raw = rng.standard_normal(shape) * informative
        v_raw = v_raw - float(np.sum(v_raw * u0)) * u0
        v0 = _unit(v_raw)
        direction = math.cos(task.shift) * u0 + math.sin(task.shift) * v0

        def draw(n):
            labels = rng.integers(0, 2, size=n)
            signs = (2.0 * labels - 1.0).reshape((n,) + (1,) * len(shape))
            x = _CLASS_SEPARATION * signs * direction + task.noise * scale * rng.standard_normal((n,) + shape)
            return x, labels

        x_train, y_train = draw(task.n_train)
        x_eval, y_eval = draw(task.n_eval)
        if model.spec.loss == "mse":
            eye = np.eye(model.n_outputs)
            y_train = eye[y_train]
            y_eval = eye[y_eval]
        return Dataset(x_train, y_train, x_eval, y_eval)

    if model.spec.loss == "cross_entropy":
        raise ModelError("teacher_student_regression requires an mse model")
    d_in = math.prod(shape)
    hidden = 16
    w1 = rng.standard_normal((d_in, hidden)) / math.sqrt(d_in)
    b1 = rng.standard_normal(hidden) * 0.1
    w2 = rng.standard_normal((hidden, model.n_outputs)) / math.sqrt(hidden)
    b2 = rng.standard_normal(model.n_outputs) * 0.1
    if task.shift != 0.0:
        w1 = w1 + task.shift * rng.standard_normal(w1.shape) / math.sqrt(d_in)
        w2 = w2 + task.shift * rng.standard_normal(w2.shape) / math.sqrt(hidden)

    def teacher(x):
        flat = x.reshape(x.shape[0], d_in)
        return np.tanh(flat @ w1 + b1) @ w2 + b2

    x_train = rng.standard_normal((task.n_train,) + shape)
    y_train = teacher(x_train) + task.noise * rng.standard_normal((task.n_train, model.n_outputs))
    x_eval = rng.standard_normal((task.n_eval,) + shape)
    y_eval = teacher(x_eval) + task.noise * rng.standard_normal((task.n_eval, model.n_outputs))
    return Dataset(x_train, y_train, x_eval, y_eval)


# --------------------------------------------------------------------------
# Masked training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adamw"):
            raise ModelError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0.0:
            raise ModelError(f"lr must be positive, got {self.lr}")

    def adamw_hyper(self) -> AdamWHyper:
        return AdamWHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    shuffle_seed: int = 0


@dataclass(frozen=True)
class TrainRecord:
    """Per-epoch metrics of one masked fine-tuning run."""

    epoch: int
    loss: float
    metric: float
    rel_change: float
    loss_red_proxy: float
    captured_share: float


class TrainOutcome(NamedTuple):
    snapshot: ModelSnapshot
    records: list[TrainRecord]


RECORD_COLUMNS = ("epoch", "loss", "metric", "rel_change", "loss_red_proxy", "captured_share")


def write_records_csv(records: Sequence[TrainRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, repr(r.loss), repr(r.metric), repr(r.rel_change),
                             repr(r.loss_red_proxy), repr(r.captured_share)])


def read_records_csv(path: str | Path) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            TrainRecord(
                epoch=int(row["epoch"]),
                loss=float(row["loss"]),
                metric=float(row["metric"]),
                rel_change=float(row["rel_change"]),
                loss_red_proxy=float(row["loss_red_proxy"]),
                captured_share=float(row["captured_share"]),
            )
            for row in reader
        ]


def train_masked(
    model: ToyModel,
    snapshot0: ModelSnapshot,
    task: SyntheticTask,
    mask_set: MaskSet | None,
    config: TrainConfig,
    epochs: int,
    *,
    grads0: GradientSnapshot | None = None,
    dataset: Dataset | None = None,
) -> TrainOutcome:
    """Fine-tune only the masked parameters; everything else stays frozen.

    ``mask_set=None`` trains every tunable parameter. ``grads0`` is the
    gradient snapshot the masks were built from (recomputed as the
    full-batch gradient at ``snapshot0`` when omitted); it anchors the
    relative-weight-change and loss-reduction diagnostics. Frozen
    parameters are bit-identical in the returned snapshot, and the whole
    run is deterministic given the config's shuffle seed.
    """
    ds = dataset if dataset is not None else make_dataset(task, model)
    if mask_set is None:
        mask_set = full_mask_set(snapshot0)
    for m in mask_set.masks:
        layer = snapshot0.layer(m.layer_name)
        if not snapshot0.is_tunable(m.layer_name):
            raise ModelError(f"mask layer {m.layer_name!r} is not tunable in this model")
        if math.prod(m.shape) != layer.size:
            raise ModelError(f"mask layer {m.layer_name!r}: shape {m.shape} != layer {layer.shape}")

    if grads0 is None:
        grads0 = model.loss_and_grads(snapshot0, ds.x_train, ds.y_train)[1]
    eps = mask_set.provenance.get("eps") or DEFAULT_EPS
    scores0 = [
        scoring.compute_gwr(layer, grads0.layer(layer.name), eps)
        for layer in snapshot0.tunable_layers()
    ]
    share = scoring.captured_share(scores0, mask_set)

    params = model.params_of(snapshot0)
    active = {m.layer_name: m.indices.astype(np.int64) for m in mask_set.masks if m.count > 0}
    for name in active:
        params[name] = params[name].copy()
    opt = config.optimizer
    states = (
        {name: AdamWState.zeros(params[name].size) for name in active}
        if opt.kind == "adamw"
        else None
    )
    hyper = opt.adamw_hyper()

    def current_snapshot() -> ModelSnapshot:
        return model.snapshot_of(params)

    n = ds.x_train.shape[0]
    rng = np.random.default_rng(config.shuffle_seed)
    records: list[TrainRecord] = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            sel = perm[start : start + config.batch_size]
            loss, grads = model.loss_and_grads_arrays(params, ds.x_train[sel], ds.y_train[sel])
            loss_sum += loss * sel.size
            for name, idx in active.items():
                flat = params[name].reshape(-1)
                gflat = grads[name].reshape(-1)
                if opt.kind == "sgd":
                    sgd_step_(flat, gflat, idx, opt.lr)
                else:
                    adamw_step_(flat, gflat, idx, states[name], hyper)
        snap_t = current_snapshot()
        records.append(
            TrainRecord(
                epoch=epoch,
                loss=loss_sum / n,
                metric=model.eval_metric(snap_t, ds.x_eval, ds.y_eval),
                rel_change=scoring.total_relative_weight_change(snapshot0, snap_t, mask_set, eps),
                loss_red_proxy=scoring.total_loss_reduction_proxy(grads0, snapshot0, snap_t, mask_set),
                captured_share=share,
            )
        )
    return TrainOutcome(current_snapshot(), records)
