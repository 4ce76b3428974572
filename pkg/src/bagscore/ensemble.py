"""Seeded MLP ensembles trained with backpropagation and Adam.

Member ``i`` of an ensemble uses seed ``R = seed_base + i`` (``i`` from 1)
both for its weight initialization and for its own 70/30 train/validation
split, drawn from independent PCG64 streams derived from ``R``.

Several members can be trained in lockstep: all arrays carry a leading
member axis and every numerical operation acts on each member slice on its
own, so a member's parameters do not depend on which other members share the
stack. ``train_network`` is the one-member case of the same code path.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import PredictionSet
from .data import Dataset, Scaler, split_indices
from .errors import InvalidInputError, ModelFormatError, TrainingDivergedError

ACTIVATIONS = ("linear", "tanh")

# PRNG stream tags derived from a member seed.
INIT_STREAM = 1
VAL_SPLIT_STREAM = 2
SHUFFLE_STREAM = 3


def tanh_activation(x):
    """Hyperbolic tangent, ``2 / (1 + exp(-2x)) - 1``, saturating without overflow."""
    return np.tanh(x)


def _tanh_grad_from_output(t):
    return 1.0 - t * t


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = (20, 20, 20)
    activations: tuple[str, ...] = ("linear", "tanh", "linear")
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise InvalidInputError("layer widths must be positive")
        if len(self.activations) != len(self.hidden_widths):
            raise InvalidInputError(
                f"{len(self.activations)} activations for {len(self.hidden_widths)} hidden layers"
            )
        unknown = set(self.activations) - set(ACTIVATIONS)
        if unknown:
            raise InvalidInputError(f"unknown activation(s) {sorted(unknown)}")
        if self.output_dim != 1:
            raise InvalidInputError("only scalar outputs are supported")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        s = self.layer_sizes
        return [(s[i], s[i + 1]) for i in range(len(s) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        d["activations"] = list(self.activations)
        return d


@dataclass(frozen=True)
class NetworkParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int = 0

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b.reshape(-1))
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec: MlpSpec, theta: np.ndarray, seed: int = 0) -> "NetworkParams":
        weights, biases = [], []
        off = 0
        for a, b in spec.shapes:
            weights.append(theta[off : off + a * b].reshape(a, b).copy())
            off += a * b
            biases.append(theta[off : off + b].copy())
            off += b
        return cls(tuple(weights), tuple(biases), seed)

    def check(self, spec: MlpSpec) -> None:
        if len(self.weights) != len(spec.shapes) or len(self.biases) != len(spec.shapes):
            raise InvalidInputError("parameter count does not match the spec")
        for (a, b), w, bias in zip(spec.shapes, self.weights, self.biases):
            if w.shape != (a, b) or bias.shape != (b,):
                raise InvalidInputError(f"parameter shape {w.shape}/{bias.shape} != ({a}, {b})")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(bias))):
                raise InvalidInputError("parameters contain non-finite values")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 32
    val_fraction: float = 0.3
    patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise InvalidInputError("epochs and batch_size must be positive, patience >= 0")
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.val_fraction < 1:
            raise InvalidInputError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


@dataclass
class EnsembleModel:
    spec: MlpSpec
    members: list[NetworkParams]
    feature_scaler: Scaler
    target_scaler: Scaler
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise InvalidInputError("an ensemble needs at least one member")
        if np.any(self.feature_scaler.scale <= 0) or np.any(self.target_scaler.scale <= 0):
            raise InvalidInputError("scaler scales must be positive")
        for m in self.members:
            m.check(self.spec)

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(m.seed for m in self.members)

    def stacked(self) -> np.ndarray:
        return np.stack([m.flat() for m in self.members])

    def predict(self, features) -> np.ndarray:
        """Member predictions in target units, shape ``(n_rows, n_members)``."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise InvalidInputError(
                f"expected {self.spec.input_dim} features per row, got shape {x.shape}"
            )
        z = self.feature_scaler.apply(x)
        theta = self.stacked()
        batch = np.ascontiguousarray(np.broadcast_to(z, (len(theta), *z.shape)))
        out = _forward_stack(self.spec, theta, batch)[0]
        return self.target_scaler.invert(out.T)


# Stacked numerics. theta has shape (M, P); inputs have shape (M, B, d).


def _views(spec: MlpSpec, theta: np.ndarray):
    off, layers = 0, []
    m = theta.shape[0]
    for a, b in spec.shapes:
        w = theta[:, off : off + a * b].reshape(m, a, b)
        off += a * b
        layers.append((w, theta[:, off : off + b]))
        off += b
    return layers


def _forward_stack(spec: MlpSpec, theta: np.ndarray, x: np.ndarray):
    """Return (outputs of shape (M, B), per-layer activations for backprop)."""
    acts = [x]
    h = x
    layers = _views(spec, theta)
    for i, (w, b) in enumerate(layers):
        h = np.matmul(h, w) + b[:, None, :]
        if i < len(spec.activations) and spec.activations[i] == "tanh":
            h = tanh_activation(h)
        acts.append(h)
    return h[:, :, 0], acts


def _loss_and_grad_stack(spec: MlpSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Per-member MSE and its gradient w.r.t. theta."""
    out, acts = _forward_stack(spec, theta, x)
    resid = out - y
    n = y.shape[1]
    loss = np.mean(resid * resid, axis=1)
    delta = (2.0 / n) * resid[:, :, None]
    layers = _views(spec, theta)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(spec.activations) and spec.activations[i] == "tanh":
            delta = delta * _tanh_grad_from_output(acts[i + 1])
        gw = np.matmul(acts[i].transpose(0, 2, 1), delta)
        gb = np.matmul(np.ones((delta.shape[0], 1, n)), delta)[:, 0, :]
        grads.append((gw, gb))
        if i > 0:
            delta = np.matmul(delta, w.transpose(0, 2, 1))
    m = theta.shape[0]
    flat = []
    for gw, gb in reversed(grads):
        flat.append(gw.reshape(m, -1))
        flat.append(gb)
    return loss, np.concatenate(flat, axis=1)


# Single-network API


def init_network(spec: MlpSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases, from PCG64 seeded with (seed, INIT_STREAM)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), INIT_STREAM])))
    weights, biases = [], []
    for a, b in spec.shapes:
        limit = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-limit, limit, size=(a, b)))
        biases.append(np.zeros(b))
    return NetworkParams(tuple(weights), tuple(biases), int(seed))


def _check_inputs(spec: MlpSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise InvalidInputError(f"expected {spec.input_dim} features, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("inputs contain non-finite values")
    return x


def forward(params: NetworkParams, spec: MlpSpec, x):
    """Network output for one feature vector (float) or a batch of rows (array)."""
    rows = _check_inputs(spec, x)
    out, _ = _forward_stack(spec, params.flat()[None, :], rows[None])
    return float(out[0, 0]) if np.ndim(x) == 1 else out[0]


def loss_and_gradient(params: NetworkParams, spec: MlpSpec, x, y) -> tuple[float, NetworkParams]:
    """Mean squared error over the rows and its analytic gradient."""
    rows = _check_inputs(spec, x)
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    loss, grad = _loss_and_grad_stack(spec, params.flat()[None, :], rows[None], y)
    return float(loss[0]), NetworkParams.from_flat(spec, grad[0], params.seed)


def split_train_val(n_rows: int, seed: int, val_fraction: float = 0.3):
    """Disjoint (train, validation) index arrays for one member."""
    return split_indices(n_rows, seed, val_fraction, stream=VAL_SPLIT_STREAM)


@dataclass
class TrainingLog:
    seed: int
    initial_train_loss: float
    final_train_loss: float
    best_val_loss: float
    best_epoch: int
    epochs_run: int


def _train_stack(spec: MlpSpec, seeds: Sequence[int], x: np.ndarray, y: np.ndarray, config: TrainConfig):
    """Train one network per seed in lockstep; returns (params, logs)."""
    # Overflow surfaces as a non-finite loss, reported as divergence.
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_stack_unchecked(spec, seeds, x, y, config)


def _train_stack_unchecked(spec, seeds, x, y, config):
    seeds = [int(s) for s in seeds]
    m = len(seeds)
    n = x.shape[0]
    splits = [split_train_val(n, s, config.val_fraction) for s in seeds]
    tr_idx = np.stack([t for t, _ in splits])
    va_idx = np.stack([v for _, v in splits])
    x_tr, y_tr = x[tr_idx], y[tr_idx]
    x_va, y_va = x[va_idx], y[va_idx]
    n_tr = tr_idx.shape[1]
    rngs = [
        np.random.Generator(np.random.PCG64(np.random.SeedSequence([s, SHUFFLE_STREAM])))
        for s in seeds
    ]

    theta = np.stack([init_network(spec, s).flat() for s in seeds])
    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)

    initial_train, _ = _loss_and_grad_stack(spec, theta, x_tr, y_tr)
    best_val = np.mean((_forward_stack(spec, theta, x_va)[0] - y_va) ** 2, axis=1)
    best_theta = theta.copy()
    best_epoch = np.zeros(m, dtype=int)
    epochs_run = np.zeros(m, dtype=int)
    since = np.zeros(m, dtype=int)

    # Positions (into the original seed list) of members still training.
    active = np.arange(m)
    step = 0
    rows = np.arange(m)[:, None]
    for epoch in range(1, config.epochs + 1):
        perms = np.stack([rngs[j].permutation(n_tr) for j in active])
        ar = rows[: len(active)]
        xa, ya = x_tr[active], y_tr[active]
        for start in range(0, n_tr, config.batch_size):
            cols = perms[:, start : start + config.batch_size]
            loss, grad = _loss_and_grad_stack(spec, theta, xa[ar, cols], ya[ar, cols])
            bad = ~np.isfinite(loss)
            if bad.any():
                j = int(active[np.flatnonzero(bad)[0]])
                raise TrainingDivergedError(epoch, seed=seeds[j], member=j)
            step += 1
            mom = config.beta1 * mom + (1.0 - config.beta1) * grad
            vel = config.beta2 * vel + (1.0 - config.beta2) * (grad * grad)
            m_hat = mom / (1.0 - config.beta1**step)
            v_hat = vel / (1.0 - config.beta2**step)
            theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)

        val = np.mean((_forward_stack(spec, theta, x_va[active])[0] - y_va[active]) ** 2, axis=1)
        if not np.all(np.isfinite(val)):
            j = int(active[np.flatnonzero(~np.isfinite(val))[0]])
            raise TrainingDivergedError(epoch, seed=seeds[j], member=j)
        improved = val < best_val[active]
        for k in np.flatnonzero(improved):
            j = active[k]
            best_val[j] = val[k]
            best_theta[j] = theta[k]
            best_epoch[j] = epoch
        since[active] = np.where(improved, 0, since[active] + 1)
        epochs_run[active] = epoch
        keep = since[active] < config.patience
        if not keep.all():
            active = active[keep]
            theta, mom, vel = theta[keep], mom[keep], vel[keep]
            if active.size == 0:
                break

    final_train, _ = _loss_and_grad_stack(spec, best_theta, x_tr, y_tr)
    params = [NetworkParams.from_flat(spec, best_theta[j], seeds[j]) for j in range(m)]
    logs = [
        TrainingLog(
            seeds[j],
            float(initial_train[j]),
            float(final_train[j]),
            float(best_val[j]),
            int(best_epoch[j]),
            int(epochs_run[j]),
        )
        for j in range(m)
    ]
    return params, logs


def train_network(
    spec: MlpSpec, seed: int, x, y, config: TrainConfig = TrainConfig(), return_log: bool = False
):
    """Fit one network to standardized ``(x, y)`` minimizing MSE.

    The member's own validation split drives early stopping and the weights
    of the best validation epoch are returned.
    """
    x = _check_inputs(spec, x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise InvalidInputError(f"{x.shape[0]} input rows but {y.shape[0]} targets")
    params, logs = _train_stack(spec, [seed], x, y, config)
    return (params[0], logs[0]) if return_log else params[0]


def _train_chunk(args):
    spec, seeds, x, y, config, seed_base = args
    try:
        return _train_stack(spec, seeds, x, y, config)
    except TrainingDivergedError as exc:
        # Report the 1-based member index within the whole ensemble.
        raise TrainingDivergedError(exc.epoch, seed=exc.seed, member=exc.seed - seed_base) from None


def train_ensemble(
    spec: MlpSpec,
    n_c: int,
    data: Dataset,
    config: TrainConfig = TrainConfig(),
    seed_base: int = 0,
    chunk_size: int = 100,
    n_jobs: int = 1,
    return_logs: bool = False,
):
    """Train ``n_c`` members with seeds ``seed_base + 1 ... seed_base + n_c``.

    Inputs and target are z-scored with statistics of ``data``. Members are
    trained ``chunk_size`` at a time, optionally over ``n_jobs`` processes;
    the result does not depend on either setting.
    """
    if n_c < 1:
        raise InvalidInputError(f"ensemble size must be >= 1, got {n_c}")
    if data.input_dim != spec.input_dim:
        raise InvalidInputError(f"data has {data.input_dim} features, spec expects {spec.input_dim}")
    fx, fy = Scaler.fit(data.features), Scaler.fit(data.targets)
    x, y = fx.apply(data.features), fy.apply(data.targets)
    seeds = [seed_base + i for i in range(1, n_c + 1)]
    chunk_size = max(1, int(chunk_size))
    jobs = [(spec, seeds[i : i + chunk_size], x, y, config, seed_base) for i in range(0, n_c, chunk_size)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_train_chunk, jobs))
    else:
        results = [_train_chunk(job) for job in jobs]
    members = [p for params, _ in results for p in params]
    logs = [log for _, chunk_logs in results for log in chunk_logs]
    model = EnsembleModel(spec, members, fx, fy)
    return (model, logs) if return_logs else model


def predict_ensemble(model: EnsembleModel, x) -> PredictionSet:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"expected a single feature vector, got shape {x.shape}")
    return PredictionSet(model.predict(x)[0], source_seeds=model.seeds)


# Serialization
#
# Layout (all integers unsigned little-endian):
#   8 bytes   magic b"BAGSCORE"
#   4 bytes   format version
#   8 bytes   header length L
#   L bytes   UTF-8 JSON header: spec, member seeds, provenance, payload size
#   payload   little-endian float64: feature mean, feature scale, target mean,
#             target scale, then per member and layer the weight matrix
#             (row-major, fan_in x fan_out) followed by the bias vector.

MAGIC = b"BAGSCORE"
FORMAT_VERSION = 1


def save_model(model: EnsembleModel, path: Union[str, Path]) -> None:
    payload = np.concatenate(
        [
            model.feature_scaler.mean,
            model.feature_scaler.scale,
            model.target_scaler.mean,
            model.target_scaler.scale,
            model.stacked().reshape(-1),
        ]
    ).astype("<f8")
    header = {
        "spec": model.spec.to_dict(),
        "seeds": list(model.seeds),
        "provenance": model.provenance,
        "payload_values": int(payload.size),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def load_model(path: Union[str, Path]) -> EnsembleModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ModelFormatError(f"{path}: not a bagscore model file")
    try:
        version, hlen = struct.unpack_from("<IQ", raw, 8)
    except struct.error:
        raise ModelFormatError(f"{path}: truncated header") from None
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: model format version {version}, this build reads version {FORMAT_VERSION}"
        )
    start = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(raw[start : start + hlen].decode())
        spec = MlpSpec(
            input_dim=header["spec"]["input_dim"],
            hidden_widths=tuple(header["spec"]["hidden_widths"]),
            activations=tuple(header["spec"]["activations"]),
            output_dim=header["spec"]["output_dim"],
        )
        seeds = [int(s) for s in header["seeds"]]
        n_values = int(header["payload_values"])
    except (ValueError, KeyError, TypeError, InvalidInputError) as exc:
        raise ModelFormatError(f"{path}: corrupted header ({exc})") from None
    body = raw[start + hlen :]
    d = spec.input_dim
    expected = 2 * d + 2 + len(seeds) * spec.n_params
    if len(body) != 8 * n_values or n_values != expected:
        raise ModelFormatError(
            f"{path}: payload holds {len(body)} bytes, expected {8 * expected}"
        )
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    fx = Scaler(values[:d].copy(), values[d : 2 * d].copy())
    fy = Scaler(values[2 * d : 2 * d + 1].copy(), values[2 * d + 1 : 2 * d + 2].copy())
    theta = values[2 * d + 2 :].reshape(len(seeds), spec.n_params)
    members = [NetworkParams.from_flat(spec, theta[i], seeds[i]) for i in range(len(seeds))]
    try:
        return EnsembleModel(spec, members, fx, fy, provenance=header.get("provenance", {}))
    except InvalidInputError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
