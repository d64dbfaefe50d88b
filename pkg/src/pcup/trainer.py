"""Adam training loop over patch datasets with on-the-fly augmentation.

Every random draw (shuffling, augmentation, downsampling) is derived
statelessly from (rng_seed, purpose tag, epoch, sample), so a fixed seed
gives a bit-reproducible run and training can resume from a saved state on
an epoch boundary without perturbing the trajectory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .cloud import PointCloud
from .container import read_arrays, write_arrays
from .geometry import AugmentConfig, augment, nonuniform_downsample, normalize_patch
from .losses import LossReport, LossWeights, total_loss_t
from .network import (
    NetConfig,
    NetworkParams,
    bind_params,
    forward,
    init_params,
    param_grads,
    save_checkpoint,
    _config_from_meta,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# desk-scale grouping: same radii as the full net, smaller group caps
DESK_SCALES = ((0.05, 8), (0.1, 8), (0.2, 16), (0.3, 16))

HISTORY_HEADER = "epoch,total,cd,point_knn,normal,normal_orth,normal_knn"


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 20
    epochs: int = 500
    k: int = 15
    w_cd: float = 1.0
    w_point_knn: float = 0.1
    w_normal: float = 0.05
    w_normal_orth: float = 1e-4
    w_normal_knn: float = 1e-4
    rng_seed: int = 0
    input_size: int = 128
    up_ratio: int = 4
    checkpoint_interval: int = 50
    aug_rotate: bool = True
    aug_scale_min: float = 0.8
    aug_scale_max: float = 1.2
    aug_shift: float = 0.1
    aug_noise_sigma: float = 0.005

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("learning_rate, batch_size, checkpoint_interval must be positive")
        if self.weight_decay < 0 or self.epochs < 0 or self.k < 1:
            raise ValueError("weight_decay, epochs, k out of range")
        if self.input_size < 1 or self.input_size % self.up_ratio != 0:
            raise ValueError("input_size must be positive and divisible by up_ratio")

    @property
    def target_size(self) -> int:
        return self.input_size * self.up_ratio

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            cd=self.w_cd,
            point_knn=self.w_point_knn,
            normal=self.w_normal,
            normal_orth=self.w_normal_orth,
            normal_knn=self.w_normal_knn,
        )

    def augment_config(self, noise_sigma: float = 0.0) -> AugmentConfig:
        return AugmentConfig(
            rotate=self.aug_rotate,
            scale_range=(self.aug_scale_min, self.aug_scale_max),
            shift_range=self.aug_shift,
            noise_sigma=noise_sigma,
        )

    def net_config(self) -> NetConfig:
        return NetConfig(
            up_ratio=self.up_ratio,
            scales=DESK_SCALES,
            k=self.k,
            patch_size=self.input_size,
        )


_BOOL_STRINGS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_train_config(text: str) -> TrainConfig:
    """Parse the flat key=value config format; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        ftype = fields[key].type
        if ftype == "bool":
            lowered = value.lower()
            if lowered not in _BOOL_STRINGS:
                raise ValueError(f"line {lineno}: bad boolean {value!r}")
            values[key] = _BOOL_STRINGS[lowered]
        elif ftype == "int":
            values[key] = int(value)
        else:
            values[key] = float(value)
    return TrainConfig(**values)


def load_train_config(path: str | Path) -> TrainConfig:
    return parse_train_config(Path(path).read_text())


def format_train_config(config: TrainConfig) -> str:
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, bool):
            lines.append(f"{key}={'true' if value else 'false'}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_adam(params: NetworkParams) -> AdamState:
    flat = params.flat_arrays()
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in flat.items()},
        v={name: np.zeros_like(arr) for name, arr in flat.items()},
        step=0,
    )


def adam_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay multiplies parameters by (1 - lr*wd) before the moment
    update. Mutates params and state in place.
    """
    state.step += 1
    t = state.step
    lr = config.learning_rate
    # bias-corrected update, refactored so sqrt(v_hat)+eps needs one temp:
    # lr * m_hat / (sqrt(v_hat) + eps) == alpha_t * m / (sqrt(v) + eps_t)
    bc2_sqrt = np.sqrt(1.0 - ADAM_BETA2**t)
    alpha_t = lr * bc2_sqrt / (1.0 - ADAM_BETA1**t)
    eps_t = ADAM_EPS * bc2_sqrt
    flat = params.flat_arrays()
    if set(grads) != set(flat):
        raise ValueError("gradient keys do not match parameters")
    for name, arr in flat.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {arr.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in layer {name}")
        if config.weight_decay > 0:
            arr *= 1.0 - lr * config.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        denom = np.sqrt(v)
        denom += eps_t
        np.divide(m, denom, out=denom)
        denom *= alpha_t
        arr -= denom


# ---------------------------------------------------------------------------
# data pipeline


def make_training_pair(
    gt_patch: PointCloud,
    config: TrainConfig,
    rng_seed: int | Sequence[int],
) -> tuple[PointCloud, PointCloud]:
    """Build one (input, target) pair from a ground-truth patch.

    The patch is augmented once (rotation/scale/shift shared by input and
    target), non-uniformly downsampled to the input size, both sides are
    normalized by the target's centroid/scale, and Gaussian noise is added
    to the input positions only (sigma in normalized units).
    """
    if len(gt_patch) != config.target_size:
        raise ValueError(
            f"patch has {len(gt_patch)} points, expected "
            f"input_size*up_ratio = {config.target_size}"
        )
    seed = [rng_seed] if isinstance(rng_seed, int) else list(rng_seed)
    target = augment(gt_patch, seed + [0], config.augment_config(noise_sigma=0.0))
    raw_input = nonuniform_downsample(target, config.input_size, seed + [1])
    target_n, centroid, scale = normalize_patch(target)
    input_pos = (raw_input.positions - centroid) / scale
    if config.aug_noise_sigma > 0:
        rng = np.random.default_rng(seed + [2])
        input_pos = input_pos + rng.normal(0.0, config.aug_noise_sigma, input_pos.shape)
    return PointCloud(input_pos, raw_input.normals.copy()), target_n


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    params: NetworkParams
    adam: AdamState
    next_epoch: int = 0


def _sample_loss(
    sample: PointCloud,
    params: NetworkParams,
    config: TrainConfig,
    seed: list,
) -> tuple[dict[str, np.ndarray], LossReport]:
    """Forward/backward for one training sample; returns grads and report."""
    inp, target = make_training_pair(sample, config, seed)
    tape = ad.Tape()
    pt = bind_params(params, tape)
    out = forward(inp.as_array(), pt, config.net_config())
    pos = ad.slice_cols(out, 0, 3)
    nrm = ad.slice_cols(out, 3, 6)
    total, report = total_loss_t(pos, nrm, target, config.loss_weights(), config.k)
    if not np.isfinite(report.total):
        raise TrainingDiverged(f"non-finite loss {report.total}")
    tape.backward(total)
    return param_grads(pt), report


def _mean_report(reports: list[LossReport]) -> LossReport:
    return LossReport(
        *(float(np.mean([getattr(r, f.name) for r in reports]))
          for f in dataclasses.fields(LossReport))
    )


def _write_history(path, history: list[LossReport]) -> None:
    from .io import _atomic_write_text

    rows = [HISTORY_HEADER]
    for epoch, r in enumerate(history):
        rows.append(
            f"{epoch},{r.total:.9g},{r.cd:.9g},{r.point_knn:.9g},"
            f"{r.normal:.9g},{r.normal_orth:.9g},{r.normal_knn:.9g}"
        )
    _atomic_write_text(path, "\n".join(rows) + "\n")


def train(
    dataset: Sequence[PointCloud],
    config: TrainConfig,
    state: TrainState | None = None,
    checkpoint_path: str | Path | None = None,
    history_path: str | Path | None = None,
) -> tuple[TrainState, list[LossReport]]:
    """Optimize the network on a patch dataset.

    Shuffles per epoch, draws a fresh augmented pair per sample, applies
    one Adam step per batch on the mean of per-sample gradients, and
    records per-epoch mean loss components. Writes a network checkpoint
    every ``checkpoint_interval`` epochs and at the end. On a non-finite
    loss the last finite checkpoint is retained and TrainingDiverged is
    raised.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for i, patch in enumerate(dataset):
        if len(patch) != config.target_size:
            raise ValueError(
                f"dataset[{i}] has {len(patch)} points, expected {config.target_size}"
            )
    if state is None:
        params = init_params(config.net_config(), config.rng_seed)
        state = TrainState(params=params, adam=init_adam(params), next_epoch=0)
    params = state.params
    history: list[LossReport] = []

    def checkpoint(force: bool = False, epoch: int | None = None) -> None:
        if checkpoint_path is None:
            return
        due = force or (epoch is not None and (epoch + 1) % config.checkpoint_interval == 0)
        if not due:
            return
        if all(np.isfinite(a).all() for a in params.flat_arrays().values()):
            save_checkpoint(checkpoint_path, params)

    # On TrainingDiverged the exception propagates and the last finite
    # checkpoint written below stays in place untouched.
    for epoch in range(state.next_epoch, config.epochs):
        order = np.random.default_rng([config.rng_seed, 0, epoch]).permutation(len(dataset))
        epoch_reports: list[LossReport] = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grad_sum: dict[str, np.ndarray] | None = None
            for idx in batch:
                grads, report = _sample_loss(
                    dataset[int(idx)], params, config,
                    [config.rng_seed, 1, epoch, int(idx)],
                )
                epoch_reports.append(report)
                if grad_sum is None:
                    grad_sum = grads
                else:
                    for name in grad_sum:
                        grad_sum[name] += grads[name]
            for name in grad_sum:
                grad_sum[name] /= len(batch)
            adam_step(params, grad_sum, state.adam, config)
        history.append(_mean_report(epoch_reports))
        state.next_epoch = epoch + 1
        checkpoint(epoch=epoch)
        if history_path is not None:
            _write_history(history_path, history)
    checkpoint(force=True)
    return state, history


# ---------------------------------------------------------------------------
# resumable state serialization


def save_train_state(path: str | Path, state: TrainState, config: TrainConfig) -> None:
    meta = {
        "kind": "train_state",
        "next_epoch": state.next_epoch,
        "step": state.adam.step,
        "config": asdict(config),
        "net_config": asdict(state.params.config),
    }
    arrays: dict[str, np.ndarray] = {}
    for name, arr in state.params.flat_arrays().items():
        arrays[f"param.{name}"] = arr
    for name, arr in state.adam.m.items():
        arrays[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        arrays[f"adam.v.{name}"] = arr
    write_arrays(path, meta, arrays)


def load_train_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    meta, arrays = read_arrays(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path}: not a train state file")
    config = TrainConfig(**meta["config"])
    net_config = _config_from_meta(meta["net_config"])
    layers: dict[str, list] = {}
    adam = AdamState(step=int(meta["step"]))
    for name, arr in arrays.items():
        if name.startswith("param."):
            flat_name = name[len("param."):]
            layer, kind = flat_name.rsplit(".", 1)
            entry = layers.setdefault(layer, [None, None])
            if kind == "W":
                entry[0] = arr
            else:
                entry[1] = arr.reshape(-1)
        elif name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = arr.copy()
        else:
            raise ValueError(f"{path}: unexpected entry {name!r}")
    params = NetworkParams(net_config, {p: (w, b) for p, (w, b) in layers.items()})
    return TrainState(params=params, adam=adam, next_epoch=int(meta["next_epoch"])), config
