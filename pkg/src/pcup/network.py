"""The upsampling network: multi-scale local features, global features,
concatenation, two x2 feature reshapings, and coordinate regression from an
n x 6 input patch to an (up_ratio*n) x 6 output.

All MLP chains are "shared": the same affine map applies independently to
every row. Activation is relu after every layer except the final layer of
each chain (pre-pool feature layers and the output regression stay linear).
Inputs are assumed patch-normalized (centroid at the origin, unit max
radius); grouping radii are expressed in that frame.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import PointCloud, unit_normals
from .container import read_arrays, write_arrays
from .geometry import ball_query

INPUT_WIDTH = 6
GLOBAL_WIDTHS = (32, 64, 64, 128, 256, 512)
LOCAL_WIDTHS = (32, 64, 128)
LOCAL_OUT = 128
TRUNK_WIDTHS = (512, 256, 128)
OUTPUT_WIDTH = 6

# layer spec: (path, fan_in, fan_out, relu_after)
LayerSpec = tuple[str, int, int, bool]


@dataclass(frozen=True)
class NetConfig:
    up_ratio: int = 4
    scales: tuple[tuple[float, int], ...] = ((0.05, 8), (0.1, 16), (0.2, 32), (0.3, 32))
    k: int = 15
    patch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple((float(r), int(s)) for r, s in self.scales))
        u = self.up_ratio
        if u < 2 or (u & (u - 1)) != 0:
            raise ValueError(f"up_ratio must be a power of 2 >= 2, got {u}")
        if TRUNK_WIDTHS[-1] % u != 0:
            raise ValueError(f"feature width {TRUNK_WIDTHS[-1]} not divisible by up_ratio {u}")
        if not self.scales:
            raise ValueError("need at least one grouping scale")
        for radius, samples in self.scales:
            if radius <= 0 or samples < 1:
                raise ValueError(f"bad scale ({radius}, {samples})")
        if self.k < 1 or self.patch_size < 1:
            raise ValueError("k and patch_size must be positive")

    @property
    def reshape_stages(self) -> int:
        return int(self.up_ratio).bit_length() - 1


def _chain(prefix: str, fan_in: int, widths: tuple[int, ...], last_relu: bool) -> list[LayerSpec]:
    specs = []
    for i, width in enumerate(widths):
        relu = last_relu or i < len(widths) - 1
        specs.append((f"{prefix}.{i}", fan_in, width, relu))
        fan_in = width
    return specs


def layer_plan(config: NetConfig) -> dict[str, list[LayerSpec]]:
    """Every layer in the network, grouped by chain, in forward order."""
    plan: dict[str, list[LayerSpec]] = {}
    for si in range(len(config.scales)):
        plan[f"local.{si}"] = _chain(f"local.{si}", INPUT_WIDTH + 3, LOCAL_WIDTHS, last_relu=False)
    plan["local.project"] = [
        ("local.project", LOCAL_WIDTHS[-1] * len(config.scales), LOCAL_OUT, True)
    ]
    plan["global"] = _chain("global", INPUT_WIDTH, GLOBAL_WIDTHS, last_relu=False)
    concat_width = INPUT_WIDTH + LOCAL_OUT + GLOBAL_WIDTHS[-1]
    plan["trunk"] = _chain("trunk", concat_width, TRUNK_WIDTHS, last_relu=False)
    width = TRUNK_WIDTHS[-1]
    for stage in range(config.reshape_stages):
        width //= 2  # reshape halves the feature width
        last = stage == config.reshape_stages - 1
        out = OUTPUT_WIDTH if last else width // 2
        plan[f"up.{stage}"] = _chain(f"up.{stage}", width, (width, out), last_relu=False)
        width = out
    return plan


class NetworkParams:
    """All MLP weights and biases keyed by layer path.

    The dimension chain is validated at construction, so a forward pass can
    never hit a shape mismatch.
    """

    def __init__(self, config: NetConfig, layers: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.config = config
        self.layers: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        expected = [spec for chain in layer_plan(config).values() for spec in chain]
        missing = [path for path, *_ in expected if path not in layers]
        if missing:
            raise ValueError(f"missing layers: {missing}")
        extra = set(layers) - {path for path, *_ in expected}
        if extra:
            raise ValueError(f"unexpected layers: {sorted(extra)}")
        for path, fan_in, fan_out, _ in expected:
            w, b = layers[path]
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if w.shape != (fan_in, fan_out):
                raise ValueError(
                    f"layer {path}: weight shape {w.shape} != ({fan_in}, {fan_out})"
                )
            if b.shape != (fan_out,):
                raise ValueError(f"layer {path}: bias shape {b.shape} != ({fan_out},)")
            self.layers[path] = (w, b)

    def flat_arrays(self) -> dict[str, np.ndarray]:
        """name -> array view used for checkpoints and optimizer state."""
        out: dict[str, np.ndarray] = {}
        for path, (w, b) in self.layers.items():
            out[f"{path}.W"] = w
            out[f"{path}.b"] = b.reshape(1, -1)
        return out

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in self.layers.values())

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.config, {p: (w.copy(), b.copy()) for p, (w, b) in self.layers.items()}
        )


def init_params(config: NetConfig, rng_seed: int) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(rng_seed)
    layers = {}
    for chain in layer_plan(config).values():
        for path, fan_in, fan_out, _ in chain:
            bound = 1.0 / np.sqrt(fan_in)
            layers[path] = (
                rng.uniform(-bound, bound, (fan_in, fan_out)),
                np.zeros(fan_out),
            )
    return NetworkParams(config, layers)


# ---------------------------------------------------------------------------
# forward pass

ParamTensors = dict[str, tuple[Tensor, Tensor]]


def bind_params(params: NetworkParams, tape: ad.Tape | None = None) -> ParamTensors:
    """Wrap parameters as tape leaves (training) or constants (inference)."""
    out: ParamTensors = {}
    for path, (w, b) in params.layers.items():
        if tape is None:
            out[path] = (ad.constant(w), ad.constant(b.reshape(1, -1)))
        else:
            out[path] = (tape.leaf(w), tape.leaf(b.reshape(1, -1)))
    return out


def param_grads(pt: ParamTensors) -> dict[str, np.ndarray]:
    """Gradients keyed like :meth:`NetworkParams.flat_arrays`."""
    grads: dict[str, np.ndarray] = {}
    for path, (w, b) in pt.items():
        grads[f"{path}.W"] = w.grad if w.grad is not None else np.zeros_like(w.data)
        grads[f"{path}.b"] = b.grad if b.grad is not None else np.zeros_like(b.data)
    return grads


def _run_chain(h: Tensor, specs: list[LayerSpec], pt: ParamTensors) -> Tensor:
    for path, _, _, relu_after in specs:
        w, b = pt[path]
        h = ad.affine(h, w, b, relu_after=relu_after)
    return h


def global_features(x: Tensor, pt: ParamTensors, config: NetConfig) -> Tensor:
    """Shared MLP chain then column-wise max over all points -> 1 x 512."""
    h = _run_chain(x, layer_plan(config)["global"], pt)
    return ad.max_over_groups(h, np.arange(h.rows).reshape(1, -1))


def local_features(x_values: np.ndarray, pt: ParamTensors, config: NetConfig) -> Tensor:
    """Multi-scale neighborhood features, one row per input point.

    Every point is its own group center. Per neighbor the scale MLP sees
    (neighbor features, neighbor position - center position); groups are
    max-pooled and the per-scale results concatenated, then projected to
    the local feature width.
    """
    plan = layer_plan(config)
    positions = x_values[:, :3]
    n = x_values.shape[0]
    per_scale: list[Tensor] = []
    for si, (radius, samples) in enumerate(config.scales):
        groups = ball_query(positions, positions, radius, samples)
        flat = groups.reshape(-1)
        rel = positions[flat] - np.repeat(positions, samples, axis=0)
        neighbor_input = ad.constant(np.hstack([x_values[flat], rel]))
        h = _run_chain(neighbor_input, plan[f"local.{si}"], pt)
        pool_groups = np.arange(n * samples).reshape(n, samples)
        per_scale.append(ad.max_over_groups(h, pool_groups))
    stacked = per_scale[0] if len(per_scale) == 1 else ad.concat_cols(*per_scale)
    return _run_chain(stacked, plan["local.project"], pt)


def forward(x_values: np.ndarray, pt: ParamTensors, config: NetConfig) -> Tensor:
    """Full upsampling pass: n x 6 -> (up_ratio*n) x 6.

    Output columns 0-2 are positions, 3-5 unnormalized normals.
    """
    x_values = np.asarray(x_values, dtype=np.float64)
    if x_values.ndim != 2 or x_values.shape[1] != INPUT_WIDTH:
        raise ValueError(f"input must be (n, {INPUT_WIDTH}), got {x_values.shape}")
    plan = layer_plan(config)
    n = x_values.shape[0]
    x = ad.constant(x_values)
    x_local = local_features(x_values, pt, config)
    x_global = global_features(x, pt, config)
    x_global_rows = ad.gather_rows(x_global, np.zeros(n, dtype=np.int64))
    h = ad.concat_cols(x, x_local, x_global_rows)
    h = _run_chain(h, plan["trunk"], pt)
    for stage in range(config.reshape_stages):
        h = ad.reshape_rows(h, 2)
        h = _run_chain(h, plan[f"up.{stage}"], pt)
    return h


def predict_normalized(output_values: np.ndarray) -> tuple[PointCloud, int]:
    """Split a raw (4n, 6) output into a cloud with unit normals.

    Returns the cloud and the count of degenerate zero-length normals that
    were replaced by the +z fallback.
    """
    output_values = np.asarray(output_values, dtype=np.float64)
    normals, zero_count = unit_normals(output_values[:, 3:6])
    return PointCloud(output_values[:, :3].copy(), normals), zero_count


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: NetworkParams) -> None:
    meta = {"kind": "checkpoint", "config": asdict(params.config)}
    write_arrays(path, meta, params.flat_arrays())


def _config_from_meta(meta_config: dict) -> NetConfig:
    meta_config = dict(meta_config)
    meta_config["scales"] = tuple(tuple(s) for s in meta_config["scales"])
    return NetConfig(**meta_config)


def load_checkpoint(path: str | Path) -> NetworkParams:
    meta, arrays = read_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a network checkpoint")
    config = _config_from_meta(meta["config"])
    layers: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, arr in arrays.items():
        if name.endswith(".W"):
            layers.setdefault(name[:-2], [None, None])[0] = arr
        elif name.endswith(".b"):
            layers.setdefault(name[:-2], [None, None])[1] = arr.reshape(-1)
        else:
            raise ValueError(f"{path}: unexpected entry {name!r}")
    for path_name, (w, b) in layers.items():
        if w is None or b is None:
            raise ValueError(f"{path}: layer {path_name} incomplete")
    return NetworkParams(config, {p: (w, b) for p, (w, b) in layers.items()})
