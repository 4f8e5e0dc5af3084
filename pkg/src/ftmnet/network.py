"""Residual CNN builder with channel-transform insertion points.

The topology is stem conv -> stages of two-conv residual blocks -> global
average pool -> linear head. A stage listed in ftm_sites gets one
channel transform, placed after the second batch norm of the stage's
last block, before the shortcut addition. Every parameter belongs to
exactly one partition: backbone, ftm, or head.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import BNState, Tensor, add, batch_norm, conv2d, global_avg_pool, linear, relu
from .errors import ConfigError, DimensionError
from .ftm import FTMParams, ftm_apply

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

PART_BACKBONE = "backbone"
PART_FTM = "ftm"
PART_HEAD = "head"


@dataclass(frozen=True)
class NetworkConfig:
    stem_channels: int
    stage_channels: tuple[int, ...]
    blocks_per_stage: tuple[int, ...]
    num_classes: int
    input_channels: int = 3
    ftm_sites: tuple[int, ...] = ()
    image_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        object.__setattr__(self, "ftm_sites", tuple(self.ftm_sites))

    def validate(self) -> None:
        if len(self.stage_channels) != len(self.blocks_per_stage) or not self.stage_channels:
            raise ConfigError("stage_channels and blocks_per_stage must be equal-length and non-empty")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigError("stage extents must all be >= 1")
        if self.stem_channels < 1 or self.input_channels < 1 or self.image_size < 1:
            raise ConfigError("stem_channels, input_channels, image_size must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        bad = [s for s in self.ftm_sites if not 0 <= s < len(self.stage_channels)]
        if bad:
            raise ConfigError(f"ftm_sites {bad} outside stage range 0..{len(self.stage_channels) - 1}")
        if len(set(self.ftm_sites)) != len(self.ftm_sites):
            raise ConfigError("ftm_sites must be unique")


def desk_config(num_classes: int = 8, ftm: bool = True, image_size: int = 32) -> NetworkConfig:
    """Laptop-scale default: ~175K parameters, 3 stages."""
    return NetworkConfig(
        stem_channels=16,
        stage_channels=(16, 32, 64),
        blocks_per_stage=(2, 2, 2),
        num_classes=num_classes,
        ftm_sites=(2,) if ftm else (),
        image_size=image_size,
    )


def resnet34_config(num_classes: int = 45, ftm: bool = True, image_size: int = 224) -> NetworkConfig:
    """Full-scale topology: 4 stages, ~21M parameters, transform in the last stage."""
    return NetworkConfig(
        stem_channels=64,
        stage_channels=(64, 128, 256, 512),
        blocks_per_stage=(3, 4, 6, 3),
        num_classes=num_classes,
        ftm_sites=(3,) if ftm else (),
        image_size=image_size,
    )


@dataclass
class ModelState:
    """Named parameter/buffer registry plus the trainability partition."""

    config: NetworkConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    partition: dict[str, str]
    meta: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            params={k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            partition=dict(self.partition),
            meta=dict(self.meta),
        )

    def set_trainable(self, partitions: set[str]) -> None:
        for name, t in self.params.items():
            t.requires_grad = self.partition[name] in partitions

    def param_count(self, part: str | None = None) -> int:
        return sum(
            t.size for name, t in self.params.items() if part is None or self.partition[name] == part
        )


def _block_specs(config: NetworkConfig):
    """Yield (stage, block, in_ch, out_ch, stride, has_down, has_ftm) in build order."""
    in_ch = config.stem_channels
    for si, (out_ch, blocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
        for bi in range(blocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            cin = in_ch if bi == 0 else out_ch
            has_down = stride != 1 or cin != out_ch
            has_ftm = si in config.ftm_sites and bi == blocks - 1
            yield si, bi, cin, out_ch, stride, has_down, has_ftm
        in_ch = out_ch


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int) -> Tensor:
    # fan-in scaled normal, the usual choice ahead of relu
    std = np.sqrt(2.0 / (cin * k * k))
    w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)
    return Tensor(w, requires_grad=True)


def _add_bn(params, buffers, partition, prefix: str, channels: int) -> None:
    params[f"{prefix}.gamma"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
    params[f"{prefix}.beta"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
    buffers[f"{prefix}.mean"] = np.zeros(channels, dtype=np.float32)
    buffers[f"{prefix}.var"] = np.ones(channels, dtype=np.float32)
    partition[f"{prefix}.gamma"] = PART_BACKBONE
    partition[f"{prefix}.beta"] = PART_BACKBONE


def _head_init(rng: np.random.Generator, num_classes: int, dim: int) -> tuple[Tensor, Tensor]:
    w = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim)).astype(np.float32)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)


def build_model(config: NetworkConfig, seed: int) -> ModelState:
    """Construct a deterministic fresh model for the given seed.

    Identity-initialized channel transforms draw nothing from the RNG, so
    configs differing only in ftm_sites produce bit-identical backbones
    and heads for the same seed.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    partition: dict[str, str] = {}

    params["stem.conv.w"] = _conv_init(rng, config.stem_channels, config.input_channels, 3)
    partition["stem.conv.w"] = PART_BACKBONE
    _add_bn(params, buffers, partition, "stem.bn", config.stem_channels)

    for si, bi, cin, cout, stride, has_down, has_ftm in _block_specs(config):
        p = f"s{si}.b{bi}"
        params[f"{p}.conv1.w"] = _conv_init(rng, cout, cin, 3)
        partition[f"{p}.conv1.w"] = PART_BACKBONE
        _add_bn(params, buffers, partition, f"{p}.bn1", cout)
        params[f"{p}.conv2.w"] = _conv_init(rng, cout, cout, 3)
        partition[f"{p}.conv2.w"] = PART_BACKBONE
        _add_bn(params, buffers, partition, f"{p}.bn2", cout)
        if has_down:
            params[f"{p}.down.conv.w"] = _conv_init(rng, cout, cin, 1)
            partition[f"{p}.down.conv.w"] = PART_BACKBONE
            _add_bn(params, buffers, partition, f"{p}.down.bn", cout)
        if has_ftm:
            params[f"s{si}.ftm.gamma"] = Tensor(np.ones(cout, dtype=np.float32), requires_grad=True)
            params[f"s{si}.ftm.beta"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
            partition[f"s{si}.ftm.gamma"] = PART_FTM
            partition[f"s{si}.ftm.beta"] = PART_FTM

    head_w, head_b = _head_init(rng, config.num_classes, config.stage_channels[-1])
    params["head.w"] = head_w
    params["head.b"] = head_b
    partition["head.w"] = PART_HEAD
    partition["head.b"] = PART_HEAD

    # input standardization; identity until a training run installs stats
    buffers["norm.mean"] = np.zeros(config.input_channels, dtype=np.float32)
    buffers["norm.std"] = np.ones(config.input_channels, dtype=np.float32)

    return ModelState(config=config, params=params, buffers=buffers, partition=partition)


def _bn(model: ModelState, prefix: str) -> BNState:
    return BNState.wrap(
        model.params[f"{prefix}.gamma"],
        model.params[f"{prefix}.beta"],
        model.buffers[f"{prefix}.mean"],
        model.buffers[f"{prefix}.var"],
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )


def forward_model(model: ModelState, batch, mode: str = "eval") -> Tensor:
    """Run the network; returns pre-softmax logits [N, num_classes].

    mode selects batch-norm behavior ("train" normalizes by batch
    statistics and updates the running buffers). Recording happens on
    whatever tape the caller has open.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    train = mode == "train"
    cfg = model.config
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    n, c, h, w = batch.shape
    if c != cfg.input_channels or h != cfg.image_size or w != cfg.image_size:
        raise DimensionError(
            f"batch {batch.shape} does not match model input "
            f"[N,{cfg.input_channels},{cfg.image_size},{cfg.image_size}]"
        )

    mean = model.buffers["norm.mean"].astype(batch.dtype)
    std = model.buffers["norm.std"].astype(batch.dtype)
    x = Tensor((batch.data - mean[None, :, None, None]) / std[None, :, None, None])

    x = relu(batch_norm(conv2d(x, model.params["stem.conv.w"], stride=1, pad=1), _bn(model, "stem.bn"), train))

    for si, bi, cin, cout, stride, has_down, has_ftm in _block_specs(cfg):
        p = f"s{si}.b{bi}"
        h1 = relu(batch_norm(conv2d(x, model.params[f"{p}.conv1.w"], stride=stride, pad=1), _bn(model, f"{p}.bn1"), train))
        h2 = batch_norm(conv2d(h1, model.params[f"{p}.conv2.w"], stride=1, pad=1), _bn(model, f"{p}.bn2"), train)
        if has_ftm:
            site = FTMParams(
                gamma=model.params[f"s{si}.ftm.gamma"],
                beta=model.params[f"s{si}.ftm.beta"],
                layer_id=f"s{si}",
            )
            h2 = ftm_apply(h2, site)
        if has_down:
            sc = batch_norm(
                conv2d(x, model.params[f"{p}.down.conv.w"], stride=stride, pad=0),
                _bn(model, f"{p}.down.bn"),
                train,
            )
        else:
            sc = x
        x = relu(add(h2, sc))

    pooled = global_avg_pool(x)
    return linear(pooled, model.params["head.w"], model.params["head.b"])


def partition_params(model: ModelState) -> dict[str, set[str]]:
    """Split parameter names into the three disjoint trainability classes."""
    out: dict[str, set[str]] = {PART_BACKBONE: set(), PART_FTM: set(), PART_HEAD: set()}
    for name in model.params:
        out[model.partition[name]].add(name)
    return out


def reinit_head(model: ModelState, num_classes: int, seed: int) -> ModelState:
    """Fresh classifier head for a new class count; everything else copied bit-exact."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    out = model.copy()
    out.config = replace(model.config, num_classes=num_classes)
    rng = np.random.default_rng(seed)
    head_w, head_b = _head_init(rng, num_classes, model.config.stage_channels[-1])
    out.params["head.w"] = head_w
    out.params["head.b"] = head_b
    return out


def partition_checksum(model: ModelState, part: str) -> str:
    """SHA-256 over the partition's parameter names and raw bytes, in name order."""
    digest = hashlib.sha256()
    for name in sorted(model.params):
        if model.partition[name] == part:
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return digest.hexdigest()


def buffer_checksum(model: ModelState, prefix: str = "") -> str:
    """SHA-256 over buffers whose name starts with prefix."""
    digest = hashlib.sha256()
    for name in sorted(model.buffers):
        if name.startswith(prefix):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(model.buffers[name]).tobytes())
    return digest.hexdigest()
