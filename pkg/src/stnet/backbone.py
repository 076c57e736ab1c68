"""3D-DenseNet backbone with embedded STT blocks.

Layout conventions: convolutional features are ``[B, C, D, H, W]``; STT blocks
see the channels-last view ``[B, D, H, W, C]``.

Network wiring::

    stem (3x3x3 conv, 2*k0 channels)
    stage m = stages[m] dense blocks with growth k0 * 2**(m-1);
              each block appends ``layers_per_block`` dense layers to the
              running concatenation and (every ``stt_every`` blocks) refines it
              with a channel-preserving STT block
    between stages: transition (BN, ReLU, 1x1x1 conv, 2x avg-pool) of the
              stage output, concatenated with the stem output and every
              earlier stage output average-pooled to the new resolution
    head: global average pool + linear classifier
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import engine as E
from .engine import Tensor
from .stt import SttConfig, SttParams, init_stt_params, stt_forward


@dataclass
class BackboneConfig:
    stages: Tuple[int, ...] = (4, 6, 8)
    k0: int = 8
    heads: int = 4
    conv_groups: int = 4
    compression_ratio: int = 16
    gate_factor: float = 0.25
    stt_every: int = 1
    num_classes: int = 16
    input_bands: int = 200
    patch: Tuple[int, int] = (11, 11)
    layers_per_block: int = 1
    d_model_cap: int = 64
    pe_init: Tuple[int, int, int] = (8, 16, 16)
    use_stt: bool = True
    stt_zero_init: bool = False
    dropout: float = 0.0
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.patch = tuple(int(p) for p in self.patch)
        self.pe_init = tuple(int(p) for p in self.pe_init)

    @property
    def stem_channels(self) -> int:
        return 2 * self.k0

    def validate(self) -> None:
        """Raise ``ValueError`` listing every violated constraint."""
        problems = []
        if not self.stages or any(s < 1 for s in self.stages):
            problems.append(f"stages must be a non-empty list of positive ints, got {list(self.stages)}")
        for name in ("k0", "heads", "conv_groups", "compression_ratio", "stt_every",
                     "num_classes", "input_bands", "layers_per_block", "d_model_cap"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.gate_factor < 1.0:
            problems.append(f"gate_factor must lie in (0, 1), got {self.gate_factor}")
        if len(self.patch) != 2 or min(self.patch) < 1:
            problems.append(f"patch must be two positive extents, got {self.patch}")
        if not problems:
            g = self.conv_groups
            if self.stem_channels % g:
                problems.append(f"stem channels {self.stem_channels} not divisible by conv_groups={g}")
            for m, k in enumerate(growth_schedule(self), start=1):
                if k % g:
                    problems.append(f"stage {m} growth {k} not divisible by conv_groups={g}")
            if self.use_stt:
                for m, widths in enumerate(channel_plan(self)["stt_channels"], start=1):
                    for c in widths:
                        d = min(self.d_model_cap, c)
                        if d % self.heads:
                            problems.append(f"stage {m}: STT width {d} not divisible by heads={self.heads}")
        if problems:
            raise ValueError("invalid BackboneConfig:\n  " + "\n  ".join(problems))


def growth_schedule(cfg: BackboneConfig) -> List[int]:
    """Per-stage growth rate ``k0 * 2**(m-1)``."""
    if cfg.k0 < 1:
        raise ValueError(f"k0 must be >= 1, got {cfg.k0}")
    return [cfg.k0 * 2 ** m for m in range(len(cfg.stages))]


def channel_plan(cfg: BackboneConfig) -> Dict[str, list]:
    """Integer channel bookkeeping for every concatenation point."""
    growth = growth_schedule(cfg)
    c0 = cfg.stem_channels
    stage_in, stage_out, layer_in, stt_ch = [], [], [], []
    c = c0
    for m, (n_blocks, k) in enumerate(zip(cfg.stages, growth)):
        if m > 0:
            c = stage_out[-1] + c0 + sum(stage_out[:-1])
        stage_in.append(c)
        layers, stts = [], []
        for b in range(1, n_blocks + 1):
            for _ in range(cfg.layers_per_block):
                layers.append(c)
                c += k
            if b % cfg.stt_every == 0:
                stts.append(c)
        layer_in.append(layers)
        stt_ch.append(stts)
        stage_out.append(c)
    return {"stage_in": stage_in, "stage_out": stage_out, "layer_in": layer_in,
            "stt_channels": stt_ch, "head_in": [stage_out[-1]]}


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, c: int, dtype) -> "BatchNorm":
        return cls(Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
                   np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))

    def __call__(self, x: Tensor, training: bool, momentum: float) -> Tensor:
        return E.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, momentum)


@dataclass
class DenseLayer:
    bn1: BatchNorm
    conv1: Tensor  # [4k, C/g, 1, 1, 1]
    bn2: BatchNorm
    conv2: Tensor  # [k, 4k/g, 3, 3, 3]


@dataclass
class DenseBlock:
    layers: List[DenseLayer]
    stt: Optional[SttParams] = None
    stt_cfg: Optional[SttConfig] = None


@dataclass
class Transition:
    bn: BatchNorm
    conv: Tensor  # [C, C, 1, 1, 1]


@dataclass
class Head:
    weight: Tensor  # [C, K]
    bias: Tensor


def _he(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


@dataclass
class Model:
    cfg: BackboneConfig
    stem: Tensor
    stages: List[List[DenseBlock]]
    transitions: List[Transition]
    head: Head
    rng: np.random.Generator = field(repr=False, default_factory=lambda: np.random.default_rng(0))

    # -- parameter access -------------------------------------------------
    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "stem.weight", self.stem
        for m, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks, start=1):
                for l, layer in enumerate(block.layers, start=1):
                    pre = f"stage{m}.block{b}.layer{l}"
                    yield f"{pre}.bn1.gamma", layer.bn1.gamma
                    yield f"{pre}.bn1.beta", layer.bn1.beta
                    yield f"{pre}.conv1.weight", layer.conv1
                    yield f"{pre}.bn2.gamma", layer.bn2.gamma
                    yield f"{pre}.bn2.beta", layer.bn2.beta
                    yield f"{pre}.conv2.weight", layer.conv2
                if block.stt is not None:
                    for name, t in block.stt.named_parameters():
                        yield f"stt.{m}.{b}.{name}", t
            if m - 1 < len(self.transitions):
                tr = self.transitions[m - 1]
                yield f"trans{m}.bn.gamma", tr.bn.gamma
                yield f"trans{m}.bn.beta", tr.bn.beta
                yield f"trans{m}.conv.weight", tr.conv
        yield "head.weight", self.head.weight
        yield "head.bias", self.head.bias

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for m, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks, start=1):
                for l, layer in enumerate(block.layers, start=1):
                    pre = f"stage{m}.block{b}.layer{l}"
                    for tag, bn in (("bn1", layer.bn1), ("bn2", layer.bn2)):
                        yield f"{pre}.{tag}.running_mean", bn.running_mean
                        yield f"{pre}.{tag}.running_var", bn.running_var
            if m - 1 < len(self.transitions):
                bn = self.transitions[m - 1].bn
                yield f"trans{m}.bn.running_mean", bn.running_mean
                yield f"trans{m}.bn.running_var", bn.running_var

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_items(self) -> List[Tuple[str, np.ndarray]]:
        return [(n, t.data) for n, t in self.named_parameters()] + list(self.named_buffers())

    def load_state(self, items: Dict[str, np.ndarray]) -> None:
        expected = dict(self.state_items())
        missing = sorted(set(expected) - set(items))
        if missing:
            raise ValueError(f"state is missing {len(missing)} entries, e.g. {missing[:3]}")
        for name, arr in expected.items():
            src = np.asarray(items[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match model {arr.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    # -- forward ----------------------------------------------------------
    def features(self, x: Tensor, training: bool = False, use_stt: bool = True) -> Tensor:
        cfg = self.cfg
        if x.ndim == 4:
            x = E.reshape(x, (x.shape[0], 1) + x.shape[1:])
        feat = E.conv3d_grouped(x, self.stem, padding=1)
        registry = [feat]
        for m, blocks in enumerate(self.stages):
            if m > 0:
                main = transition(feat, self.transitions[m - 1], training, cfg.bn_momentum)
                stage_in = [main] + fully_dense_connect(registry[:-1], main.shape[2:])
                feat = E.concat(stage_in, axis=1)
            for b, block in enumerate(blocks, start=1):
                feat = dense_block_forward(feat, block, cfg, training, use_stt, self.rng)
            registry.append(feat)
        return feat

    def forward(self, x: Tensor, training: bool = False, use_stt: bool = True) -> Tensor:
        return classify(self.features(x, training, use_stt), self.head)

    __call__ = forward


def dense_layer_forward(x: Tensor, layer: DenseLayer, groups: int, training: bool = False,
                        momentum: float = 0.9) -> Tensor:
    """BN-ReLU-1x1x1 grouped bottleneck, BN-ReLU-3x3x3 grouped conv; returns the k new channels."""
    h = E.relu(layer.bn1(x, training, momentum))
    h = E.conv3d_grouped(h, layer.conv1, groups=groups)
    h = E.relu(layer.bn2(h, training, momentum))
    return E.conv3d_grouped(h, layer.conv2, groups=groups, padding=1)


def apply_stt(x: Tensor, block: DenseBlock, training: bool = False, rng=None) -> Tensor:
    y = stt_forward(E.transpose(x, (0, 2, 3, 4, 1)), block.stt, block.stt_cfg, training, rng)
    return E.transpose(y, (0, 4, 1, 2, 3))


def dense_block_forward(x: Tensor, block: DenseBlock, cfg: BackboneConfig, training: bool = False,
                        use_stt: bool = True, rng=None) -> Tensor:
    feat = x
    for layer in block.layers:
        new = dense_layer_forward(feat, layer, cfg.conv_groups, training, cfg.bn_momentum)
        feat = E.concat([feat, new], axis=1)
    if use_stt and block.stt is not None:
        feat = apply_stt(feat, block, training, rng)
    return feat


def _pool_kernel(extents: Sequence[int]) -> Tuple[int, int, int]:
    return tuple(2 if n >= 2 else 1 for n in extents)


def downsample(x: Tensor) -> Tensor:
    """One 2x average-pool step; axes of extent 1 pass through."""
    k = _pool_kernel(x.shape[2:])
    if k == (1, 1, 1):
        return x
    return E.avg_pool3d(x, k, k)


def halved(extents: Sequence[int]) -> Tuple[int, ...]:
    return tuple(n // 2 if n >= 2 else n for n in extents)


def transition(x: Tensor, tr: Transition, training: bool = False, momentum: float = 0.9) -> Tensor:
    h = E.relu(tr.bn(x, training, momentum))
    return downsample(E.conv3d_grouped(h, tr.conv))


def fully_dense_connect(registry: Sequence[Tensor], target: Sequence[int]) -> List[Tensor]:
    """Average-pool each earlier feature map down to ``target`` extents."""
    target = tuple(target)
    out = []
    for t in registry:
        ext = tuple(t.shape[2:])
        while ext != target:
            nxt = halved(ext)
            if nxt == ext or any(a < b for a, b in zip(nxt, target)):
                raise ValueError(f"cannot pool resolution {tuple(t.shape[2:])} down to {target}")
            t = downsample(t)
            ext = nxt
        out.append(t)
    return out


def classify(x: Tensor, head: Head) -> Tensor:
    """Global average pool over D, H, W then a linear layer; returns ``[B, K]`` logits."""
    pooled = E.mean(x, axis=(2, 3, 4))
    return E.linear(pooled, head.weight, head.bias)


def stt_config_for(cfg: BackboneConfig, channels: int) -> SttConfig:
    return SttConfig(d_model=min(cfg.d_model_cap, channels), heads=cfg.heads, pe_init=cfg.pe_init,
                     compression_ratio=cfg.compression_ratio, gate_factor=cfg.gate_factor,
                     dropout=cfg.dropout)


def build_model(cfg: BackboneConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialise a network from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    g = cfg.conv_groups
    plan = channel_plan(cfg)
    growth = growth_schedule(cfg)
    c0 = cfg.stem_channels
    stem = _he(rng, (c0, 1, 3, 3, 3), 27, dtype)
    stages, transitions = [], []
    for m, (n_blocks, k) in enumerate(zip(cfg.stages, growth)):
        c = plan["stage_in"][m]
        if m > 0:
            prev = plan["stage_out"][m - 1]
            conv = np.eye(prev, dtype=dtype).reshape(prev, prev, 1, 1, 1)
            transitions.append(Transition(BatchNorm.init(prev, dtype), Tensor(conv, requires_grad=True)))
        blocks = []
        for b in range(1, n_blocks + 1):
            layers = []
            for _ in range(cfg.layers_per_block):
                layers.append(DenseLayer(
                    bn1=BatchNorm.init(c, dtype),
                    conv1=_he(rng, (4 * k, c // g, 1, 1, 1), c // g, dtype),
                    bn2=BatchNorm.init(4 * k, dtype),
                    conv2=_he(rng, (k, 4 * k // g, 3, 3, 3), 27 * 4 * k // g, dtype),
                ))
                c += k
            block = DenseBlock(layers)
            if cfg.use_stt and b % cfg.stt_every == 0:
                block.stt_cfg = stt_config_for(cfg, c)
                block.stt = init_stt_params(block.stt_cfg, c, rng, dtype, zero_out=cfg.stt_zero_init)
            blocks.append(block)
        stages.append(blocks)
    c_out = plan["stage_out"][-1]
    head = Head(Tensor(rng.normal(0.0, np.sqrt(1.0 / c_out), size=(c_out, cfg.num_classes)).astype(dtype),
                       requires_grad=True),
                Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True))
    return Model(cfg, stem, stages, transitions, head, rng=np.random.default_rng(rng.integers(2**63)))


# ---------------------------------------------------------------------------
# config text round-trip
# ---------------------------------------------------------------------------

_TUPLE_KEYS = {"stages", "patch", "pe_init"}


def config_to_text(cfg: BackboneConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_KEYS:
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if key in _TUPLE_KEYS or isinstance(default, tuple):
        return tuple(int(p) for p in raw.replace(":", ",").split(",") if p)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_from_mapping(values: Dict[str, str]) -> BackboneConfig:
    known = {f.name: f.default for f in dataclasses.fields(BackboneConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown backbone config key {key!r}")
        kwargs[key] = parse_value(key, raw, known[key])
    return BackboneConfig(**kwargs)
