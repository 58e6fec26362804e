"""Network building blocks: the shared trunk and the per-task linear heads.

The trunk is a plain stack of strided 3x3 conv stages (conv -> batch norm ->
ReLU) ending in global average pooling, so its output for a batch is always
(N, feature_dim) no matter the spatial input size.  Heads are single fully
connected layers of dims feature_dim x n_classes; keeping them this small is
what forces the trunk to carry features that work for every task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Graph, Parameter, BatchNormNode, SoftmaxCrossEntropyNode, forward
from .rng import substream

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class TrunkConfig:
    """Shape of the shared network.

    ``stages`` lists (out_channels, stride) for each conv stage; the feature
    dimension equals the channel count of the last stage because the trunk
    ends in global average pooling.
    """

    input_size: tuple[int, int, int] = (3, 16, 16)  # (channels, height, width)
    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    use_batchnorm: bool = True
    feature_dim: int | None = None
    kernel_size: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ValueError("trunk needs at least one stage")
        last = self.stages[-1][0]
        if self.feature_dim is None:
            self.feature_dim = last
        elif self.feature_dim != last:
            raise ValueError(
                f"feature_dim {self.feature_dim} must equal last stage channels {last}"
            )

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "stages": [list(s) for s in self.stages],
            "use_batchnorm": self.use_batchnorm,
            "feature_dim": self.feature_dim,
            "kernel_size": self.kernel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrunkConfig":
        return cls(
            input_size=tuple(d["input_size"]),
            stages=tuple(tuple(s) for s in d["stages"]),
            use_batchnorm=bool(d["use_batchnorm"]),
            feature_dim=d.get("feature_dim"),
            kernel_size=int(d.get("kernel_size", 3)),
        )


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    ``mode`` selects forward behaviour: 'train' normalizes by batch stats and
    updates the running buffers, 'frozen' normalizes by batch stats without
    touching the buffers (warm-up contract), 'eval' uses the buffers only.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: str = "train"

    @classmethod
    def create(cls, name: str, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Parameter(f"{name}_gamma", np.ones(channels, dtype=dtype)),
            beta=Parameter(f"{name}_beta", np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            gamma=Parameter(self.gamma.name, self.gamma.value.copy()),
            beta=Parameter(self.beta.name, self.beta.value.copy()),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            momentum=self.momentum,
            eps=self.eps,
            mode=self.mode,
        )


def batchnorm_apply(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    """Apply batch norm to an NCHW array outside of any network graph."""
    node = BatchNormNode("batchnorm_apply", "x", state)
    return node.forward([np.asarray(x)])


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax probabilities and per-sample cross-entropy losses.

    Returns (loss_vector, probs) with loss_j = -log probs[j, label_j].
    """
    node = SoftmaxCrossEntropyNode("softmax_cross_entropy", "logits", labels, "none")
    losses = node.forward([np.asarray(logits)])
    return losses, node.probs


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ConvStage:
    weight: Parameter
    stride: int
    pad: int
    bn: BatchNormState | None
    bias: Parameter | None  # present only when batch norm is off


class Trunk:
    """The shared network: conv stages feeding global average pooling.

    Parameters and batch-norm state are owned by the trunk and referenced by
    the per-batch graphs that ``apply`` emits into.
    """

    def __init__(self, config: TrunkConfig, stages: list[ConvStage], dtype=np.float32):
        self.config = config
        self.stages = stages
        self.dtype = np.dtype(dtype)
        self.mode = "train"

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval", "frozen"):
            raise ValueError(f"unknown trunk mode '{mode}'")
        self.mode = mode
        for stage in self.stages:
            if stage.bn is not None:
                stage.bn.mode = mode

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for stage in self.stages:
            params.append(stage.weight)
            if stage.bias is not None:
                params.append(stage.bias)
            if stage.bn is not None:
                params.extend([stage.bn.gamma, stage.bn.beta])
        return params

    def bn_states(self) -> list[BatchNormState]:
        return [s.bn for s in self.stages if s.bn is not None]

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def apply(self, g: Graph, x: str) -> str:
        """Append this trunk's ops to graph ``g``; return the feature node."""
        h = x
        for i, stage in enumerate(self.stages):
            h = g.conv2d(f"trunk/s{i}/conv", h, stage.weight, stride=stage.stride, pad=stage.pad)
            if stage.bias is not None:
                h = g.add_bias(f"trunk/s{i}/bias", h, stage.bias)
            if stage.bn is not None:
                h = g.batchnorm(f"trunk/s{i}/bn", h, stage.bn)
            h = g.relu(f"trunk/s{i}/relu", h)
        return g.global_avg_pool("trunk/features", h)

    def forward_features(self, images: np.ndarray) -> np.ndarray:
        """Run just the trunk on a batch of images; returns (N, feature_dim)."""
        g = Graph(dtype=self.dtype)
        x = g.input("images")
        feat = self.apply(g, x)
        return forward(g, {"images": images}, [feat])[feat]

    def copy(self) -> "Trunk":
        """Value copy: fine-tuning a copy never mutates the archived trunk."""
        stages = []
        for s in self.stages:
            stages.append(
                ConvStage(
                    weight=Parameter(s.weight.name, s.weight.value.copy()),
                    stride=s.stride,
                    pad=s.pad,
                    bn=s.bn.copy() if s.bn is not None else None,
                    bias=Parameter(s.bias.name, s.bias.value.copy()) if s.bias is not None else None,
                )
            )
        out = Trunk(self.config, stages, dtype=self.dtype)
        out.mode = self.mode
        return out

    def astype(self, dtype) -> "Trunk":
        """Copy of the trunk in another float width (for verification runs)."""
        out = self.copy()
        out.dtype = np.dtype(dtype)
        for s in out.stages:
            s.weight.value = s.weight.value.astype(dtype)
            s.weight.gradient = np.zeros_like(s.weight.value)
            s.weight.momentum_buffer = np.zeros_like(s.weight.value)
            if s.bias is not None:
                s.bias.value = s.bias.value.astype(dtype)
                s.bias.gradient = np.zeros_like(s.bias.value)
                s.bias.momentum_buffer = np.zeros_like(s.bias.value)
            if s.bn is not None:
                for p in (s.bn.gamma, s.bn.beta):
                    p.value = p.value.astype(dtype)
                    p.gradient = np.zeros_like(p.value)
                    p.momentum_buffer = np.zeros_like(p.value)
                s.bn.running_mean = s.bn.running_mean.astype(dtype)
                s.bn.running_var = s.bn.running_var.astype(dtype)
        return out


def build_trunk(config: TrunkConfig, init_seed: int, dtype=np.float32) -> Trunk:
    """Construct a trunk with fan-in-scaled uniform init, deterministic in seed."""
    rng = substream(init_seed, "trunk-init")
    k = config.kernel_size
    pad = k // 2
    in_ch = config.input_size[0]
    stages: list[ConvStage] = []
    for i, (out_ch, stride) in enumerate(config.stages):
        fan_in = in_ch * k * k
        weight = Parameter(
            f"trunk/s{i}/conv_w",
            _uniform_fan_in(rng, (out_ch, in_ch, k, k), fan_in, dtype),
        )
        if config.use_batchnorm:
            bn = BatchNormState.create(f"trunk/s{i}/bn", out_ch, dtype=dtype)
            bias = None
        else:
            bn = None
            bias = Parameter(f"trunk/s{i}/conv_b", _uniform_fan_in(rng, (out_ch,), fan_in, dtype))
        stages.append(ConvStage(weight=weight, stride=stride, pad=pad, bn=bn, bias=bias))
        in_ch = out_ch
    return Trunk(config, stages, dtype=dtype)


@dataclass
class Head:
    """Per-task fully connected layer: weight (feature_dim x C) plus bias (C)."""

    task_id: str
    weight: Parameter
    bias: Parameter

    @property
    def n_classes(self) -> int:
        return self.weight.value.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def param_count(self) -> int:
        return self.weight.value.size + self.bias.value.size

    def apply(self, g: Graph, features: str) -> str:
        z = g.matmul(f"head/{self.task_id}/matmul", features, self.weight)
        return g.add_bias(f"head/{self.task_id}/logits", z, self.bias)

    def copy(self) -> "Head":
        return Head(
            task_id=self.task_id,
            weight=Parameter(self.weight.name, self.weight.value.copy()),
            bias=Parameter(self.bias.name, self.bias.value.copy()),
        )


def build_head(
    task_id: str, feature_dim: int, n_classes: int, rng: np.random.Generator, dtype=np.float32
) -> Head:
    if n_classes < 2:
        raise ValueError(f"head for task {task_id} needs at least 2 classes")
    return Head(
        task_id=str(task_id),
        weight=Parameter(
            f"head/{task_id}/w", _uniform_fan_in(rng, (feature_dim, n_classes), feature_dim, dtype)
        ),
        bias=Parameter(
            f"head/{task_id}/b", _uniform_fan_in(rng, (n_classes,), feature_dim, dtype)
        ),
    )
