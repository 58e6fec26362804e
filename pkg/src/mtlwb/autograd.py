"""Dense-tensor reverse-mode autodiff on numpy arrays.

The engine is deliberately small: it supports exactly the primitives the
workbench's networks are made of (2-D convolution, matmul, bias add, ReLU,
batch norm, global average pooling, softmax cross-entropy, row gathering and
weighted scalar combination).  Graphs are built per batch, executed with
``forward`` and differentiated with ``backward``.  There is no fusion and no
graph rewriting; accumulation orders are fixed so that two runs with the same
inputs and parameters produce bitwise-identical outputs and gradients.

Two float widths are supported: float32 for training, float64 for
verification.  Finite-difference checks (``grad_check``) only make sense in
float64, where the central-difference noise floor sits far below the
tolerances asserted in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(Exception):
    """Structural problem in a graph (bad shapes, unknown nodes, bad order)."""

    def __init__(self, node: str, message: str):
        super().__init__(f"node '{node}': {message}")
        self.node = node


@dataclass
class Parameter:
    """A trainable array plus its gradient and SGD momentum buffer.

    The three arrays always share dims and dtype.  Names must be unique
    within a model; checkpointing and the optimizer key on them.
    """

    name: str
    value: np.ndarray
    gradient: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]
    momentum_buffer: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.gradient is None:
            self.gradient = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)
        if self.gradient.shape != self.value.shape:
            raise ValueError(f"parameter '{self.name}': gradient dims differ from value dims")
        if self.momentum_buffer.shape != self.value.shape:
            raise ValueError(f"parameter '{self.name}': momentum dims differ from value dims")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.gradient[...] = 0

    def astype(self, dtype) -> "Parameter":
        """Copy of this parameter in another float width (buffers reset)."""
        return Parameter(self.name, self.value.astype(dtype))


class Node:
    """One primitive op in a graph.  Subclasses implement forward/backward."""

    op = "abstract"

    def __init__(self, name: str, inputs: list[str], params: list[Parameter]):
        self.name = name
        self.inputs = inputs
        self.params = params

    def forward(self, in_values: list[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, in_values: list[np.ndarray]) -> list[np.ndarray]:
        """Return gradients w.r.t. each input; accumulate into param gradients."""
        raise NotImplementedError

    def _shape_error(self, message: str) -> GraphError:
        return GraphError(self.name, message)


class InputNode(Node):
    op = "input"

    def __init__(self, name: str):
        super().__init__(name, [], [])


class ConstantNode(Node):
    op = "constant"

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(name, [], [])
        self.value = value

    def forward(self, in_values):
        return self.value

    def backward(self, grad_out, in_values):
        return []


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold NCHW input into a (N*OH*OW, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n * oh * ow, c * kh * kw), (oh, ow)


class Conv2dNode(Node):
    """2-D convolution, NCHW layout, square kernel, symmetric zero padding."""

    op = "conv2d"

    def __init__(self, name, x, weight: Parameter, stride: int, pad: int):
        super().__init__(name, [x], [weight])
        self.stride = stride
        self.pad = pad
        self._cols = None
        self._x_shape = None

    def forward(self, in_values):
        (x,) = in_values
        w = self.params[0].value
        if x.ndim != 4:
            raise self._shape_error(f"expected NCHW input, got dims {x.shape}")
        cout, cin, kh, kw = w.shape
        if x.shape[1] != cin:
            raise self._shape_error(f"input has {x.shape[1]} channels, kernel expects {cin}")
        if x.shape[2] + 2 * self.pad < kh or x.shape[3] + 2 * self.pad < kw:
            raise self._shape_error(
                f"spatial dims {x.shape[2:]} smaller than kernel ({kh}, {kw}) with pad {self.pad}"
            )
        cols, (oh, ow) = _im2col(x, kh, kw, self.stride, self.pad)
        out = cols @ w.reshape(cout, -1).T
        self._cols = cols
        self._x_shape = x.shape
        return out.reshape(x.shape[0], oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(self, grad_out, in_values):
        w = self.params[0].value
        cout, cin, kh, kw = w.shape
        n, c, h, ww = self._x_shape
        oh, ow = grad_out.shape[2], grad_out.shape[3]
        gmat = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
        self.params[0].gradient += (gmat.T @ self._cols).reshape(w.shape)
        dcols = gmat @ w.reshape(cout, -1)
        # col2im: scatter-add each kernel offset back onto the padded input
        dxp = np.zeros((n, c, h + 2 * self.pad, ww + 2 * self.pad), dtype=grad_out.dtype)
        d6 = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += d6[:, :, i, j]
        if self.pad:
            dxp = dxp[:, :, self.pad : self.pad + h, self.pad : self.pad + ww]
        return [dxp]


class MatMulNode(Node):
    """x @ W with x a (N, D) node and W a (D, M) parameter."""

    op = "matmul"

    def __init__(self, name, x, weight: Parameter):
        super().__init__(name, [x], [weight])

    def forward(self, in_values):
        (x,) = in_values
        w = self.params[0].value
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise self._shape_error(f"cannot multiply dims {x.shape} by {w.shape}")
        return x @ w

    def backward(self, grad_out, in_values):
        (x,) = in_values
        w = self.params[0].value
        self.params[0].gradient += x.T @ grad_out
        return [grad_out @ w.T]


class AddBiasNode(Node):
    """Broadcast bias add: per column for (N, M), per channel for NCHW."""

    op = "add_bias"

    def __init__(self, name, x, bias: Parameter):
        super().__init__(name, [x], [bias])

    def forward(self, in_values):
        (x,) = in_values
        b = self.params[0].value
        if x.ndim == 2:
            if x.shape[1] != b.shape[0]:
                raise self._shape_error(f"bias of dims {b.shape} does not fit {x.shape}")
            return x + b[None, :]
        if x.ndim == 4:
            if x.shape[1] != b.shape[0]:
                raise self._shape_error(f"bias of dims {b.shape} does not fit {x.shape}")
            return x + b[None, :, None, None]
        raise self._shape_error(f"unsupported input rank {x.ndim}")

    def backward(self, grad_out, in_values):
        if grad_out.ndim == 2:
            self.params[0].gradient += grad_out.sum(axis=0)
        else:
            self.params[0].gradient += grad_out.sum(axis=(0, 2, 3))
        return [grad_out]


class ReluNode(Node):
    op = "relu"

    def __init__(self, name, x):
        super().__init__(name, [x], [])

    def forward(self, in_values):
        return np.maximum(in_values[0], 0)

    def backward(self, grad_out, in_values):
        return [grad_out * (in_values[0] > 0)]


class BatchNormNode(Node):
    """Per-channel batch norm over (N, H, W) of an NCHW input.

    Behaviour is governed by ``state.mode``:
      * ``train``  -- normalize by batch statistics, update running stats;
      * ``frozen`` -- normalize by batch statistics, running stats untouched
        (used during warm-up and recalibration-free forward passes);
      * ``eval``   -- normalize by running statistics only.
    ``state`` carries gamma/beta Parameters, running mean/var arrays, the
    update momentum and epsilon; see the BatchNormState block type.
    """

    op = "batchnorm"

    def __init__(self, name, x, state):
        super().__init__(name, [x], [state.gamma, state.beta])
        self.state = state
        self._cache = None

    def forward(self, in_values):
        (x,) = in_values
        st = self.state
        if x.ndim != 4:
            raise self._shape_error(f"expected NCHW input, got dims {x.shape}")
        if x.shape[1] != st.gamma.value.shape[0]:
            raise self._shape_error(
                f"input has {x.shape[1]} channels, state expects {st.gamma.value.shape[0]}"
            )
        if x.shape[0] == 0:
            raise self._shape_error("empty batch")
        gamma = st.gamma.value[None, :, None, None]
        beta = st.beta.value[None, :, None, None]
        if st.mode == "eval":
            inv = 1.0 / np.sqrt(st.running_var + st.eps)
            xhat = (x - st.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self._cache = ("eval", inv)
            return gamma * xhat + beta
        if st.mode not in ("train", "frozen"):
            raise self._shape_error(f"unknown batch-norm mode '{st.mode}'")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + st.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        if st.mode == "train":
            # unbiased variance goes into the running buffer (torch convention)
            unbiased = var * (m / (m - 1)) if m > 1 else var
            st.running_mean = (1 - st.momentum) * st.running_mean + st.momentum * mean
            st.running_var = (1 - st.momentum) * st.running_var + st.momentum * unbiased
        self._cache = ("batch", xhat, inv, m)
        return gamma * xhat + beta

    def backward(self, grad_out, in_values):
        st = self.state
        gamma = st.gamma.value
        if self._cache[0] == "eval":
            _, inv = self._cache
            (x,) = in_values
            xhat = (x - st.running_mean[None, :, None, None]) * inv[None, :, None, None]
            st.gamma.gradient += (grad_out * xhat).sum(axis=(0, 2, 3))
            st.beta.gradient += grad_out.sum(axis=(0, 2, 3))
            return [grad_out * (gamma * inv)[None, :, None, None]]
        _, xhat, inv, m = self._cache
        st.gamma.gradient += (grad_out * xhat).sum(axis=(0, 2, 3))
        st.beta.gradient += grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * gamma[None, :, None, None]
        # classic batch-norm backward, everything per channel
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
        dx = (
            dxhat
            - (sum_dxhat / m)[None, :, None, None]
            - xhat * (sum_dxhat_xhat / m)[None, :, None, None]
        ) * inv[None, :, None, None]
        return [dx]


class GlobalAvgPoolNode(Node):
    """NCHW -> (N, C) mean over spatial positions."""

    op = "global_avg_pool"

    def __init__(self, name, x):
        super().__init__(name, [x], [])
        self._spatial = None

    def forward(self, in_values):
        (x,) = in_values
        if x.ndim != 4:
            raise self._shape_error(f"expected NCHW input, got dims {x.shape}")
        self._spatial = (x.shape[2], x.shape[3])
        return x.mean(axis=(2, 3))

    def backward(self, grad_out, in_values):
        h, w = self._spatial
        g = grad_out[:, :, None, None] / (h * w)
        return [np.broadcast_to(g, grad_out.shape + (h, w)).copy()]


class SoftmaxCrossEntropyNode(Node):
    """Per-row softmax + categorical cross-entropy against integer labels.

    ``reduction`` is one of 'none' (per-sample loss vector), 'sum' or 'mean'.
    The row-wise probabilities are kept on the node (``.probs``) so callers
    can read predictions without a separate softmax op.
    """

    op = "softmax_cross_entropy"

    def __init__(self, name, logits, labels: np.ndarray, reduction: str = "none"):
        super().__init__(name, [logits], [])
        if reduction not in ("none", "sum", "mean"):
            raise GraphError(name, f"unknown reduction '{reduction}'")
        self.labels = np.asarray(labels, dtype=np.int64)
        self.reduction = reduction
        self.probs = None

    def forward(self, in_values):
        (logits,) = in_values
        if logits.ndim != 2:
            raise self._shape_error(f"expected (N, C) logits, got dims {logits.shape}")
        if logits.shape[0] != self.labels.shape[0]:
            raise self._shape_error(
                f"{logits.shape[0]} logit rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(logits)):
            raise self._shape_error("non-finite logits")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= logits.shape[1]:
            raise self._shape_error("label out of range")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        self.probs = np.exp(logp)
        losses = -logp[np.arange(logits.shape[0]), self.labels]
        if self.reduction == "sum":
            return losses.sum()
        if self.reduction == "mean":
            return losses.mean()
        return losses

    def backward(self, grad_out, in_values):
        n = self.labels.shape[0]
        delta = self.probs.copy()
        delta[np.arange(n), self.labels] -= 1
        if self.reduction == "sum":
            return [delta * grad_out]
        if self.reduction == "mean":
            return [delta * (grad_out / n)]
        return [delta * np.asarray(grad_out).reshape(n, 1)]


class GatherRowsNode(Node):
    """Select rows of a 2-D array; used to route features to task heads."""

    op = "gather_rows"

    def __init__(self, name, x, indices: np.ndarray):
        super().__init__(name, [x], [])
        self.indices = np.asarray(indices, dtype=np.int64)
        self._n_rows = None

    def forward(self, in_values):
        (x,) = in_values
        if self.indices.size and self.indices.max() >= x.shape[0]:
            raise self._shape_error("gather index out of range")
        self._n_rows = x.shape[0]
        return x[self.indices]

    def backward(self, grad_out, in_values):
        dx = np.zeros((self._n_rows,) + grad_out.shape[1:], dtype=grad_out.dtype)
        np.add.at(dx, self.indices, grad_out)
        return [dx]


class ReduceSumNode(Node):
    """Sum of all elements, producing a scalar."""

    op = "reduce_sum"

    def __init__(self, name, x):
        super().__init__(name, [x], [])
        self._shape = None

    def forward(self, in_values):
        self._shape = in_values[0].shape
        return np.asarray(in_values[0].sum(), dtype=in_values[0].dtype)

    def backward(self, grad_out, in_values):
        return [np.full(self._shape, float(grad_out), dtype=grad_out.dtype)]


class ScalarCombineNode(Node):
    """Weighted sum of scalar nodes; combines per-task losses into one loss."""

    op = "scalar_combine"

    def __init__(self, name, inputs: list[str], weights: list[float]):
        super().__init__(name, list(inputs), [])
        if len(inputs) != len(weights):
            raise GraphError(name, "one weight per input required")
        self.weights = [float(w) for w in weights]

    def forward(self, in_values):
        total = 0.0
        for v, w in zip(in_values, self.weights):
            if np.ndim(v) != 0:
                raise self._shape_error("scalar_combine inputs must be scalars")
            total += w * float(v)
        return np.asarray(total, dtype=in_values[0].dtype if in_values else np.float64)

    def backward(self, grad_out, in_values):
        g = float(grad_out)
        return [np.asarray(w * g, dtype=grad_out.dtype) for w in self.weights]


class Graph:
    """An acyclic graph of primitive ops, built in topological order.

    Builder methods append one node each and return its name; inputs must be
    names of existing nodes, which makes cycles impossible by construction.
    A graph instance is single-threaded during forward/backward; run distinct
    instances for parallelism.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: dict[str, Node] = {}
        self._order: list[str] = []
        self._values: dict[str, np.ndarray] = {}
        self._ran_forward = False

    # -- construction -----------------------------------------------------

    def _add(self, node: Node) -> str:
        if node.name in self.nodes:
            raise GraphError(node.name, "duplicate node name")
        for inp in node.inputs:
            if inp not in self.nodes:
                raise GraphError(node.name, f"unknown input node '{inp}'")
        self.nodes[node.name] = node
        self._order.append(node.name)
        return node.name

    def input(self, name: str) -> str:
        return self._add(InputNode(name))

    def constant(self, name: str, value) -> str:
        return self._add(ConstantNode(name, np.asarray(value, dtype=self.dtype)))

    def conv2d(self, name, x, weight, stride=1, pad=0) -> str:
        return self._add(Conv2dNode(name, x, weight, stride, pad))

    def matmul(self, name, x, weight) -> str:
        return self._add(MatMulNode(name, x, weight))

    def add_bias(self, name, x, bias) -> str:
        return self._add(AddBiasNode(name, x, bias))

    def relu(self, name, x) -> str:
        return self._add(ReluNode(name, x))

    def batchnorm(self, name, x, state) -> str:
        return self._add(BatchNormNode(name, x, state))

    def global_avg_pool(self, name, x) -> str:
        return self._add(GlobalAvgPoolNode(name, x))

    def softmax_cross_entropy(self, name, logits, labels, reduction="none") -> str:
        return self._add(SoftmaxCrossEntropyNode(name, logits, labels, reduction))

    def gather_rows(self, name, x, indices) -> str:
        return self._add(GatherRowsNode(name, x, indices))

    def reduce_sum(self, name, x) -> str:
        return self._add(ReduceSumNode(name, x))

    def scalar_combine(self, name, inputs, weights) -> str:
        return self._add(ScalarCombineNode(name, inputs, weights))

    # -- introspection ----------------------------------------------------

    def node(self, name: str) -> Node:
        return self.nodes[name]

    def parameters(self) -> list[Parameter]:
        """All parameters attached to this graph, in node order, deduplicated."""
        seen: dict[int, Parameter] = {}
        for name in self._order:
            for p in self.nodes[name].params:
                seen.setdefault(id(p), p)
        return list(seen.values())

    def value(self, name: str) -> np.ndarray:
        if name not in self._values:
            raise GraphError(name, "no stored activation; run forward first")
        return self._values[name]

    def _reachable_from(self, target: str) -> set[str]:
        reach = {target}
        stack = [target]
        while stack:
            for inp in self.nodes[stack.pop()].inputs:
                if inp not in reach:
                    reach.add(inp)
                    stack.append(inp)
        return reach


def forward(
    graph: Graph,
    inputs: dict[str, np.ndarray],
    requested: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Run the graph on bound inputs; return activations for requested nodes.

    All input nodes must be bound.  Activations are cached on the graph for
    the subsequent ``backward``.
    """
    values: dict[str, np.ndarray] = {}
    for name in graph._order:
        node = graph.nodes[name]
        if node.op == "input":
            if name not in inputs:
                raise GraphError(name, "input not bound")
            values[name] = np.ascontiguousarray(inputs[name], dtype=graph.dtype)
        else:
            values[name] = node.forward([values[i] for i in node.inputs])
    graph._values = values
    graph._ran_forward = True
    if requested is None:
        return dict(values)
    missing = [r for r in requested if r not in values]
    if missing:
        raise GraphError(missing[0], "requested node does not exist")
    return {r: values[r] for r in requested}


def backward(graph: Graph, loss_node: str) -> None:
    """Populate ``Parameter.gradient`` with d(loss)/d(param) for graph params.

    Parameters attached to the graph but not on any path to the loss receive
    exactly zero gradient.  Parameters not attached to the graph at all are
    left untouched.
    """
    if not graph._ran_forward:
        raise GraphError(loss_node, "backward before forward")
    if loss_node not in graph.nodes:
        raise GraphError(loss_node, "unknown loss node")
    loss_value = graph._values[loss_node]
    if np.ndim(loss_value) != 0:
        raise GraphError(loss_node, f"loss must be scalar, got dims {np.shape(loss_value)}")

    reachable = graph._reachable_from(loss_node)
    for p in graph.parameters():
        p.gradient[...] = 0

    grads: dict[str, np.ndarray] = {loss_node: np.asarray(1.0, dtype=graph.dtype)}
    for name in reversed(graph._order):
        if name not in reachable or name not in grads:
            continue
        node = graph.nodes[name]
        if not node.inputs and not node.params:
            continue
        in_values = [graph._values[i] for i in node.inputs]
        in_grads = node.backward(grads[name], in_values)
        for inp, g in zip(node.inputs, in_grads):
            if inp in grads:
                grads[inp] = grads[inp] + g
            else:
                grads[inp] = g
    graph._grads = grads


def grad_check(
    graph: Graph,
    inputs: dict[str, np.ndarray],
    loss_node: str,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Requires a float64 graph; float32 rounding would drown the comparison.
    Every element of every attached parameter is perturbed, so keep the
    graphs small.
    """
    if graph.dtype != np.float64:
        raise ValueError("grad_check requires a float64 graph")

    forward(graph, inputs)
    if np.ndim(graph._values[loss_node]) != 0:
        raise GraphError(loss_node, "loss must be scalar")
    backward(graph, loss_node)
    analytic = {p.name: p.gradient.copy() for p in graph.parameters()}

    def loss_at() -> float:
        return float(forward(graph, inputs, [loss_node])[loss_node])

    max_rel = 0.0
    for p in graph.parameters():
        flat = p.value.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        ana = analytic[p.name].reshape(-1)
        rel = np.abs(ana - num) / np.maximum(np.abs(num), 1e-8)
        if rel.size:
            max_rel = max(max_rel, float(rel.max()))
    # restore activations/gradients for the unperturbed point
    forward(graph, inputs)
    backward(graph, loss_node)
    return max_rel
