"""Minimal deterministic automatic-differentiation engine for dense classifiers.

Graphs are flat topologically-ordered node lists.  Everything is float64 and
seeded, so two runs with the same seed produce bitwise-identical parameter
trajectories -- the packing layer relies on that.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01
MOMENTUM_COEF = 0.9
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAGRAD_EPS = 1e-10

ACTIVATIONS = ("sigmoid", "leaky_relu", "tanh", "relu")
OPTIMIZERS = ("sgd", "momentum", "adam", "adagrad")


class EngineError(Exception):
    pass


class ShapeMismatch(EngineError):
    def __init__(self, port: str, expected, got):
        self.port = port
        self.expected = expected
        self.got = got
        super().__init__(f"port {port!r}: expected shape {expected}, got {got}")


class NonFiniteGradient(EngineError):
    def __init__(self, param: str):
        self.param = param
        super().__init__(f"non-finite gradient for parameter {param!r}")


@dataclass(frozen=True)
class Node:
    name: str
    op: str  # "input" | "affine" | one of ACTIVATIONS | "softmax_xent"
    inputs: tuple = ()
    port: str | None = None        # input nodes: feature port name
    weight: str | None = None      # affine nodes
    bias: str | None = None
    label_port: str | None = None  # loss nodes
    member: str = ""               # owning model_id
    layer_index: int = -1


@dataclass
class ComputationGraph:
    model_id: str
    nodes: list
    input_ports: dict   # port -> (feature_dim, dataset_binding)
    label_ports: dict   # port -> class_count
    output_ports: dict  # name -> node name
    loss_heads: dict    # member_id -> loss node name
    param_shapes: dict  # param name -> shape tuple
    # dedup rewrite: member port -> canonical physical port
    port_alias: dict = field(default_factory=dict)

    def resolve(self, port: str) -> str:
        return self.port_alias.get(port, port)

    def physical_ports(self):
        return sorted({self.resolve(p) for p in self.input_ports})


@dataclass
class ForwardState:
    values: dict
    outputs: dict
    losses: dict
    probs: dict       # loss node -> softmax probabilities
    labels: dict      # loss node -> label vector
    valid: dict       # loss node -> number of unmasked rows


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    step_counter: int = 0
    slots: dict = field(default_factory=dict)

    def slot(self, param: str, like: np.ndarray, name: str) -> np.ndarray:
        per_param = self.slots.setdefault(param, {})
        if name not in per_param:
            per_param[name] = np.zeros_like(like)
        return per_param[name]


def make_optimizer(kind: str, learning_rate: float) -> OptimizerState:
    kind = kind.lower()
    if kind not in OPTIMIZERS:
        raise EngineError(f"unknown optimizer kind {kind!r}")
    if learning_rate <= 0:
        raise EngineError("learning rate must be positive")
    return OptimizerState(kind=kind, learning_rate=learning_rate)


def build_mlp(model_id, input_dim, hidden, classes, activation="relu",
              dataset_binding="default") -> ComputationGraph:
    """Affine stack with a softmax cross-entropy head."""
    if activation not in ACTIVATIONS:
        raise EngineError(f"unknown activation {activation!r}")
    x_port = f"{model_id}/x"
    y_port = f"{model_id}/y"
    dims = [input_dim, *hidden, classes]
    nodes = [Node(name=f"{model_id}/in", op="input", port=x_port, member=model_id)]
    prev = nodes[0].name
    param_shapes = {}
    for i in range(len(dims) - 1):
        w, b = f"{model_id}/L{i}/W", f"{model_id}/L{i}/b"
        param_shapes[w] = (dims[i], dims[i + 1])
        param_shapes[b] = (dims[i + 1],)
        aff = Node(name=f"{model_id}/aff{i}", op="affine", inputs=(prev,),
                   weight=w, bias=b, member=model_id, layer_index=i)
        nodes.append(aff)
        prev = aff.name
        if i < len(dims) - 2:
            act = Node(name=f"{model_id}/act{i}", op=activation, inputs=(prev,),
                       member=model_id, layer_index=i)
            nodes.append(act)
            prev = act.name
    loss = Node(name=f"{model_id}/loss", op="softmax_xent", inputs=(prev,),
                label_port=y_port, member=model_id)
    nodes.append(loss)
    return ComputationGraph(
        model_id=model_id,
        nodes=nodes,
        input_ports={x_port: (input_dim, dataset_binding)},
        label_ports={y_port: classes},
        output_ports={model_id: prev},
        loss_heads={model_id: loss.name},
        param_shapes=param_shapes,
    )


def identity_graph(model_id, input_dim, dataset_binding="default") -> ComputationGraph:
    x_port = f"{model_id}/x"
    node = Node(name=f"{model_id}/in", op="input", port=x_port, member=model_id)
    return ComputationGraph(
        model_id=model_id, nodes=[node],
        input_ports={x_port: (input_dim, dataset_binding)},
        label_ports={}, output_ports={model_id: node.name},
        loss_heads={}, param_shapes={},
    )


def _param_rng(member: str, layer_index: int, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{member}|{layer_index}|{seed}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def init_parameters(graph: ComputationGraph, seed: int) -> dict:
    """Xavier-uniform weights, zero biases.

    Seeded per (model_id, layer index, seed) so values never depend on the
    packing context or on creation order.
    """
    params = {}
    for node in graph.nodes:
        if node.op != "affine":
            continue
        fan_in, fan_out = graph.param_shapes[node.weight]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        rng = _param_rng(node.member, node.layer_index, seed)
        params[node.weight] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[node.bias] = np.zeros(fan_out)
    return params


def forward(graph: ComputationGraph, params: dict, inputs: dict,
            valid_rows: dict | None = None) -> ForwardState:
    """Evaluate the graph on named input arrays.

    ``valid_rows`` maps member id -> number of rows that count toward the
    loss; trailing rows are padding and masked out.
    """
    valid_rows = valid_rows or {}
    values, probs, labels, losses, valid = {}, {}, {}, {}, {}
    for node in graph.nodes:
        if node.op == "input":
            port = graph.resolve(node.port)
            if port not in inputs:
                raise ShapeMismatch(port, "present", "missing")
            x = np.asarray(inputs[port], dtype=np.float64)
            dim = graph.input_ports[node.port][0]
            if x.ndim != 2 or x.shape[1] != dim:
                raise ShapeMismatch(node.port, ("batch", dim), x.shape)
            values[node.name] = x
        elif node.op == "affine":
            x = values[node.inputs[0]]
            values[node.name] = x @ params[node.weight] + params[node.bias]
        elif node.op == "sigmoid":
            values[node.name] = 1.0 / (1.0 + np.exp(-values[node.inputs[0]]))
        elif node.op == "tanh":
            values[node.name] = np.tanh(values[node.inputs[0]])
        elif node.op == "relu":
            values[node.name] = np.maximum(values[node.inputs[0]], 0.0)
        elif node.op == "leaky_relu":
            x = values[node.inputs[0]]
            values[node.name] = np.where(x >= 0, x, LEAKY_SLOPE * x)
        elif node.op == "softmax_xent":
            logits = values[node.inputs[0]]
            port = graph.resolve(node.label_port)
            if port not in inputs:
                raise ShapeMismatch(port, "present", "missing")
            y = np.asarray(inputs[port]).astype(np.int64)
            n_valid = int(valid_rows.get(node.member, logits.shape[0]))
            if y.shape[0] != logits.shape[0]:
                raise ShapeMismatch(node.label_port, (logits.shape[0],), y.shape)
            z = logits - logits.max(axis=1, keepdims=True)
            expz = np.exp(z)
            p = expz / expz.sum(axis=1, keepdims=True)
            logp = z - np.log(expz.sum(axis=1, keepdims=True))
            rows = np.arange(n_valid)
            loss = -logp[rows, y[:n_valid]].mean() if n_valid else 0.0
            values[node.name] = loss
            probs[node.name] = p
            labels[node.name] = y
            valid[node.name] = n_valid
            losses[node.member] = float(loss)
        else:
            raise EngineError(f"unknown op {node.op!r}")
        v = values[node.name]
        if not np.all(np.isfinite(v)):
            raise EngineError(f"non-finite value at node {node.name!r}")
    outputs = {name: values[ref] for name, ref in graph.output_ports.items()}
    return ForwardState(values=values, outputs=outputs, losses=losses,
                        probs=probs, labels=labels, valid=valid)


def backward(graph: ComputationGraph, params: dict, state: ForwardState,
             heads: list | None = None) -> dict:
    """Gradients of the summed selected loss heads w.r.t. every parameter.

    Member losses touch disjoint parameters, so summing heads yields each
    member's own gradient untouched by the others.
    """
    head_nodes = {graph.loss_heads[m] for m in (heads or graph.loss_heads)}
    node_grads: dict = {}
    grads: dict = {}
    for node in reversed(graph.nodes):
        if node.op == "softmax_xent":
            if node.name not in head_nodes:
                continue
            p = state.probs[node.name]
            y = state.labels[node.name]
            n_valid = state.valid[node.name]
            d = np.zeros_like(p)
            if n_valid:
                d[:n_valid] = p[:n_valid]
                d[np.arange(n_valid), y[:n_valid]] -= 1.0
                d[:n_valid] /= n_valid
            node_grads[node.inputs[0]] = node_grads.get(node.inputs[0], 0.0) + d
            continue
        if node.name not in node_grads:
            continue
        d = node_grads[node.name]
        if node.op == "affine":
            x = state.values[node.inputs[0]]
            grads[node.weight] = grads.get(node.weight, 0.0) + x.T @ d
            grads[node.bias] = grads.get(node.bias, 0.0) + d.sum(axis=0)
            node_grads[node.inputs[0]] = (
                node_grads.get(node.inputs[0], 0.0) + d @ params[node.weight].T)
        elif node.op == "sigmoid":
            s = state.values[node.name]
            node_grads[node.inputs[0]] = (
                node_grads.get(node.inputs[0], 0.0) + d * s * (1.0 - s))
        elif node.op == "tanh":
            t = state.values[node.name]
            node_grads[node.inputs[0]] = (
                node_grads.get(node.inputs[0], 0.0) + d * (1.0 - t * t))
        elif node.op == "relu":
            x = state.values[node.inputs[0]]
            node_grads[node.inputs[0]] = (
                node_grads.get(node.inputs[0], 0.0) + d * (x > 0))
        elif node.op == "leaky_relu":
            x = state.values[node.inputs[0]]
            node_grads[node.inputs[0]] = (
                node_grads.get(node.inputs[0], 0.0)
                + d * np.where(x >= 0, 1.0, LEAKY_SLOPE))
        # input nodes: gradient sinks
    return grads


def apply_update(state: OptimizerState, params: dict, grads: dict):
    """One optimizer step, in place; increments the step counter exactly once."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    t = state.step_counter + 1
    lr = state.learning_rate
    for name, g in grads.items():
        w = params[name]
        if state.kind == "sgd":
            w -= lr * g
        elif state.kind == "momentum":
            v = state.slot(name, w, "velocity")
            v *= MOMENTUM_COEF
            v += g
            w -= lr * v
        elif state.kind == "adagrad":
            acc = state.slot(name, w, "accum")
            acc += g * g
            w -= lr * g / (np.sqrt(acc) + ADAGRAD_EPS)
        elif state.kind == "adam":
            m = state.slot(name, w, "m")
            v = state.slot(name, w, "v")
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1 ** t)
            v_hat = v / (1.0 - ADAM_BETA2 ** t)
            w -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    state.step_counter = t
    return params, state
