"""Feed-forward MLP: forward pass, loss, gradient, and the two directional
derivative operators used by the matrix-free metric.

``rop_*`` pushes a parameter tangent forward through the network (the
directional derivative of the outputs), ``lop_*`` pulls an output adjoint
back to parameter space. Together they form curvature-vector products
without ever materializing a Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, Matrix, ParamLayout, ParamVector, make_rng

ACTIVATIONS = ("sigmoid", "tanh", "linear", "softmax")


def sigmoid(z: np.ndarray) -> np.ndarray:
    # exp may overflow to inf on the far negative tail; 1/(1+inf) is the
    # correct 0.0, so only the warning needs suppressing.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "sigmoid":
        return sigmoid(z)
    if act == "tanh":
        return np.tanh(z)
    if act == "linear":
        return z
    if act == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {act!r}")


def _act_deriv(a: np.ndarray, act: str) -> np.ndarray:
    """Elementwise derivative expressed through the activation value."""
    if act == "sigmoid":
        return a * (1.0 - a)
    if act == "tanh":
        return 1.0 - a * a
    if act == "linear":
        return np.ones_like(a)
    raise ValueError(f"{act!r} has no elementwise derivative")


def _softmax_jvp(y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Rowwise (diag(y) - y yᵀ) u; the softmax Jacobian is symmetric."""
    return y * (u - (y * u).sum(axis=1, keepdims=True))


@dataclass
class Layer:
    weight: Matrix  # (n_out, n_in)
    bias: np.ndarray  # (n_out,)
    act: str

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        for k, layer in enumerate(self.layers):
            if layer.act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.act!r}")
            if layer.act == "softmax" and k != len(self.layers) - 1:
                raise ValueError("softmax is only allowed on the final layer")
            if k > 0 and layer.n_in != self.layers[k - 1].n_out:
                raise DimensionError(
                    f"layer {k} expects {layer.n_in} inputs, previous layer "
                    f"produces {self.layers[k - 1].n_out}"
                )

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    @property
    def acts(self) -> list[str]:
        return [l.act for l in self.layers]

    @property
    def layout(self) -> ParamLayout:
        shapes: list[tuple[int, ...]] = []
        for l in self.layers:
            shapes.append(l.weight.shape)
            shapes.append(l.bias.shape)
        return ParamLayout(tuple(shapes))

    @property
    def param_count(self) -> int:
        return self.layout.size

    def flatten(self) -> ParamVector:
        return self.layout.join(
            [t for l in self.layers for t in (l.weight, l.bias)]
        )

    def with_params(self, vec: ParamVector) -> "Mlp":
        """New model with the same structure and parameters taken from vec."""
        tensors = self.layout.split(vec)
        layers = [
            Layer(tensors[2 * k], tensors[2 * k + 1], l.act)
            for k, l in enumerate(self.layers)
        ]
        return Mlp(layers)


def init_mlp(layer_dims: list[int], acts: list[str], seed: int) -> Mlp:
    """Uniform(-s, s) weights with s = sqrt(6/(n_in+n_out)), zero biases."""
    if len(acts) != len(layer_dims) - 1:
        raise DimensionError(
            f"{len(layer_dims) - 1} layers but {len(acts)} activations"
        )
    rng = make_rng(seed)
    layers = []
    for n_in, n_out, act in zip(layer_dims[:-1], layer_dims[1:], acts):
        s = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-s, s, size=(n_out, n_in))
        layers.append(Layer(w, np.zeros(n_out), act))
    return Mlp(layers)


@dataclass
class Batch:
    """Inputs with optional targets, one example per row."""

    inputs: Matrix  # (n, d)
    targets: Matrix | None = None  # (n, o)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape[0] != self.inputs.shape[0]:
                raise DimensionError(
                    f"{self.inputs.shape[0]} inputs vs "
                    f"{self.targets.shape[0]} target rows"
                )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ForwardTrace:
    """Cached per-layer pre-activations and activations for one batch."""

    inputs: Matrix
    pre: list[Matrix]  # z_k, k = 1..L
    act: list[Matrix]  # a_k, k = 1..L

    @property
    def outputs(self) -> Matrix:
        return self.act[-1]

    @property
    def preactivation(self) -> Matrix:
        return self.pre[-1]


def forward(m: Mlp, inputs: Matrix) -> ForwardTrace:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != m.layers[0].n_in:
        raise DimensionError(
            f"inputs shape {inputs.shape}, first layer expects {m.layers[0].n_in} columns"
        )
    pre, act = [], []
    a = inputs
    for layer in m.layers:
        z = a @ layer.weight.T + layer.bias
        a = _apply_activation(z, layer.act)
        pre.append(z)
        act.append(a)
    return ForwardTrace(inputs, pre, act)


# Output-model plumbing lives in metric.py; loss/gradient only need the kind
# and the noise level, passed as a duck-typed object with .kind/.noise_std.

_REQUIRED_OUTPUT_ACT = {
    "linear_gaussian": "linear",
    "sigmoid_bernoulli": "sigmoid",
    "softmax_multinomial": "softmax",
}


def _check_pairing(m: Mlp, om) -> None:
    want = _REQUIRED_OUTPUT_ACT.get(om.kind)
    if want is None:
        raise ValueError(f"unknown output model {om.kind!r}")
    have = m.layers[-1].act
    if have != want:
        raise ValueError(
            f"output model {om.kind} requires a {want} output layer, got {have}"
        )


def _final_preactivation(m: Mlp, inputs: Matrix) -> Matrix:
    """Forward pass that stops before the last activation (enough for every
    loss; the cross-entropies are functions of the pre-activation only)."""
    if inputs.ndim != 2 or inputs.shape[1] != m.layers[0].n_in:
        raise DimensionError(
            f"inputs shape {inputs.shape}, first layer expects {m.layers[0].n_in} columns"
        )
    a = inputs
    for layer in m.layers[:-1]:
        a = _apply_activation(a @ layer.weight.T + layer.bias, layer.act)
    last = m.layers[-1]
    return a @ last.weight.T + last.bias


def loss(m: Mlp, batch: Batch, om) -> float:
    """Mean negative log-likelihood of the batch under the output model.

    Cross-entropies are evaluated from pre-activations (softplus and
    log-sum-exp forms), never through log of a saturated activation.
    """
    _check_pairing(m, om)
    if batch.targets is None:
        raise ValueError("batch has no targets")
    t = batch.targets
    r = _final_preactivation(m, np.asarray(batch.inputs, dtype=np.float64))
    if t.shape != r.shape:
        raise DimensionError(f"targets {t.shape} vs outputs {r.shape}")
    n = batch.size
    if om.kind == "linear_gaussian":
        resid = t - r  # linear output: y == r
        return float(np.sum(resid * resid) / (2.0 * om.noise_std**2 * n))
    if om.kind == "sigmoid_bernoulli":
        return float(np.sum(softplus(r) - t * r) / n)
    # softmax_multinomial; target rows are points on the simplex
    return float(np.sum(logsumexp_rows(r) - np.sum(t * r, axis=1)) / n)


def gradient(m: Mlp, batch: Batch, om) -> ParamVector:
    """Exact reverse-mode gradient of ``loss`` (mean over the batch)."""
    _check_pairing(m, om)
    if batch.targets is None:
        raise ValueError("batch has no targets")
    trace = forward(m, batch.inputs)
    y = trace.outputs
    t = batch.targets
    if t.shape != y.shape:
        raise DimensionError(f"targets {t.shape} vs outputs {y.shape}")
    n = batch.size
    # For each matching pair the loss gradient w.r.t. the output
    # pre-activation collapses to (y - t), up to the Gaussian noise scale.
    delta = (y - t) / n
    if om.kind == "linear_gaussian":
        delta = delta / om.noise_std**2
    grads: list[np.ndarray] = []
    for k in range(len(m.layers) - 1, -1, -1):
        a_prev = trace.act[k - 1] if k > 0 else trace.inputs
        grads.append(delta.sum(axis=0))  # bias
        grads.append(delta.T @ a_prev)  # weight
        if k > 0:
            delta = (delta @ m.layers[k].weight) * _act_deriv(
                trace.act[k - 1], m.layers[k - 1].act
            )
    grads.reverse()
    return m.layout.join(grads)


def trace_derivs(m: Mlp, trace: ForwardTrace) -> list[Matrix | None]:
    """Per-layer elementwise activation derivatives for a fixed trace; None
    marks a softmax layer (its Jacobian is not elementwise). Precomputing
    these amortizes repeated rop/lop sweeps over one trace (CG inner loops).
    """
    out: list[Matrix | None] = []
    for k, layer in enumerate(m.layers):
        out.append(None if layer.act == "softmax" else _act_deriv(trace.act[k], layer.act))
    return out


def _rop(
    m: Mlp, trace: ForwardTrace, v: ParamVector, derivs: list[Matrix | None] | None = None
) -> tuple[Matrix, Matrix]:
    """Forward-mode sweep: tangents of (final pre-activation, final output)."""
    if v.shape != (m.param_count,):
        raise DimensionError(f"tangent shape {v.shape}, expected ({m.param_count},)")
    if derivs is None:
        derivs = trace_derivs(m, trace)
    tangents = m.layout.split(v)
    ra = None  # inputs carry no tangent
    rz = np.zeros_like(trace.inputs)
    for k, layer in enumerate(m.layers):
        a_prev = trace.act[k - 1] if k > 0 else trace.inputs
        rw, rb = tangents[2 * k], tangents[2 * k + 1]
        rz = a_prev @ rw.T + rb
        if ra is not None:
            rz += ra @ layer.weight.T
        if derivs[k] is None:
            ra = _softmax_jvp(trace.act[k], rz)
        else:
            ra = derivs[k] * rz
    return rz, ra


def rop_output(m: Mlp, inputs: Matrix, v: ParamVector) -> Matrix:
    """Directional derivative of the outputs along the parameter tangent v."""
    return _rop(m, forward(m, inputs), v)[1]


def rop_preactivation(m: Mlp, inputs: Matrix, v: ParamVector) -> Matrix:
    """Same as rop_output but for the output-layer pre-activation."""
    return _rop(m, forward(m, inputs), v)[0]


def _lop(
    m: Mlp,
    trace: ForwardTrace,
    u: Matrix,
    wrt: str,
    derivs: list[Matrix | None] | None = None,
) -> ParamVector:
    """Reverse-mode sweep seeded with the adjoint u; sums over examples."""
    if u.shape != trace.outputs.shape:
        raise DimensionError(
            f"adjoint shape {u.shape}, outputs shape {trace.outputs.shape}"
        )
    if derivs is None:
        derivs = trace_derivs(m, trace)
    if wrt == "output":
        if derivs[-1] is None:
            delta = _softmax_jvp(trace.act[-1], u)
        else:
            delta = derivs[-1] * u
    elif wrt == "preactivation":
        delta = u
    else:
        raise ValueError(f"unknown adjoint target {wrt!r}")
    grads: list[np.ndarray] = []
    for k in range(len(m.layers) - 1, -1, -1):
        a_prev = trace.act[k - 1] if k > 0 else trace.inputs
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ a_prev)
        if k > 0:
            delta = (delta @ m.layers[k].weight) * derivs[k - 1]
    grads.reverse()
    return m.layout.join(grads)


def lop_output(m: Mlp, inputs: Matrix, u: Matrix) -> ParamVector:
    """Sum over examples of Jᵀu with J the output/parameter Jacobian."""
    return _lop(m, forward(m, inputs), u, "output")


def lop_preactivation(m: Mlp, inputs: Matrix, u: Matrix) -> ParamVector:
    return _lop(m, forward(m, inputs), u, "preactivation")


CHECKPOINT_MAGIC = "NGMLP 1"


def save_mlp(m: Mlp, path) -> None:
    """Text checkpoint: magic, dims, activation names, then the flat params."""
    theta = m.flatten()
    lines = [
        CHECKPOINT_MAGIC,
        " ".join(str(d) for d in m.dims),
        " ".join(m.acts),
    ]
    lines.extend(repr(float(x)) for x in theta)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mlp(path) -> Mlp:
    with open(path, encoding="utf-8") as fh:
        text = fh.read().split("\n")
    if not text or text[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint: {path}")
    dims = [int(x) for x in text[1].split()]
    acts = text[2].split()
    values = np.array([float(x) for x in " ".join(text[3:]).split()])
    m = init_mlp(dims, acts, seed=0)
    if values.shape != (m.param_count,):
        raise ValueError(
            f"checkpoint holds {values.size} values, model needs {m.param_count}"
        )
    return m.with_params(values)
