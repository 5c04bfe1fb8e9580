"""Feed-forward embedding network with L2-normalized output and exact gradients.

All math runs in float64. ``forward``/``backward`` are pure functions of
(net, inputs); parameter updates (``sgd_step``, ``adam_step``) return new
parameter sets instead of mutating, so nets are safe to copy across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PARAMS_MAGIC = "pairmine-params v1"

# pre-normalization rows with a norm below this are considered dead
DEGENERATE_NORM_TOL = 1e-12


class DegenerateEmbeddingError(ValueError):
    """Pre-normalization embedding collapsed to (near-)zero norm."""


class CheckpointFormatError(ValueError):
    """Parameter file is missing a header, truncated, or malformed."""


@dataclass
class EmbeddingNet:
    """MLP ``x -> [linear, relu]* -> linear -> x/||x||``.

    ``weights[l]`` has shape ``(layer_dims[l], layer_dims[l+1])``; ReLU is
    applied after every layer except the last, whose output is L2-normalized
    row-wise. ``norm_floor > 0`` clamps tiny pre-normalization norms instead
    of raising (training robustness knob, off by default).
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    norm_floor: float = 0.0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ValueError(f"layer_dims must be >= 2 positive ints, got {self.layer_dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter list length does not match layer_dims")
        if self.norm_floor < 0:
            raise ValueError("norm_floor must be >= 0")
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[layer], self.layer_dims[layer + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ValueError(f"layer {layer}: shapes {w.shape}/{b.shape}, want {want}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {layer}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            norm_floor=self.norm_floor,
        )


@dataclass
class ParamGrads:
    """Per-parameter gradient arrays, shape-matched to an EmbeddingNet."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def check_against(self, net: EmbeddingNet) -> None:
        if len(self.weights) != net.n_layers or len(self.biases) != net.n_layers:
            raise ValueError("gradient list length does not match net")
        for gw, gb, w, b in zip(self.weights, self.biases, net.weights, net.biases):
            if gw.shape != w.shape or gb.shape != b.shape:
                raise ValueError(f"gradient shapes {gw.shape}/{gb.shape} do not match {w.shape}/{b.shape}")
            if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
                raise ValueError("non-finite gradient entries")


def init_net(layer_dims, seed, norm_floor: float = 0.0) -> EmbeddingNet:
    """He-style uniform init scaled by fan-in, biases zero, seeded."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EmbeddingNet(layer_dims=dims, weights=weights, biases=biases, norm_floor=norm_floor)


def _trace(net: EmbeddingNet, inputs: np.ndarray):
    """Forward pass keeping intermediates for backprop.

    Returns (pre_activations, hidden_activations, pre_norm, effective_norms,
    clamped_mask, embeddings).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"inputs must be a nonempty 2-d batch, got shape {x.shape}")
    if x.shape[1] != net.input_dim:
        raise ValueError(f"input dim {x.shape[1]} does not match net input dim {net.input_dim}")

    pres, hiddens = [], []
    h = x
    for layer in range(net.n_layers):
        z = h @ net.weights[layer] + net.biases[layer]
        pres.append(z)
        if layer < net.n_layers - 1:
            h = np.maximum(z, 0.0)
            hiddens.append(h)
    v = pres[-1]
    norms = np.linalg.norm(v, axis=1)
    if net.norm_floor > 0.0:
        clamped = norms < net.norm_floor
        eff = np.maximum(norms, net.norm_floor)
    else:
        clamped = np.zeros_like(norms, dtype=bool)
        if np.any(norms < DEGENERATE_NORM_TOL):
            dead = int(np.argmin(norms))
            raise DegenerateEmbeddingError(
                f"pre-normalization row {dead} has norm {norms[dead]:.3e}; "
                "dead network or zero input"
            )
        eff = norms
    out = v / eff[:, None]
    return pres, hiddens, v, eff, clamped, out


def forward(net: EmbeddingNet, inputs: np.ndarray) -> np.ndarray:
    """Embed a batch; every output row has unit Euclidean norm."""
    return _trace(net, inputs)[-1]


def backward(net: EmbeddingNet, inputs: np.ndarray, grad_wrt_embeddings: np.ndarray) -> ParamGrads:
    """Exact gradients of <grad, forward(inputs)> w.r.t. all parameters.

    Gradient flows through the normalization with Jacobian (I - uu^T)/||v||
    per row (or I/floor for clamped rows when the epsilon floor is active).
    """
    pres, hiddens, _, eff, clamped, out = _trace(net, inputs)
    g = np.asarray(grad_wrt_embeddings, dtype=np.float64)
    if g.shape != out.shape:
        raise ValueError(f"upstream gradient shape {g.shape} does not match embeddings {out.shape}")

    radial = np.sum(g * out, axis=1, keepdims=True)
    delta = (g - radial * out) / eff[:, None]
    if np.any(clamped):
        # clamped rows divide by the constant floor: Jacobian is I/floor
        delta[clamped] = g[clamped] / eff[clamped, None]

    grad_w = [None] * net.n_layers
    grad_b = [None] * net.n_layers
    for layer in range(net.n_layers - 1, -1, -1):
        h_prev = hiddens[layer - 1] if layer > 0 else np.asarray(inputs, dtype=np.float64)
        grad_w[layer] = h_prev.T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ net.weights[layer].T) * (pres[layer - 1] > 0.0)
    return ParamGrads(weights=grad_w, biases=grad_b)


def sgd_step(net: EmbeddingNet, grads: ParamGrads, lr: float) -> EmbeddingNet:
    """theta_hat = theta - lr * grads; the input net is left untouched."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    grads.check_against(net)
    return EmbeddingNet(
        layer_dims=net.layer_dims,
        weights=[w - lr * gw for w, gw in zip(net.weights, grads.weights)],
        biases=[b - lr * gb for b, gb in zip(net.biases, grads.biases)],
        activation=net.activation,
        norm_floor=net.norm_floor,
    )


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    step: int
    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]


def init_adam(net: EmbeddingNet) -> AdamState:
    return AdamState(
        step=0,
        m_weights=[np.zeros_like(w) for w in net.weights],
        v_weights=[np.zeros_like(w) for w in net.weights],
        m_biases=[np.zeros_like(b) for b in net.biases],
        v_biases=[np.zeros_like(b) for b in net.biases],
    )


def adam_step(
    state: AdamState,
    net: EmbeddingNet,
    grads: ParamGrads,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[EmbeddingNet, AdamState]:
    """Standard Adam update with bias correction; pure in net and state."""
    grads.check_against(net)
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t

    def upd(param, g, m, v):
        m_new = beta1 * m + (1.0 - beta1) * g
        v_new = beta2 * v + (1.0 - beta2) * g * g
        step = lr * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
        return param - step, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for w, g, m, v in zip(net.weights, grads.weights, state.m_weights, state.v_weights):
        p, mn, vn = upd(w, g, m, v)
        new_w.append(p), new_mw.append(mn), new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for b, g, m, v in zip(net.biases, grads.biases, state.m_biases, state.v_biases):
        p, mn, vn = upd(b, g, m, v)
        new_b.append(p), new_mb.append(mn), new_vb.append(vn)

    new_net = EmbeddingNet(
        layer_dims=net.layer_dims,
        weights=new_w,
        biases=new_b,
        activation=net.activation,
        norm_floor=net.norm_floor,
    )
    new_state = AdamState(step=t, m_weights=new_mw, v_weights=new_vw, m_biases=new_mb, v_biases=new_vb)
    return new_net, new_state


# ---------------------------------------------------------------------------
# Parameter file format (version-tagged text container)
#
#   pairmine-params v1
#   meta {...one-line JSON...}
#   array <name> <dim0> <dim1...>
#   <one whitespace-separated line per row (or a single line for vectors)>
#   ...
#   end
#
# Values are written with repr(), which round-trips float64 exactly.
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 arrays plus a JSON metadata line."""
    lines = [PARAMS_MAGIC, "meta " + json.dumps(meta, sort_keys=True)]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
            lines.append(f"array {name} {a.shape[1]}")
        else:
            lines.append(f"array {name} {a.shape[0]} {a.shape[1]}")
        for row in a:
            lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of save_arrays; raises CheckpointFormatError on bad files."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no parameter file at {p}")
    lines = p.read_text().splitlines()
    if not lines or lines[0] != PARAMS_MAGIC:
        raise CheckpointFormatError(f"{p}: missing '{PARAMS_MAGIC}' header")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise CheckpointFormatError(f"{p}: missing meta line")
    try:
        meta = json.loads(lines[1][len("meta "):])
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{p}: bad meta JSON: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split()
        if parts[0] != "array" or len(parts) not in (3, 4):
            raise CheckpointFormatError(f"{p}: line {i + 1}: expected array header")
        name = parts[1]
        try:
            dims = [int(d) for d in parts[2:]]
        except ValueError as exc:
            raise CheckpointFormatError(f"{p}: line {i + 1}: bad shape") from exc
        nrows = dims[0] if len(dims) == 2 else 1
        rows = []
        for r in range(nrows):
            if i + 1 + r >= len(lines):
                raise CheckpointFormatError(f"{p}: array {name} truncated")
            try:
                rows.append([float(x) for x in lines[i + 1 + r].split()])
            except ValueError as exc:
                raise CheckpointFormatError(f"{p}: array {name} row {r}: bad value") from exc
        a = np.array(rows, dtype=np.float64)
        want = tuple(dims) if len(dims) == 2 else (1, dims[0])
        if a.shape != want:
            raise CheckpointFormatError(f"{p}: array {name} has shape {a.shape}, header says {want}")
        arrays[name] = a[0] if len(dims) == 1 else a
        i += 1 + nrows
    if i >= len(lines) or lines[i] != "end":
        raise CheckpointFormatError(f"{p}: missing 'end' terminator")
    return arrays, meta


def save_params(net: EmbeddingNet, path, extra_meta: dict | None = None,
                extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    meta = {
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "norm_floor": net.norm_floor,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays: dict[str, np.ndarray] = {}
    for layer in range(net.n_layers):
        arrays[f"W{layer}"] = net.weights[layer]
        arrays[f"b{layer}"] = net.biases[layer]
    if extra_arrays:
        arrays.update(extra_arrays)
    save_arrays(path, arrays, meta)


def load_params(path) -> tuple[EmbeddingNet, dict, dict[str, np.ndarray]]:
    """Rebuild a net from a parameter file; extra arrays are passed through."""
    arrays, meta = load_arrays(path)
    try:
        dims = tuple(int(d) for d in meta["layer_dims"])
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: meta is missing layer_dims") from exc
    weights, biases = [], []
    for layer in range(len(dims) - 1):
        try:
            weights.append(arrays.pop(f"W{layer}"))
            biases.append(arrays.pop(f"b{layer}"))
        except KeyError as exc:
            raise CheckpointFormatError(f"{path}: missing parameter array for layer {layer}") from exc
    net = EmbeddingNet(
        layer_dims=dims,
        weights=weights,
        biases=biases,
        activation=meta.get("activation", "relu"),
        norm_floor=float(meta.get("norm_floor", 0.0)),
    )
    return net, meta, arrays
