"""Dense Q-network with hand-written backprop, SGD/Adam and a binary weight format.

All parameters live in one contiguous float64 vector; each layer's weight and
bias arrays are views into it, so optimizer updates and target-network copies
are single vectorised operations. Weights are stored ``(fan_in, fan_out)`` and
applied as ``x @ W + b``.

Parameter order (also the on-disk order): hidden layers first, each as weight
then bias; then the output layer, or for a dueling head the value stream
``(H, 1)`` followed by the advantage stream ``(H, |A|)``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numba
import numpy as np

MAGIC = b"BSDQN1\n"


class FormatError(ValueError):
    """Malformed weight file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _layer_shapes(dims, dueling):
    shapes = []
    for fan_in, fan_out in zip(dims[:-2], dims[1:-1]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    h, n_out = dims[-2], dims[-1]
    if dueling:
        shapes += [(h, 1), (1,), (h, n_out), (n_out,)]
    else:
        shapes += [(h, n_out), (n_out,)]
    return shapes


def _views(flat, shapes):
    out, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(flat[pos : pos + size].reshape(shape))
        pos += size
    return out


class QNetwork:
    """Rectifier MLP mapping an encoded state to one Q-value per action."""

    def __init__(self, dims, dueling=False, flat=None):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid layer dimensions {dims}")
        if dueling and len(dims) < 3:
            raise ValueError("a dueling head needs at least one hidden layer")
        self.dims = dims
        self.dueling = bool(dueling)
        self.shapes = _layer_shapes(dims, self.dueling)
        n = sum(int(np.prod(s)) for s in self.shapes)
        if flat is None:
            flat = np.zeros(n)
        elif flat.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {flat.shape}")
        self.flat = np.ascontiguousarray(flat, dtype=np.float64)
        self.params = _views(self.flat, self.shapes)

    @property
    def n_hidden(self) -> int:
        return len(self.dims) - 2

    @property
    def n_params(self) -> int:
        return self.flat.size

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def copy(self) -> QNetwork:
        return QNetwork(self.dims, self.dueling, self.flat.copy())

    def load_from(self, other: QNetwork) -> None:
        self.flat[:] = other.flat

    def __call__(self, x):
        return forward(self, x)


def mlp_init(dims, seed=None, dueling=False) -> QNetwork:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if not dims:
        raise ValueError("dims must not be empty")
    net = QNetwork(dims, dueling)
    rng = np.random.default_rng(seed)
    for p in net.params:
        if p.ndim == 2:
            bound = 1.0 / np.sqrt(p.shape[0])
            p[...] = rng.uniform(-bound, bound, size=p.shape)
    return net


def _hidden(net: QNetwork, x) -> list:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"expected input of shape (batch, {net.input_dim}), got {x.shape}")
    acts = [x]
    h = x
    p = net.params
    for i in range(net.n_hidden):
        h = h @ p[2 * i] + p[2 * i + 1]
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    return acts


def forward_cached(net: QNetwork, x):
    """Forward pass that also returns the activations needed by :func:`backward`."""
    acts = _hidden(net, x)
    h = acts[-1]
    p = net.params
    k = 2 * net.n_hidden
    if net.dueling:
        value = h @ p[k] + p[k + 1]
        adv = h @ p[k + 2] + p[k + 3]
        q = value + (adv - adv.mean(axis=1, keepdims=True))
    else:
        q = h @ p[k] + p[k + 1]
    return q, acts


def forward_selected(net: QNetwork, x, actions):
    """Q-value of one action per row, skipping the rest of a wide output layer.

    Plain head only: a dueling head needs every advantage to centre them.
    Returns ``(q, acts)`` for :func:`backward_selected`.
    """
    if net.dueling:
        raise ValueError("forward_selected needs a plain output head")
    acts = _hidden(net, x)
    k = 2 * net.n_hidden
    w, b = net.params[k], net.params[k + 1]
    actions = np.asarray(actions)
    q = np.einsum("ij,ji->i", acts[-1], w[:, actions]) + b[actions]
    return q, acts


def forward(net: QNetwork, x) -> np.ndarray:
    """Q-values for a single state vector or a batch of them."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return forward_cached(net, x[None, :])[0][0]
    return forward_cached(net, x)[0]


def td_loss(pred_q, actions, targets):
    """Mean squared TD error on the taken actions.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``pred_q`` and is
    non-zero only at ``(i, actions[i])``.
    """
    pred_q = np.asarray(pred_q, dtype=np.float64)
    actions = np.asarray(actions)
    targets = np.asarray(targets, dtype=np.float64)
    if not (len(pred_q) == len(actions) == len(targets)):
        raise ValueError("batch sizes of predictions, actions and targets differ")
    rows = np.arange(len(actions))
    err = targets - pred_q[rows, actions]
    loss = float(np.mean(err * err))
    grad = np.zeros_like(pred_q)
    grad[rows, actions] = -2.0 * err / len(actions)
    return loss, grad


def _sparse_output(net: QNetwork, h, rows, cols, vals, g):
    # output-layer gradient when only a few (row, action) entries are non-zero
    k = 2 * net.n_hidden
    np.add.at(g[k].T, cols, vals[:, None] * h[rows])
    np.add.at(g[k + 1], cols, vals)
    dh = np.zeros_like(h)
    np.add.at(dh, rows, vals[:, None] * net.params[k].T[cols])
    return dh


def _hidden_backward(net: QNetwork, acts, dh, g) -> None:
    p = net.params
    for i in reversed(range(net.n_hidden)):
        dz = dh * (acts[i + 1] > 0)
        g[2 * i][...] = acts[i].T @ dz
        g[2 * i + 1][...] = dz.sum(axis=0)
        if i:
            dh = dz @ p[2 * i].T


def backward(net: QNetwork, acts, dout) -> np.ndarray:
    """Gradient of ``sum(dout * Q)`` w.r.t. every parameter, as a flat vector.

    ``acts`` comes from :func:`forward_cached`. The rectifier's subgradient at
    zero is taken as zero.
    """
    dout = np.asarray(dout, dtype=np.float64)
    grad = np.zeros_like(net.flat)
    g = _views(grad, net.shapes)
    p = net.params
    h = acts[-1]
    k = 2 * net.n_hidden
    if net.dueling:
        d_value = dout.sum(axis=1, keepdims=True)
        d_adv = dout - dout.mean(axis=1, keepdims=True)
        g[k][...] = h.T @ d_value
        g[k + 1][...] = d_value.sum(axis=0)
        g[k + 2][...] = h.T @ d_adv
        g[k + 3][...] = d_adv.sum(axis=0)
        dh = d_value @ p[k].T + d_adv @ p[k + 2].T
    else:
        rows, cols = np.nonzero(dout)
        if len(cols) * 4 < dout.size:
            # TD gradients touch one action per row; skip the dense product
            dh = _sparse_output(net, h, rows, cols, dout[rows, cols], g)
        else:
            g[k][...] = h.T @ dout
            g[k + 1][...] = dout.sum(axis=0)
            dh = dout @ p[k].T
    _hidden_backward(net, acts, dh, g)
    return grad


def backward_selected(net: QNetwork, acts, actions, dq) -> np.ndarray:
    """Gradient of ``sum_i dq[i] * Q(x_i, actions[i])``; pairs with :func:`forward_selected`."""
    dq = np.asarray(dq, dtype=np.float64)
    grad = np.zeros_like(net.flat)
    g = _views(grad, net.shapes)
    dh = _sparse_output(net, acts[-1], np.arange(len(dq)), np.asarray(actions), dq, g)
    _hidden_backward(net, acts, dh, g)
    return grad


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")

    def ensure(self, n: int) -> None:
        if self.kind == "adam" and self.m is None:
            self.m = np.zeros(n)
            self.v = np.zeros(n)


def sgd_step(net: QNetwork, grads, state: OptimizerState) -> QNetwork:
    net.flat -= state.lr * grads
    state.step += 1
    return net


@numba.njit(cache=True)
def _adam_kernel(flat, g, m, v, b1, b2, step_size, inv_root_c2, eps):
    # One fused pass. Bias corrections are folded into the step size and the
    # root, leaving one division and one square root per parameter.
    for i in range(flat.size):
        gi = g[i]
        mi = m[i] * b1 + gi * (1.0 - b1)
        vi = v[i] * b2 + (gi * gi) * (1.0 - b2)
        m[i] = mi
        v[i] = vi
        flat[i] -= step_size * mi / (np.sqrt(vi) * inv_root_c2 + eps)


def adam_step(net: QNetwork, grads, state: OptimizerState) -> QNetwork:
    state.ensure(net.n_params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1**state.step)
    inv_root_c2 = 1.0 / np.sqrt(1.0 - b2**state.step)
    _adam_kernel(net.flat, np.ascontiguousarray(grads, dtype=np.float64), state.m, state.v, b1, b2,
                 step_size, inv_root_c2, state.eps)
    return net


def optimizer_step(net: QNetwork, grads, state: OptimizerState) -> QNetwork:
    if state.kind == "sgd":
        return sgd_step(net, grads, state)
    return adam_step(net, grads, state)


def save_weights(net: QNetwork, state: OptimizerState | None = None) -> bytes:
    """Serialise parameters and optimizer state (little-endian float64)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    dims = ",".join(str(d) for d in net.dims)
    buf.write(f"layers={len(net.dims) - 1} dims={dims} dueling={int(net.dueling)}\n".encode())
    buf.write(net.flat.astype("<f8").tobytes())
    if state is None:
        buf.write(b"optimizer=none\n")
    else:
        line = (
            f"optimizer={state.kind} lr={state.lr!r} step={state.step} "
            f"beta1={state.beta1!r} beta2={state.beta2!r} eps={state.eps!r} "
            f"moments={int(state.m is not None)}\n"
        )
        buf.write(line.encode())
        if state.m is not None:
            buf.write(state.m.astype("<f8").tobytes())
            buf.write(state.v.astype("<f8").tobytes())
    return buf.getvalue()


def _read_line(data: bytes, pos: int, limit: int = 4096) -> tuple[str, int]:
    end = data.find(b"\n", pos, pos + limit)
    if end < 0:
        raise FormatError("unterminated header line", pos)
    try:
        return data[pos:end].decode("ascii"), end + 1
    except UnicodeDecodeError:
        raise FormatError("non-ASCII header", pos) from None


def _fields(line: str, pos: int) -> dict:
    out = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise FormatError(f"malformed header field {token!r}", pos)
        out[key] = value
    return out


def _floats(data: bytes, pos: int, count: int, what: str) -> tuple[np.ndarray, int]:
    end = pos + 8 * count
    if end > len(data):
        raise FormatError(f"truncated {what}: need {8 * count} bytes, have {len(data) - pos}", len(data))
    return np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64), end


def load_weights(data: bytes) -> tuple[QNetwork, OptimizerState | None]:
    """Inverse of :func:`save_weights`; raises :class:`FormatError` on bad input."""
    if not data.startswith(MAGIC):
        raise FormatError("bad magic", 0)
    pos = len(MAGIC)
    line, nxt = _read_line(data, pos)
    hdr = _fields(line, pos)
    try:
        dims = tuple(int(d) for d in hdr["dims"].split(","))
        n_layers = int(hdr["layers"])
        dueling = hdr["dueling"] == "1"
    except (KeyError, ValueError):
        raise FormatError(f"bad network header {line!r}", pos) from None
    if n_layers != len(dims) - 1:
        raise FormatError("layer count disagrees with dims", pos)
    try:
        net = QNetwork(dims, dueling)
    except ValueError as exc:
        raise FormatError(str(exc), pos) from None
    pos = nxt
    flat, pos = _floats(data, pos, net.n_params, "parameters")
    net.flat[:] = flat

    line, nxt = _read_line(data, pos)
    opt = _fields(line, pos)
    state = None
    kind = opt.get("optimizer")
    if kind not in ("none", "sgd", "adam"):
        raise FormatError(f"bad optimizer header {line!r}", pos)
    if kind != "none":
        try:
            state = OptimizerState(
                kind=kind,
                lr=float(opt["lr"]),
                step=int(opt["step"]),
                beta1=float(opt["beta1"]),
                beta2=float(opt["beta2"]),
                eps=float(opt["eps"]),
            )
            has_moments = opt["moments"] == "1"
        except (KeyError, ValueError):
            raise FormatError(f"bad optimizer header {line!r}", pos) from None
        pos = nxt
        if has_moments:
            state.m, pos = _floats(data, pos, net.n_params, "first moments")
            state.v, pos = _floats(data, pos, net.n_params, "second moments")
    else:
        pos = nxt
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", pos)
    return net, state


def save_file(path, net: QNetwork, state: OptimizerState | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(save_weights(net, state))


def load_file(path) -> tuple[QNetwork, OptimizerState | None]:
    with open(path, "rb") as fh:
        return load_weights(fh.read())
