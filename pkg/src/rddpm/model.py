"""Multilayer perceptron score network with hand-written backpropagation.

The network maps ``(x, t/T)`` in ``R^(n+1)`` to ``R^n``. Hidden layers use
SiLU; the last layer is linear and starts at zero so that an untrained model
gives the zero score. Parameters are float64 throughout.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

CKPT_HEADER = "rddpm-ckpt v1"


def sigmoid(z):
    # tanh form: overflow-free and faster than exp-based expressions
    out = np.multiply(z, 0.5)
    if np.ndim(out) == 0:
        return 0.5 * (np.tanh(out) + 1.0)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


def silu(z):
    return z * sigmoid(z)


def silu_grad(z, sig=None):
    sig = sigmoid(z) if sig is None else sig
    out = 1.0 - sig
    out *= z
    out += 1.0
    out *= sig
    return out


class ScoreNet:
    """MLP ``s_theta(x, t)`` with an exponential moving average shadow.

    Args:
        n: Ambient dimension (input ``n + 1``, output ``n``).
        hidden: Widths of the hidden layers; empty gives one linear layer.
        rng: Generator for the Glorot-uniform hidden-layer initialization.
        ema_decay: Decay of the shadow parameters.
    """

    #: Rows per chunk when evaluating large batches without a cache.
    chunk_rows = 1024

    def __init__(self, n: int, hidden: Sequence[int] = (64, 64), rng: Optional[np.random.Generator] = None,
                 ema_decay: float = 0.999):
        if n < 1:
            raise ValueError("n must be positive")
        if any(int(w) < 1 for w in hidden):
            raise ValueError("hidden widths must be positive")
        if not (0.0 <= ema_decay < 1.0):
            raise ValueError("ema_decay must lie in [0, 1)")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n = int(n)
        self.hidden = tuple(int(w) for w in hidden)
        self.ema_decay = float(ema_decay)
        widths = self.widths
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if i == len(widths) - 2:
                w = np.zeros((a, b))
            else:
                lim = np.sqrt(6.0 / (a + b))
                w = rng.uniform(-lim, lim, size=(a, b))
            self.weights.append(w)
            self.biases.append(np.zeros(b))
        self.ema_weights = [w.copy() for w in self.weights]
        self.ema_biases = [b.copy() for b in self.biases]

    @property
    def widths(self):
        return (self.n + 1,) + self.hidden + (self.n,)

    def params(self, use_ema: bool = False) -> List[np.ndarray]:
        """Parameters in the order ``W0, b0, W1, b1, ...`` (live arrays, not copies)."""
        ws, bs = (self.ema_weights, self.ema_biases) if use_ema else (self.weights, self.biases)
        out = []
        for w, b in zip(ws, bs):
            out += [w, b]
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.n:
            raise ValueError(f"expected points of dimension {self.n}, got {x.shape[-1]}")
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
        return np.concatenate([x, t[:, None]], axis=1)

    def forward(self, x, t, use_ema: bool = False, return_cache: bool = False):
        """Evaluate the score at points ``x`` (``(n,)`` or ``(B, n)``) and normalized time ``t``.

        With ``return_cache`` the pre-activations needed by :meth:`backward`
        are returned as a second value.
        """
        single = np.asarray(x).ndim == 1
        ws, bs = (self.ema_weights, self.ema_biases) if use_ema else (self.weights, self.biases)
        h = self._inputs(x, t)
        if not return_cache and h.shape[0] > self.chunk_rows:
            return np.concatenate([self._plain(h[i:i + self.chunk_rows], ws, bs)
                                   for i in range(0, h.shape[0], self.chunk_rows)])
        acts = [h]
        pre = []
        for i, (w, b) in enumerate(zip(ws, bs)):
            z = h @ w
            z += b
            if i < len(ws) - 1:
                sig = sigmoid(z)
                pre.append((z, sig))
                h = z * sig
            else:
                h = z
            acts.append(h)
        out = h[0] if single else h
        if return_cache:
            return out, (acts, pre, use_ema)
        return out

    def _plain(self, h, ws, bs):
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = h @ w + b
            if i < len(ws) - 1:
                h *= sigmoid(h)
        return h

    def __call__(self, x, t, use_ema: bool = False):
        return self.forward(x, t, use_ema)

    def backward(self, cache, grad_out) -> List[np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` with respect to the parameters.

        Returned in the order of :meth:`params`.
        """
        acts, pre, use_ema = cache
        ws = self.ema_weights if use_ema else self.weights
        delta = np.atleast_2d(np.asarray(grad_out, dtype=float))
        grads = [None] * (2 * len(ws))
        for i in range(len(ws) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                z, sig = pre[i - 1]
                delta = delta @ ws[i].T
                delta *= silu_grad(z, sig)
        return grads

    def copy(self) -> "ScoreNet":
        other = ScoreNet.__new__(ScoreNet)
        other.n, other.hidden, other.ema_decay = self.n, self.hidden, self.ema_decay
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.ema_weights = [w.copy() for w in self.ema_weights]
        other.ema_biases = [b.copy() for b in self.ema_biases]
        return other


def ema_update(net: ScoreNet) -> None:
    """``shadow <- decay * shadow + (1 - decay) * live`` for every parameter."""
    a = net.ema_decay
    for s, p in zip(net.params(use_ema=True), net.params()):
        s *= a
        s += (1.0 - a) * p


@dataclass
class AdamState:
    """Adam moments and constants; ``clip_norm`` bounds the global gradient norm."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    step_count: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0 or self.clip_norm <= 0 or self.eps <= 0:
            raise ValueError("lr, clip_norm and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @classmethod
    def for_net(cls, net: ScoreNet, **kw) -> "AdamState":
        st = cls(**kw)
        st.m = [np.zeros_like(p) for p in net.params()]
        st.v = [np.zeros_like(p) for p in net.params()]
        return st


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, clip_norm: float):
    """Rescale the whole gradient to norm ``clip_norm`` if it is longer."""
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def adam_step(state: AdamState, net: ScoreNet, grads) -> float:
    """Clip, then apply one bias-corrected Adam update in place.

    Returns the gradient norm before clipping.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in net.params()]
        state.v = [np.zeros_like(p) for p in net.params()]
    grads, norm = clip_gradients(grads, state.clip_norm)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(net.params(), grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if not all(np.all(np.isfinite(p)) for p in net.params()):
        raise FloatingPointError("non-finite parameters after Adam update")
    return norm


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _write_block(fh, name, arr):
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    if arr.ndim != 2:
        arr = arr.reshape(arr.shape[0], -1)
    fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
    for row in arr:
        fh.write(" ".join("%.17g" % v for v in row) + "\n")


def save_checkpoint(path, net: ScoreNet, opt: Optional[AdamState] = None, extra: Optional[dict] = None) -> None:
    """Write the text checkpoint: live and EMA parameters, Adam moments, metadata.

    Each tensor is a block ``name rows cols`` followed by ``rows`` lines of
    row-major values with 17 significant digits. Biases are stored as 1-row
    blocks. ``extra`` holds additional scalar metadata.
    """
    opt = AdamState.for_net(net) if opt is None else opt
    meta = {
        "n": net.n,
        "ema_decay": net.ema_decay,
        "step_count": opt.step_count,
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "clip_norm": opt.clip_norm,
    }
    meta.update(extra or {})
    with open(path, "w") as fh:
        fh.write(CKPT_HEADER + "\n")
        _write_block(fh, "hidden", np.array(net.hidden, dtype=float).reshape(1, -1) if net.hidden else np.zeros((0, 0)))
        for key, val in meta.items():
            _write_block(fh, f"meta.{key}", [[float(val)]])
        for tag, plist in (("param", net.params()), ("ema", net.params(use_ema=True)),
                           ("adam_m", opt.m), ("adam_v", opt.v)):
            for i, p in enumerate(plist):
                _write_block(fh, f"{tag}.{i}", p)


def _read_blocks(path):
    blocks = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CKPT_HEADER:
            raise ValueError(f"{path}: not an rddpm checkpoint (header {header!r})")
        while True:
            line = fh.readline()
            if not line:
                break
            if not line.strip():
                continue
            name, rows, cols = line.split()
            rows, cols = int(rows), int(cols)
            data = [fh.readline().split() for _ in range(rows)]
            arr = np.array(data, dtype=float).reshape(rows, cols)
            blocks[name] = arr
    return blocks


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        Tuple ``(net, opt, meta)``.
    """
    blocks = _read_blocks(path)
    meta = {k[5:]: float(v[0, 0]) for k, v in blocks.items() if k.startswith("meta.")}
    hidden = tuple(int(w) for w in blocks["hidden"].ravel())
    net = ScoreNet(int(meta["n"]), hidden, np.random.default_rng(0), meta["ema_decay"])
    nparam = len(net.params())

    def grab(tag, like):
        out = []
        for i, ref in enumerate(like):
            arr = blocks[f"{tag}.{i}"]
            out.append(arr.reshape(ref.shape).copy())
        return out

    for dst, src in zip(net.params(), grab("param", net.params())):
        dst[...] = src
    for dst, src in zip(net.params(use_ema=True), grab("ema", net.params())):
        dst[...] = src
    opt = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
                    clip_norm=meta["clip_norm"], step_count=int(meta["step_count"]))
    if f"adam_m.{nparam - 1}" in blocks:
        opt.m = grab("adam_m", net.params())
        opt.v = grab("adam_v", net.params())
    else:
        opt.m = [np.zeros_like(p) for p in net.params()]
        opt.v = [np.zeros_like(p) for p in net.params()]
    return net, opt, meta
