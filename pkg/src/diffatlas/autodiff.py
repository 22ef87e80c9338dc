"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every op appends a node to a :class:`Tape`; nodes are stored in creation order
so reversing the list is a valid topological order and gradient
accumulation happens in a fixed sequence (deterministic). Only the
primitives the pipeline needs are provided.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from . import kernels


class Var:
    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.scale(self.tape.as_var(other), -1.0))

    def __rsub__(self, other):
        return self.tape.add(self.tape.scale(self, -1.0), other)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _fwd(op, xs, args):
    if op == "matmul":
        return xs[0] @ xs[1]
    if op == "add":
        return xs[0] + xs[1]
    if op == "mul":
        return xs[0] * xs[1]
    if op == "scale":
        return xs[0] * args
    if op == "relu":
        return np.maximum(xs[0], 0.0)
    if op == "tanh":
        return np.tanh(xs[0])
    if op == "sin":
        return np.sin(xs[0])
    if op == "cos":
        return np.cos(xs[0])
    if op == "sum":
        return np.asarray(xs[0].sum(axis=args))
    if op == "cols":
        return xs[0][:, args]
    if op == "concat":
        return np.concatenate(xs, axis=1)
    if op == "bilinear":
        tex, rect = args
        return kernels.bilinear_sample(tex, xs[0], rect)
    raise ValueError(f"unknown op {op!r}")


class Tape:
    """Computation record: leaves plus primitive nodes in creation order."""

    def __init__(self):
        self.nodes = []  # (op, input idxs, args)
        self.values = []
        self.needs = []  # does any trainable leaf feed this node?

    def _push(self, op, inputs, args, value):
        idx = len(self.nodes)
        self.nodes.append((op, tuple(v.idx for v in inputs), args))
        self.values.append(value)
        if op == "leaf":
            self.needs.append(args != "const")
        else:
            self.needs.append(any(self.needs[v.idx] for v in inputs))
        return Var(self, idx, value)

    def leaf(self, value, name=None):
        value = np.asarray(value, dtype=np.float64)
        return self._push("leaf", (), name, value)

    def as_var(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.leaf(x, "const")

    def _apply(self, op, inputs, args=None):
        inputs = [self.as_var(x) for x in inputs]
        value = _fwd(op, [v.value for v in inputs], args)
        return self._push(op, inputs, args, value)

    def matmul(self, a, b):
        return self._apply("matmul", (a, b))

    def add(self, a, b):
        return self._apply("add", (a, b))

    def mul(self, a, b):
        return self._apply("mul", (a, b))

    def scale(self, a, c):
        return self._apply("scale", (a,), float(c))

    def relu(self, a):
        return self._apply("relu", (a,))

    def tanh(self, a):
        return self._apply("tanh", (a,))

    def sin(self, a):
        return self._apply("sin", (a,))

    def cos(self, a):
        return self._apply("cos", (a,))

    def sum(self, a, axis=None):
        return self._apply("sum", (a,), axis)

    def mean(self, a):
        return self.scale(self.sum(a), 1.0 / a.value.size)

    def cols(self, a, sl):
        return self._apply("cols", (a,), sl)

    def concat(self, xs):
        return self._apply("concat", tuple(xs))

    def bilinear(self, tex, uv, rect=(-1.0, 1.0, -1.0, 1.0)):
        """Sample a constant texture at differentiable ``uv``."""
        return self._apply("bilinear", (uv,), (np.ascontiguousarray(tex, dtype=np.float64), tuple(rect)))

    def relu_pattern(self):
        """Sign pattern of every ReLU input; used to detect kinks in probes."""
        return [self.values[ins[0]] > 0 for op, ins, _ in self.nodes if op == "relu"]

    def replay(self):
        """Recompute every node value from the recorded leaves."""
        vals = []
        for op, ins, args in self.nodes:
            if op == "leaf":
                vals.append(self.values[len(vals)])
            else:
                vals.append(_fwd(op, [vals[i] for i in ins], args))
        return vals

    def backward(self, loss, seed=None):
        """Return gradients for every node reachable from ``loss``.

        ``seed`` overrides the upstream gradient (useful for injecting a
        vector-Jacobian product such as the SDS residual); otherwise ``loss``
        must be a scalar.
        """
        if seed is None:
            if loss.value.size != 1:
                raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
            seed = np.ones_like(loss.value)
        grads = [None] * len(self.nodes)
        grads[loss.idx] = np.asarray(seed, dtype=np.float64).reshape(loss.value.shape)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            op, ins, args = self.nodes[idx]
            if op == "leaf":
                continue
            xs = [self.values[i] for i in ins]
            need = tuple(self.needs[i] for i in ins)
            for i, gi, ni in zip(ins, _vjp(op, xs, self.values[idx], args, g, need), need):
                if gi is None or not ni:
                    continue
                if i >= idx:
                    raise RuntimeError("tape order violated")
                grads[i] = gi if grads[i] is None else grads[i] + gi
        return grads


def _vjp(op, xs, out, args, g, need=(True, True)):
    if op == "matmul":
        a, b = xs
        return (g @ b.T if need[0] else None), (a.T @ g if need[1] else None)
    if op == "add":
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)
    if op == "mul":
        a, b = xs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if op == "scale":
        return (g * args,)
    if op == "relu":
        # derivative at exactly 0 is taken as 0
        return (g * (xs[0] > 0),)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "sin":
        return (g * np.cos(xs[0]),)
    if op == "cos":
        return (-g * np.sin(xs[0]),)
    if op == "sum":
        if args is None:
            return (np.broadcast_to(g, xs[0].shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, args), xs[0].shape).copy(),)
    if op == "cols":
        full = np.zeros_like(xs[0])
        full[:, args] = g
        return (full,)
    if op == "concat":
        out_g, start = [], 0
        for x in xs:
            out_g.append(g[:, start:start + x.shape[1]])
            start += x.shape[1]
        return tuple(out_g)
    if op == "bilinear":
        tex, rect = args
        return (kernels.bilinear_grad_uv(tex, xs[0], g, rect),)
    raise ValueError(f"unknown op {op!r}")


class Mlp:
    """Fully connected network: ReLU between hidden layers, chosen output activation."""

    def __init__(self, sizes, out_act="tanh", rng=None, seed=0):
        if out_act not in ("tanh", "identity"):
            raise ValueError(f"unsupported output activation {out_act!r}")
        if len(sizes) < 2:
            raise ValueError("need at least input and output width")
        rng = np.random.default_rng(seed) if rng is None else rng
        self.sizes = list(sizes)
        self.out_act = out_act
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(1.0 / fan_in)
            self.params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, (1, fan_out)))

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.out_act = self.out_act
        other.params = [p.copy() for p in self.params]
        return other

    def zero_(self):
        for p in self.params:
            p[...] = 0.0
        return self

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input of width {self.n_in}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")

    def __call__(self, x):
        """Evaluate without recording (inference path)."""
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        n_layers = len(self.params) // 2
        h = x
        for li in range(n_layers):
            h = h @ self.params[2 * li] + self.params[2 * li + 1]
            if li < n_layers - 1:
                h = np.maximum(h, 0.0)
        return np.tanh(h) if self.out_act == "tanh" else h

    def record(self, tape, x, pvars=None):
        """Evaluate on ``tape``; returns (output Var, parameter Vars).

        Pass ``pvars`` from an earlier call to share parameter leaves so the
        gradients of several evaluations accumulate in one place.
        """
        if isinstance(x, Var):
            self._check(x.value)
        else:
            x = np.asarray(x, dtype=np.float64)
            self._check(x)
        if pvars is None:
            pvars = [tape.leaf(p, "param") for p in self.params]
        n_layers = len(self.params) // 2
        h = x
        for li in range(n_layers):
            h = tape.add(tape.matmul(h, pvars[2 * li]), pvars[2 * li + 1])
            if li < n_layers - 1:
                h = tape.relu(h)
        if self.out_act == "tanh":
            h = tape.tanh(h)
        return h, pvars


def mlp_forward(net, inputs):
    return net(inputs)


def param_grads(grads, pvars):
    """Gradients for a network's parameter Vars (zeros where unreachable)."""
    return [np.zeros_like(v.value) if grads[v.idx] is None else grads[v.idx] for v in pvars]


class Adam:
    """Adam with bias correction; owns moment buffers for one parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        for i, g in enumerate(grads):
            if g.shape != self.params[i].shape:
                raise ValueError(f"gradient {i} has shape {g.shape}, expected {self.params[i].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise FloatingPointError(f"non-finite gradient at step {self.t + 1}: parameter {i}, {bad} bad entries")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state):
    state.step(grads)
    return params, state


def finite_diff_check(nets, loss_fn, probes=20, eps=1e-4, seed=0, floor=1e-6):
    """Compare tape gradients with central differences on random parameter entries.

    ``loss_fn(tape)`` must evaluate the loss on a fresh tape and return
    ``(loss Var, list of parameter Vars in the same order as the flattened
    params of nets)``. Probes whose +/- perturbation changes any ReLU sign
    pattern are skipped (kink). Returns a dict with ``max_rel_err``,
    ``checked`` and ``skipped``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    if isinstance(nets, Mlp):
        nets = [nets]
    params = [p for net in nets for p in net.params]
    tape = Tape()
    loss, pvars = loss_fn(tape)
    grads = param_grads(tape.backward(loss), pvars)
    base_pattern = tape.relu_pattern()
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    sizes = np.array([p.size for p in params], dtype=float)
    for _ in range(probes):
        pi = rng.choice(len(params), p=sizes / sizes.sum())
        flat = rng.integers(params[pi].size)
        idx = np.unravel_index(flat, params[pi].shape)
        orig = params[pi][idx]
        vals, kink = [], False
        for sign in (1.0, -1.0):
            params[pi][idx] = orig + sign * eps
            t = Tape()
            lv, _ = loss_fn(t)
            vals.append(float(lv.value))
            pat = t.relu_pattern()
            if any(not np.array_equal(a, b) for a, b in zip(pat, base_pattern)):
                kink = True
        params[pi][idx] = orig
        if kink:
            skipped += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * eps)
        analytic = float(grads[pi][idx])
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
        worst = max(worst, rel)
        checked += 1
    return {"max_rel_err": worst, "checked": checked, "skipped": skipped}


# --- checkpoint container ---------------------------------------------------
#
# Little-endian layout:
#   magic  b"DATLCKPT"         8 bytes
#   version                    u32 (=1)
#   seed                       u64
#   step                       u64
#   meta_len                   u32, followed by meta_len bytes of UTF-8 JSON
#   n_networks                 u32
#   per network:
#     name_len u16, name (UTF-8)
#     out_act_len u16, out_act (UTF-8)
#     n_layers u32
#     per layer: fan_in u32, fan_out u32,
#                weights fan_in*fan_out f64 (row-major), bias fan_out f64

MAGIC = b"DATLCKPT"


def save_checkpoint(path, nets, seed=0, step=0, meta=None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQQ", 1, int(seed), int(step)))
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(nets)))
    for name, net in nets.items():
        nb, ab = name.encode(), net.out_act.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<H", len(ab)) + ab)
        n_layers = len(net.params) // 2
        buf.write(struct.pack("<I", n_layers))
        for li in range(n_layers):
            W, b = net.params[2 * li], net.params[2 * li + 1]
            buf.write(struct.pack("<II", *W.shape))
            buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (dict name -> Mlp, seed, step, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    version, seed, step = struct.unpack_from("<IQQ", data, off)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 20
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (n_nets,) = struct.unpack_from("<I", data, off)
    off += 4
    nets = {}
    for _ in range(n_nets):
        (ln,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        (la,) = struct.unpack_from("<H", data, off)
        out_act = data[off + 2:off + 2 + la].decode()
        off += 2 + la
        (n_layers,) = struct.unpack_from("<I", data, off)
        off += 4
        params, sizes = [], []
        for _ in range(n_layers):
            fan_in, fan_out = struct.unpack_from("<II", data, off)
            off += 8
            W = np.frombuffer(data, "<f8", fan_in * fan_out, off).reshape(fan_in, fan_out).astype(np.float64)
            off += 8 * fan_in * fan_out
            b = np.frombuffer(data, "<f8", fan_out, off).reshape(1, fan_out).astype(np.float64)
            off += 8 * fan_out
            params += [W, b]
            if not sizes:
                sizes.append(fan_in)
            sizes.append(fan_out)
        net = Mlp.__new__(Mlp)
        net.sizes, net.out_act, net.params = sizes, out_act, params
        nets[name] = net
    return nets, seed, step, meta
