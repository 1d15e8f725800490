"""Small feed-forward networks with hand-written exact gradients.

Three network kinds cover every model in this package:

* ``Mlp`` over ``Dense`` layers -- critics, actors, VAE halves, dynamics.
* ``Mlp`` over ``NoisyDense`` layers -- perturbation model whose effective
  weight is ``mu + sigma * eps`` with a learnable noise scale.
* ``Icnn`` -- scalar-valued network convex in its input (non-negative
  convex-path weights, smoothed-ReLU activations).

Everything is double precision numpy. Forward passes return a tape; the
matching backward pass produces analytic gradients for parameters and
inputs. ``Icnn`` additionally supports a forward-tangent pass plus a
backward over that augmented computation, which is what the Lyapunov
machinery needs to differentiate directional derivatives with respect to
the network parameters.
"""

from __future__ import annotations

import json
import math

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "smoothed_relu")


class GradientError(RuntimeError):
    """Raised when an optimizer step receives non-finite gradients."""


class TapeError(RuntimeError):
    """Raised when a backward pass is given a stale or foreign tape."""


# ---------------------------------------------------------------------------
# activations


def smoothed_relu(x, l):
    """ReLU with a quadratic blend on [0, l]; C^1 everywhere.

    0 for x <= 0, x^2/(2l) for 0 < x < l, x - l/2 above.
    """
    if l <= 0:
        raise ValueError(f"quadratic-region width must be positive, got {l}")
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.0, 0.0, np.where(x < l, x * x / (2.0 * l), x - 0.5 * l))


def smoothed_relu_grad(x, l):
    if l <= 0:
        raise ValueError(f"quadratic-region width must be positive, got {l}")
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.0, 0.0, np.where(x < l, x / l, 1.0))


def smoothed_relu_curv(x, l):
    # second derivative, defined away from the two kink points
    x = np.asarray(x, dtype=float)
    return np.where((x > 0.0) & (x < l), 1.0 / l, 0.0)


def act_forward(tag, z, l=None):
    if tag == "identity":
        return z
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "smoothed_relu":
        return smoothed_relu(z, l)
    raise ValueError(f"unknown activation {tag!r}")


def act_grad(tag, z, y, l=None):
    if tag == "identity":
        return np.ones_like(z)
    if tag == "relu":
        return (z > 0.0).astype(float)
    if tag == "tanh":
        return 1.0 - y * y
    if tag == "smoothed_relu":
        return smoothed_relu_grad(z, l)
    raise ValueError(f"unknown activation {tag!r}")


def act_curv(tag, z, y, l=None):
    if tag == "identity" or tag == "relu":
        return np.zeros_like(z)
    if tag == "tanh":
        return -2.0 * y * (1.0 - y * y)
    if tag == "smoothed_relu":
        return smoothed_relu_curv(z, l)
    raise ValueError(f"unknown activation {tag!r}")


# ---------------------------------------------------------------------------
# factored parameter noise


def _signed_sqrt(x):
    return np.sign(x) * np.sqrt(np.abs(x))


def factored_noise(e_in, e_out):
    """Rank-one noise matrix f(e_out) f(e_in)^T with f(x) = sign(x) sqrt|x|."""
    f_in = _signed_sqrt(np.asarray(e_in, dtype=float))
    f_out = _signed_sqrt(np.asarray(e_out, dtype=float))
    return np.outer(f_out, f_in), f_out


def sample_factored_noise(p, q, rng):
    """Draw factored Gaussian noise for a q x p layer: (eps_w, eps_b).

    Draw order is input factor first, then output factor; deterministic for
    a fixed generator state.
    """
    if p < 1 or q < 1:
        raise ValueError(f"layer dims must be >= 1, got p={p}, q={q}")
    e_in = rng.standard_normal(p)
    e_out = rng.standard_normal(q)
    eps_w, eps_b = factored_noise(e_in, e_out)
    return eps_w, eps_b


# ---------------------------------------------------------------------------
# layers


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


class Dense:
    """Affine map plus elementwise activation: y = f(w x + b)."""

    kind = "dense"

    def __init__(self, w, b, act="identity", smooth_l=0.1):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        self.w = np.asarray(w, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.act = act
        self.smooth_l = float(smooth_l)

    @property
    def in_dim(self):
        return self.w.shape[1]

    @property
    def out_dim(self):
        return self.w.shape[0]

    def weight_for_forward(self, noisy):
        return self.w, self.b

    def forward(self, x, noisy=True):
        w, b = self.weight_for_forward(noisy)
        z = x @ w.T + b
        y = act_forward(self.act, z, self.smooth_l)
        return y, (x, z, y)

    def backward(self, tape, gy, noisy=True):
        x, z, y = tape
        gz = gy * act_grad(self.act, z, y, self.smooth_l)
        grads = {"w": gz.T @ x, "b": gz.sum(axis=0)}
        w, _ = self.weight_for_forward(noisy)
        gx = gz @ w
        return gx, grads

    def param_items(self):
        return [("w", self.w), ("b", self.b)]

    def to_dict(self):
        return {
            "kind": self.kind,
            "act": self.act,
            "smooth_l": self.smooth_l,
            "w": self.w.tolist(),
            "b": self.b.tolist(),
        }


class NoisyDense:
    """Dense layer whose effective weight is mu + sigma * eps (elementwise).

    ``eps`` is the currently sampled noise; with eps == 0 (or noisy=False)
    the layer reduces exactly to a plain dense layer with weights mu.
    """

    kind = "noisy_dense"

    def __init__(self, mu_w, sigma_w, mu_b, sigma_b, act="identity", smooth_l=0.1):
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        self.mu_w = np.asarray(mu_w, dtype=float)
        self.sigma_w = np.asarray(sigma_w, dtype=float)
        self.mu_b = np.asarray(mu_b, dtype=float)
        self.sigma_b = np.asarray(sigma_b, dtype=float)
        self.eps_w = np.zeros_like(self.mu_w)
        self.eps_b = np.zeros_like(self.mu_b)
        self.act = act
        self.smooth_l = float(smooth_l)

    @property
    def in_dim(self):
        return self.mu_w.shape[1]

    @property
    def out_dim(self):
        return self.mu_w.shape[0]

    def resample(self, rng):
        self.eps_w, self.eps_b = sample_factored_noise(self.in_dim, self.out_dim, rng)

    def zero_noise(self):
        self.eps_w = np.zeros_like(self.mu_w)
        self.eps_b = np.zeros_like(self.mu_b)

    def weight_for_forward(self, noisy):
        if not noisy:
            return self.mu_w, self.mu_b
        return self.mu_w + self.sigma_w * self.eps_w, self.mu_b + self.sigma_b * self.eps_b

    forward = Dense.forward

    def backward(self, tape, gy, noisy=True):
        x, z, y = tape
        gz = gy * act_grad(self.act, z, y, self.smooth_l)
        gw = gz.T @ x
        gb = gz.sum(axis=0)
        if noisy:
            grads = {
                "mu_w": gw,
                "sigma_w": self.eps_w * gw,
                "mu_b": gb,
                "sigma_b": self.eps_b * gb,
            }
        else:
            grads = {
                "mu_w": gw,
                "sigma_w": np.zeros_like(self.sigma_w),
                "mu_b": gb,
                "sigma_b": np.zeros_like(self.sigma_b),
            }
        w, _ = self.weight_for_forward(noisy)
        gx = gz @ w
        return gx, grads

    def param_items(self):
        return [
            ("mu_w", self.mu_w),
            ("sigma_w", self.sigma_w),
            ("mu_b", self.mu_b),
            ("sigma_b", self.sigma_b),
        ]

    def to_dict(self):
        return {
            "kind": self.kind,
            "act": self.act,
            "smooth_l": self.smooth_l,
            "mu_w": self.mu_w.tolist(),
            "sigma_w": self.sigma_w.tolist(),
            "mu_b": self.mu_b.tolist(),
            "sigma_b": self.sigma_b.tolist(),
            "eps_w": self.eps_w.tolist(),
            "eps_b": self.eps_b.tolist(),
        }


def _layer_from_dict(d):
    if d["kind"] == "dense":
        return Dense(d["w"], d["b"], act=d["act"], smooth_l=d["smooth_l"])
    if d["kind"] == "noisy_dense":
        layer = NoisyDense(
            d["mu_w"], d["sigma_w"], d["mu_b"], d["sigma_b"],
            act=d["act"], smooth_l=d["smooth_l"],
        )
        layer.eps_w = np.asarray(d["eps_w"], dtype=float)
        layer.eps_b = np.asarray(d["eps_b"], dtype=float)
        return layer
    raise ValueError(f"unknown layer kind {d['kind']!r}")


# ---------------------------------------------------------------------------
# multilayer perceptron


class Mlp:
    """A stack of Dense / NoisyDense layers with chained dimensions."""

    kind = "mlp"

    def __init__(self, layers):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )
        self.layers = layers
        self.version = 0

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def forward(self, x, noisy=True):
        x, single = _as_batch(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != net dim {self.in_dim}")
        records = []
        h = x
        for layer in self.layers:
            h, rec = layer.forward(h, noisy=noisy)
            records.append(rec)
        tape = (self, self.version, records, noisy, single)
        return (h[0] if single else h), tape

    def backward(self, tape, gy):
        net, version, records, noisy, single = tape
        if net is not self or version != self.version:
            raise TapeError("tape does not match this network's current parameters")
        gy = np.asarray(gy, dtype=float)
        if single:
            gy = gy[None, :]
        grads = [None] * len(self.layers)
        g = gy
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(records[i], g, noisy=noisy)
        return (g[0] if single else g), grads

    def resample_noise(self, rng):
        for layer in self.layers:
            if isinstance(layer, NoisyDense):
                layer.resample(rng)

    def zero_noise(self):
        for layer in self.layers:
            if isinstance(layer, NoisyDense):
                layer.zero_noise()

    def param_items(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.param_items():
                out.append((f"{i}.{name}", arr))
        return out

    def clamp_constraints(self):
        pass

    def bump(self):
        self.version += 1

    def to_dict(self):
        return {"kind": self.kind, "layers": [l.to_dict() for l in self.layers]}


# ---------------------------------------------------------------------------
# input-convex network


class Icnn:
    """Scalar-output network convex in its input.

    Layout for hidden sizes (h1, .., hk) on an n-dim input:

        z1   = act(W0 x + b0)
        z2   = act(U1 z1 + W1 x + b1)        U*: elementwise >= 0
        ...
        g(x) = U_k z_k + W_k x + b_k          (scalar)

    Convexity needs non-negative U and a convex non-decreasing activation;
    the smoothed ReLU qualifies and keeps g twice differentiable almost
    everywhere, which the tangent-backward pass relies on.
    """

    kind = "icnn"

    def __init__(self, w_in, u_hid, biases, smooth_l=0.1):
        if smooth_l <= 0:
            raise ValueError("smoothed-ReLU width must be positive")
        self.w_in = [np.asarray(w, dtype=float) for w in w_in]
        self.u_hid = [np.asarray(u, dtype=float) for u in u_hid]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.smooth_l = float(smooth_l)
        self.version = 0
        if len(self.w_in) != len(self.u_hid) + 1 or len(self.w_in) != len(self.biases):
            raise ValueError("inconsistent ICNN layer lists")

    @property
    def in_dim(self):
        return self.w_in[0].shape[1]

    @property
    def out_dim(self):
        return 1

    def forward(self, x, noisy=True):
        x, single = _as_batch(x)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != net dim {self.in_dim}")
        l = self.smooth_l
        pre = []
        acts = []
        z = None
        last = len(self.w_in) - 1
        for k, (w, b) in enumerate(zip(self.w_in, self.biases)):
            t = x @ w.T + b
            if k > 0:
                t = t + acts[-1] @ self.u_hid[k - 1].T
            pre.append(t)
            if k < last:
                acts.append(smoothed_relu(t, l))
            else:
                z = t[:, 0]
        tape = (self, self.version, x, pre, acts, single)
        return (float(z[0]) if single else z), tape

    def backward(self, tape, gy, need_params=True):
        """Gradients of sum(gy * g) w.r.t. input and (optionally) parameters."""
        net, version, x, pre, acts, single = tape
        if net is not self or version != self.version:
            raise TapeError("tape does not match this network's current parameters")
        l = self.smooth_l
        gy = np.asarray(gy, dtype=float)
        if single:
            gy = gy.reshape(1)
        last = len(self.w_in) - 1
        gw = [None] * len(self.w_in)
        gu = [None] * len(self.u_hid)
        gb = [None] * len(self.biases)
        gt = gy[:, None]  # adjoint of the final pre-activation (B, 1)
        gx = np.zeros_like(x)
        for k in range(last, -1, -1):
            if need_params:
                gw[k] = gt.T @ x
                gb[k] = gt.sum(axis=0)
                if k > 0:
                    gu[k - 1] = gt.T @ acts[k - 1]
            gx += gt @ self.w_in[k]
            if k > 0:
                gz = gt @ self.u_hid[k - 1]
                gt = gz * smoothed_relu_grad(pre[k - 1], l)
        grads = None
        if need_params:
            grads = {}
            for k in range(len(self.w_in)):
                grads[f"w{k}"] = gw[k]
                grads[f"b{k}"] = gb[k]
            for k in range(len(self.u_hid)):
                grads[f"u{k}"] = gu[k]
        return (gx[0] if single else gx), grads

    def input_grad(self, tape):
        gx, _ = self.backward(tape, np.ones(tape[2].shape[0]), need_params=False)
        return gx

    def forward_tangent(self, x, v):
        """Primal and directional-derivative forward: returns g, dg/dt along v."""
        x, single = _as_batch(x)
        v, _ = _as_batch(v)
        l = self.smooth_l
        pre, dpre, acts, dacts = [], [], [], []
        last = len(self.w_in) - 1
        g = dg = None
        for k, (w, b) in enumerate(zip(self.w_in, self.biases)):
            t = x @ w.T + b
            dt = v @ w.T
            if k > 0:
                t = t + acts[-1] @ self.u_hid[k - 1].T
                dt = dt + dacts[-1] @ self.u_hid[k - 1].T
            pre.append(t)
            dpre.append(dt)
            if k < last:
                acts.append(smoothed_relu(t, l))
                dacts.append(smoothed_relu_grad(t, l) * dt)
            else:
                g, dg = t[:, 0], dt[:, 0]
        tape = (self, self.version, x, v, pre, dpre, acts, dacts, single)
        if single:
            return float(g[0]), float(dg[0]), tape
        return g, dg, tape

    def backward_tangent(self, tape, gy, gydot):
        """Parameter gradients of sum(gy * g + gydot * dg) for a tangent tape.

        Differentiates the augmented computation of ``forward_tangent``; the
        gydot path carries second-derivative terms of the activation.
        """
        net, version, x, v, pre, dpre, acts, dacts, single = tape
        if net is not self or version != self.version:
            raise TapeError("tape does not match this network's current parameters")
        l = self.smooth_l
        gy = np.asarray(gy, dtype=float)
        gydot = np.asarray(gydot, dtype=float)
        if single:
            gy = gy.reshape(1)
            gydot = gydot.reshape(1)
        last = len(self.w_in) - 1
        grads = {}
        gt = gy[:, None]
        gdt = gydot[:, None]
        for k in range(last, -1, -1):
            grads[f"w{k}"] = gt.T @ x + gdt.T @ v
            grads[f"b{k}"] = gt.sum(axis=0)
            if k > 0:
                grads[f"u{k - 1}"] = gt.T @ acts[k - 1] + gdt.T @ dacts[k - 1]
                gz = gt @ self.u_hid[k - 1]
                gdz = gdt @ self.u_hid[k - 1]
                sg = smoothed_relu_grad(pre[k - 1], l)
                cg = smoothed_relu_curv(pre[k - 1], l)
                gt = gz * sg + gdz * cg * dpre[k - 1]
                gdt = gdz * sg
        return grads

    def param_items(self):
        out = []
        for k, w in enumerate(self.w_in):
            out.append((f"w{k}", w))
        for k, b in enumerate(self.biases):
            out.append((f"b{k}", b))
        for k, u in enumerate(self.u_hid):
            out.append((f"u{k}", u))
        return out

    def clamp_constraints(self):
        for u in self.u_hid:
            np.maximum(u, 0.0, out=u)

    def bump(self):
        self.version += 1

    def to_dict(self):
        return {
            "kind": self.kind,
            "smooth_l": self.smooth_l,
            "w_in": [w.tolist() for w in self.w_in],
            "u_hid": [u.tolist() for u in self.u_hid],
            "biases": [b.tolist() for b in self.biases],
        }


def net_from_dict(d):
    if d["kind"] == "mlp":
        return Mlp([_layer_from_dict(ld) for ld in d["layers"]])
    if d["kind"] == "icnn":
        return Icnn(d["w_in"], d["u_hid"], d["biases"], smooth_l=d["smooth_l"])
    raise ValueError(f"unknown net kind {d['kind']!r}")


# ---------------------------------------------------------------------------
# constructors


def glorot(rng, q, p):
    limit = math.sqrt(6.0 / (p + q))
    return rng.uniform(-limit, limit, size=(q, p))


def make_mlp(dims, acts, rng, noisy=False, sigma_scale=0.5, smooth_l=0.1):
    """Build an Mlp with Glorot weights; noisy layers get sigma = scale/sqrt(p)."""
    if len(dims) != len(acts) + 1:
        raise ValueError("need one activation per layer")
    layers = []
    for p, q, act in zip(dims, dims[1:], acts):
        if noisy:
            bound = 1.0 / math.sqrt(p)
            layers.append(
                NoisyDense(
                    rng.uniform(-bound, bound, size=(q, p)),
                    np.full((q, p), sigma_scale / math.sqrt(p)),
                    rng.uniform(-bound, bound, size=q),
                    np.full(q, sigma_scale / math.sqrt(p)),
                    act=act,
                    smooth_l=smooth_l,
                )
            )
        else:
            layers.append(Dense(glorot(rng, q, p), np.zeros(q), act=act, smooth_l=smooth_l))
    return Mlp(layers)


def make_icnn(in_dim, hidden, rng, smooth_l=0.1):
    """Build an Icnn with non-negative convex-path weights."""
    dims = [in_dim] + list(hidden) + [1]
    w_in = [glorot(rng, q, in_dim) for q in dims[1:]]
    u_hid = [np.abs(glorot(rng, q, p)) for p, q in zip(dims[1:-1], dims[2:])]
    biases = [np.zeros(q) for q in dims[1:]]
    return Icnn(w_in, u_hid, biases, smooth_l=smooth_l)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over one network's parameters, with the net's projection applied
    after each step (the Icnn clamps its convex-path weights to >= 0)."""

    def __init__(self, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in net.param_items()}
        self.v = {k: np.zeros_like(p) for k, p in net.param_items()}

    def step(self, grads):
        """One update from a dict (or per-layer list of dicts) of gradients."""
        flat = flatten_grads(grads)
        for k, g in flat.items():
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.net.param_items():
            g = flat[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        self.net.clamp_constraints()
        self.net.bump()

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: a.tolist() for k, a in self.m.items()},
            "v": {k: a.tolist() for k, a in self.v.items()},
        }

    def load_state_dict(self, d):
        self.t = d["t"]
        self.lr = d["lr"]
        self.beta1 = d["beta1"]
        self.beta2 = d["beta2"]
        self.eps = d["eps"]
        self.m = {k: np.asarray(a, dtype=float) for k, a in d["m"].items()}
        self.v = {k: np.asarray(a, dtype=float) for k, a in d["v"].items()}


def flatten_grads(grads):
    """Per-layer gradient dicts to one flat dict keyed like param_items()."""
    if isinstance(grads, dict):
        return grads
    flat = {}
    for i, layer_grads in enumerate(grads):
        for name, g in layer_grads.items():
            flat[f"{i}.{name}"] = g
    return flat


def add_grads(a, b):
    """Merge two gradient dicts (sum on shared keys)."""
    out = dict(a)
    for k, g in b.items():
        out[k] = out[k] + g if k in out else g
    return out


# ---------------------------------------------------------------------------
# checkpoint i/o


def rng_state(gen):
    return gen.bit_generator.state


def restore_rng(state):
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen


def checkpoint_to_dict(nets, rngs=None, adams=None, extra=None):
    doc = {"nets": {name: net.to_dict() for name, net in nets.items()}}
    if rngs:
        doc["rng"] = {name: rng_state(g) for name, g in rngs.items()}
    if adams:
        doc["adam"] = {name: opt.state_dict() for name, opt in adams.items()}
    if extra:
        doc["extra"] = extra
    return doc


def save_checkpoint(path, nets, rngs=None, adams=None, extra=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(nets, rngs, adams, extra), fh)


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    nets = {name: net_from_dict(d) for name, d in doc["nets"].items()}
    rngs = {name: restore_rng(s) for name, s in doc.get("rng", {}).items()}
    return nets, rngs, doc
