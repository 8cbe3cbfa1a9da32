"""Learnable encoder + projector stack, parameter storage with Adam state,
and the finite-difference gradient checker.

Parameters are leaf Tensors registered by name in a ParamStore; the Adam
step reads their accumulated gradients in registration order, which keeps
training bitwise reproducible in single-threaded runs.
"""

import math

import numpy as np

from . import autodiff as ad
from . import geometry, margins, mlr


class ParamStore:
    """Named leaf tensors plus first/second Adam moments and a step count."""

    def __init__(self):
        self._tensors = {}
        self._m = {}
        self._v = {}
        self.step = 0

    def create(self, name, initializer):
        """Register a parameter; an already-present name (e.g. loaded from a
        checkpoint) is returned untouched and the initializer is not called."""
        if name not in self._tensors:
            t = ad.Tensor(np.asarray(initializer(), dtype=np.float64), requires_grad=True)
            self._tensors[name] = t
            self._m[name] = np.zeros_like(t.data)
            self._v[name] = np.zeros_like(t.data)
        return self._tensors[name]

    def load(self, name, data, m, v):
        t = ad.Tensor(data, requires_grad=True)
        self._tensors[name] = t
        self._m[name] = np.asarray(m, dtype=np.float64).reshape(t.data.shape)
        self._v[name] = np.asarray(v, dtype=np.float64).reshape(t.data.shape)
        return t

    def names(self):
        return list(self._tensors)

    def tensor(self, name):
        return self._tensors[name]

    def items(self):
        return list(self._tensors.items())

    def moments(self, name):
        return self._m[name], self._v[name]

    def n_parameters(self):
        return sum(t.data.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def reset_moment_rows(self, name, rows):
        self._m[name][rows] = 0.0
        self._v[name][rows] = 0.0


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0, grad_clip=0.0):
    """Bias-corrected Adam update over every parameter in the store.

    A parameter with no gradient (no path to the loss) is treated as having
    a zero gradient. weight_decay adds an L2 term to the gradient;
    grad_clip rescales by the global gradient norm when it exceeds the cap.
    Both default to off.
    """
    store.step += 1
    t = store.step
    grads = {}
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay > 0.0:
            g = g + weight_decay * p.data
        grads[name] = g
    if grad_clip > 0.0:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            grads = {name: g * scale for name, g in grads.items()}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Mlp:
    """Affine layers with a rectifier between them and none after the last."""

    def __init__(self, dims, store, prefix, rng):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be >= 1 with at least one layer, got {dims}")
        self.dims = dims
        self.weights = []
        self.biases = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            std = math.sqrt(2.0 / d_in)
            w = store.create(f"{prefix}.w{i}",
                             lambda s=std, a=d_in, b=d_out: rng.normal(0.0, s, (a, b)))
            b = store.create(f"{prefix}.b{i}", lambda n=d_out: np.zeros(n))
            self.weights.append(w)
            self.biases.append(b)

    def forward(self, x):
        had = isinstance(x, ad.Tensor)
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.dims[0]:
            raise ValueError(f"expected input of shape (n, {self.dims[0]}), "
                             f"got {x.data.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i != last:
                x = ad.relu(x)
        return x if had else x.data


class EmbeddingNetwork:
    """Encoder followed by a projector; both plain MLPs."""

    def __init__(self, encoder_dims, projector_dims, store, rng):
        if encoder_dims[-1] != projector_dims[0]:
            raise ValueError("projector input dim must equal encoder output dim")
        self.encoder = Mlp(encoder_dims, store, "enc", rng)
        self.projector = Mlp(projector_dims, store, "proj", rng)

    @property
    def embed_dim(self):
        return self.projector.dims[-1]

    def forward(self, x):
        enc = self.encoder.forward(ad.as_tensor(x))
        return enc, self.projector.forward(enc)

    def embed(self, features, chunk=2048):
        """Projector outputs for plain feature rows, computed in chunks."""
        features = np.asarray(features, dtype=np.float64)
        out = []
        for start in range(0, len(features), chunk):
            _, proj = self.forward(ad.Tensor(features[start:start + chunk]))
            out.append(proj.data)
        return np.concatenate(out) if out else np.zeros((0, self.embed_dim))


def build_model(space, n_coarse, encoder_dims, projector_dims, curvature, store, rng):
    """Assemble the embedding network and the head matching the space flag.

    With a loaded store the rng is never consumed: create() reuses the
    stored arrays by name.
    """
    net = EmbeddingNetwork(encoder_dims, projector_dims, store, rng)
    if space == "hyperbolic":
        head = mlr.MlrParams.create(n_coarse, projector_dims[-1], curvature, rng, store=store)
    elif space == "euclidean":
        head = mlr.LinearHead.create(n_coarse, projector_dims[-1], rng, store=store)
    else:
        raise ValueError(f"unknown space {space!r}")
    return net, head


# -- gradient checking ---------------------------------------------------------


def finite_difference_report(loss_fn, tensors, h=1e-5):
    """Compare analytic gradients with central finite differences.

    loss_fn rebuilds the loss graph from the tensors' current data and
    returns a scalar Tensor. Every entry of every tensor is perturbed by
    +-h. The relative error uses a small floor so noise on near-zero
    gradients is not amplified.
    """
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tensors.items()}
    worst = (0.0, None, None)
    checked = 0
    for name, t in tensors.items():
        flat = t.data.ravel()
        an_flat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            rel = abs(fd - an_flat[i]) / max(abs(fd), abs(an_flat[i]), 1e-5)
            checked += 1
            if rel > worst[0]:
                worst = (rel, name, i)
    return {
        "max_rel_err": float(worst[0]),
        "worst_param": worst[1],
        "worst_index": None if worst[2] is None else int(worst[2]),
        "n_checked": checked,
    }


def composite_gradcheck(encoder_dims=(6, 8, 8), projector_dims=(8, 8, 4),
                        n_coarse=3, batch=4, alpha=800.0, curvature=0.001,
                        seed=0, h=1e-5, check_inputs=True):
    """Finite-difference check of the full training objective.

    Builds a random two-view batch, the hyperbolic classification loss and
    the hierarchical margin loss, and checks every parameter plus (when
    requested) the raw input views. Dimensions stay tiny so the quadratic
    cost of the sweep is negligible.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    net, head = build_model("hyperbolic", n_coarse, list(encoder_dims),
                            list(projector_dims), curvature, store, rng)
    # Perturb every parameter (zero-init biases included): keeps rectifier
    # pre-activations away from their kinks and projector rows away from the
    # zero vector, both of which would spoil a finite-difference sweep.
    for _, t in store.items():
        t.data += rng.uniform(0.05, 0.25, t.data.shape) * rng.choice([-1.0, 1.0], t.data.shape)
    xq = ad.Tensor(rng.normal(0.0, 1.0, (batch, encoder_dims[0])), requires_grad=True)
    xk = ad.Tensor(rng.normal(0.0, 1.0, (batch, encoder_dims[0])), requires_grad=True)
    coarse = np.arange(batch) % n_coarse
    fine = np.where(np.arange(batch) % 4 == 3, -1, np.arange(batch) % 2)
    labels = margins.LabelTriple(np.arange(batch), fine, coarse)
    targets = margins.TargetDistances()
    target_rows = margins.target_matrix(labels, labels, targets)

    def loss_fn():
        _, fq = net.forward(xq)
        _, fk = net.forward(xk)
        z = geometry.exp_map(fq, curvature)
        loss_cls = mlr.classification_loss(mlr.mlr_logits(z, head), coarse)
        if alpha == 0.0:
            return loss_cls
        w = margins.distance_matrix(fq, fk)
        return margins.total_loss(loss_cls, margins.hcm_loss(w, target_rows), alpha)

    tensors = dict(store.items())
    if check_inputs:
        tensors["input.q"] = xq
        tensors["input.k"] = xk
    return finite_difference_report(loss_fn, tensors, h=h)
