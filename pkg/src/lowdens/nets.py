"""Small feed-forward networks with hand-written reverse-mode gradients.

Chains of dense layers with tanh or identity activations, optionally
conditioned on a diffusion timestep (sinusoidal features of t/T concatenated
to the input of the first layer) and on a class (one-hot or an explicit
probability vector, also concatenated).  Gradients are available both with
respect to parameters (training) and with respect to the raw input
(guidance), and the backward pass can start from any layer's output so
losses defined on intermediate activations (e.g. a penultimate embedding)
differentiate cleanly.

tanh is used as the only nonlinearity on purpose: it is smooth everywhere,
so central finite differences converge cleanly at arbitrary inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step index."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at training step {step}")
        self.step = step


def timestep_embedding(t, n_steps: int, width: int = 16) -> np.ndarray:
    """Sinusoidal features of t / n_steps; geometric frequency ladder.

    `t` may be a scalar or an array of shape (B,); returns (width,) or
    (B, width).
    """
    if width % 2:
        raise ValueError(f"embedding width must be even, got {width}")
    t = np.asarray(t, dtype=np.float64)
    frac = t / float(n_steps)
    half = width // 2
    freqs = np.pi * 2.0 ** np.arange(half)
    angles = frac[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@dataclass
class Layer:
    weight: np.ndarray   # (out, in)
    bias: np.ndarray     # (out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight/bias shape mismatch")


@dataclass
class ForwardCache:
    """Activations recorded by forward(); consumed by the gradient passes."""

    net_id: int
    inputs: list[np.ndarray]       # input to each layer, (B, in_i)
    preacts: list[np.ndarray]      # pre-activation of each layer, (B, out_i)
    outputs: list[np.ndarray]      # post-activation of each layer
    raw_dim: int                   # width of the raw x slice of layer-0 input
    input_scale: np.ndarray

    def output(self, layer: int = -1) -> np.ndarray:
        return self.outputs[layer]


class MicroNet:
    """Dense feed-forward chain with optional timestep/class conditioning."""

    def __init__(self, layer_sizes: list[int], seed: int,
                 activation: str = "tanh", final_activation: str = "identity",
                 time_embed_width: int = 0, n_steps: int = 0,
                 n_classes: int = 0, input_scale=None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if time_embed_width and n_steps <= 0:
            raise ValueError("timestep conditioning needs n_steps > 0")
        self.raw_input_dim = layer_sizes[0]
        self.output_dim = layer_sizes[-1]
        self.time_embed_width = time_embed_width
        self.n_steps = n_steps
        self.n_classes = n_classes
        self.seed = seed
        scale = np.ones(self.raw_input_dim) if input_scale is None \
            else np.broadcast_to(np.asarray(input_scale, dtype=np.float64),
                                 (self.raw_input_dim,)).copy()
        if not np.all(scale > 0):
            raise ValueError("input_scale entries must be positive")
        self.input_scale = scale

        rng = np.random.default_rng(seed)
        first_in = self.raw_input_dim + time_embed_width + n_classes
        dims = [first_in] + list(layer_sizes[1:])
        self.layers: list[Layer] = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            std = np.sqrt(2.0 / (fan_in + fan_out))
            act = final_activation if i == len(dims) - 2 else activation
            self.layers.append(Layer(
                weight=rng.standard_normal((fan_out, fan_in)) * std,
                bias=np.zeros(fan_out), activation=act))

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self) -> "MicroNet":
        dup = MicroNet.__new__(MicroNet)
        dup.__dict__.update({k: v for k, v in self.__dict__.items()
                             if k != "layers"})
        dup.input_scale = self.input_scale.copy()
        dup.layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation)
                      for l in self.layers]
        return dup

    # -- forward ------------------------------------------------------------

    def _assemble_input(self, x: np.ndarray, t, cond) -> np.ndarray:
        parts = [x / self.input_scale]
        if self.time_embed_width:
            if t is None:
                raise ValueError("network is timestep-conditioned but t is None")
            tt = np.asarray(t, dtype=np.float64)
            if np.any(tt < 0) or np.any(tt > self.n_steps):
                raise ValueError(f"timestep out of [0, {self.n_steps}]")
            emb = timestep_embedding(tt, self.n_steps, self.time_embed_width)
            if emb.ndim == 1:
                emb = np.broadcast_to(emb, (len(x), self.time_embed_width))
            parts.append(emb)
        if self.n_classes:
            if cond is None:
                raise ValueError("network is class-conditioned but y is None")
            cond = np.asarray(cond)
            if cond.ndim == 0 or (cond.ndim == 1 and
                                  np.issubdtype(cond.dtype, np.integer)):
                onehot = np.zeros((len(x), self.n_classes))
                onehot[np.arange(len(x)), np.broadcast_to(cond, len(x))] = 1.0
                cond = onehot
            elif cond.ndim == 1:
                cond = np.broadcast_to(cond, (len(x), self.n_classes))
            if cond.shape != (len(x), self.n_classes):
                raise ValueError(f"conditioning shape {cond.shape} does not "
                                 f"match ({len(x)}, {self.n_classes})")
            parts.append(cond)
        return np.concatenate(parts, axis=1)

    def forward(self, x: np.ndarray, t=None, cond=None) -> tuple[np.ndarray, ForwardCache]:
        """Run the chain on a batch (B, raw_input_dim); returns (output, cache)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.raw_input_dim:
            raise ValueError(f"input width {x.shape[1]}, expected "
                             f"{self.raw_input_dim}")
        h = self._assemble_input(x, t, cond)
        inputs, preacts, outputs = [], [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            preacts.append(z)
            h = np.tanh(z) if layer.activation == "tanh" else z
            outputs.append(h)
        cache = ForwardCache(net_id=id(self), inputs=inputs, preacts=preacts,
                             outputs=outputs, raw_dim=self.raw_input_dim,
                             input_scale=self.input_scale)
        return h, cache

    # -- backward -----------------------------------------------------------

    def _check_cache(self, cache: ForwardCache):
        if cache.net_id != id(self) or len(cache.inputs) != len(self.layers):
            raise ValueError("cache does not belong to this network")

    def _backward(self, adjoint: np.ndarray, cache: ForwardCache,
                  start_layer: int, want_params: bool):
        """Backpropagate d(loss)/d(output of start_layer) to layer inputs.

        Returns (param_grads, input_grad) where input_grad is w.r.t. the raw
        x slice (chain rule through the input scaling included).
        """
        self._check_cache(cache)
        n = len(self.layers)
        start = start_layer % n
        grad = np.atleast_2d(np.asarray(adjoint, dtype=np.float64))
        if grad.shape != cache.outputs[start].shape:
            raise ValueError(f"adjoint shape {grad.shape} does not match "
                             f"layer {start} output "
                             f"{cache.outputs[start].shape}")
        param_grads: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(start, -1, -1):
            layer = self.layers[i]
            if layer.activation == "tanh":
                grad = grad * (1.0 - cache.outputs[i] ** 2)
            if want_params:
                param_grads.append((grad.T @ cache.inputs[i],
                                    grad.sum(axis=0)))
            grad = grad @ layer.weight
        param_grads.reverse()
        # Layers above start_layer contribute zero gradient.
        if want_params:
            for i in range(start + 1, n):
                param_grads.append((np.zeros_like(self.layers[i].weight),
                                    np.zeros_like(self.layers[i].bias)))
        input_grad = grad[:, :cache.raw_dim] / cache.input_scale
        return param_grads, input_grad

    def grad_params(self, adjoint: np.ndarray, cache: ForwardCache,
                    start_layer: int = -1) -> list[tuple[np.ndarray, np.ndarray]]:
        """d(loss)/d(W_i), d(loss)/d(b_i) for a loss with the given output
        adjoint, summed over the batch."""
        grads, _ = self._backward(adjoint, cache, start_layer, want_params=True)
        return grads

    def grad_input(self, adjoint: np.ndarray, cache: ForwardCache,
                   start_layer: int = -1) -> np.ndarray:
        """d(loss)/dx (raw input coordinates), per batch row."""
        _, g = self._backward(adjoint, cache, start_layer, want_params=False)
        return g

    # -- checkpoint ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("# micronet v1\n")
            fh.write(f"raw_input_dim {self.raw_input_dim}\n")
            fh.write(f"time_embed_width {self.time_embed_width}\n")
            fh.write(f"n_steps {self.n_steps}\n")
            fh.write(f"n_classes {self.n_classes}\n")
            fh.write(f"seed {self.seed}\n")
            fh.write("input_scale " +
                     " ".join(repr(v) for v in self.input_scale) + "\n")
            fh.write(f"layers {len(self.layers)}\n")
            for layer in self.layers:
                out_dim, in_dim = layer.weight.shape
                fh.write(f"layer {layer.activation} {out_dim} {in_dim}\n")
                for row in layer.weight:
                    fh.write(" ".join(repr(v) for v in row) + "\n")
                fh.write(" ".join(repr(v) for v in layer.bias) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MicroNet":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "# micronet v1":
            raise ValueError(f"{path}: not a micronet checkpoint")
        pos = 1

        def take(key: str) -> str:
            nonlocal pos
            parts = lines[pos].split(maxsplit=1)
            if parts[0] != key:
                raise ValueError(f"{path}: expected {key!r} at line {pos + 1}")
            pos += 1
            return parts[1]

        net = cls.__new__(cls)
        net.raw_input_dim = int(take("raw_input_dim"))
        net.time_embed_width = int(take("time_embed_width"))
        net.n_steps = int(take("n_steps"))
        net.n_classes = int(take("n_classes"))
        net.seed = int(take("seed"))
        net.input_scale = np.array([float(v) for v in take("input_scale").split()])
        n_layers = int(take("layers"))
        net.layers = []
        for _ in range(n_layers):
            act, out_dim, in_dim = take("layer").split()
            out_dim, in_dim = int(out_dim), int(in_dim)
            weight = np.array([[float(v) for v in lines[pos + r].split()]
                               for r in range(out_dim)])
            pos += out_dim
            bias = np.array([float(v) for v in lines[pos].split()])
            pos += 1
            net.layers.append(Layer(weight, bias, act))
        net.output_dim = net.layers[-1].weight.shape[0]
        return net


# ---------------------------------------------------------------------------
# Trainer: plain SGD with optional momentum, deterministic in cfg.seed.

@dataclass
class TrainConfig:
    step_size: float = 0.05
    steps: int = 2000
    batch: int = 128
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def train(net: MicroNet, objective, n_data: int, cfg: TrainConfig) -> np.ndarray:
    """Minimize `objective` over minibatches by SGD; mutates `net` in place.

    objective(net, batch_indices, rng) must return (scalar loss, grads) with
    grads shaped like net.grad_params output.  Returns the per-step loss
    trace.
    """
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in net.parameters()]
    trace = np.zeros(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, n_data, size=min(cfg.batch, n_data))
        loss, grads = objective(net, idx, rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        trace[step] = loss
        flat = []
        for g_w, g_b in grads:
            flat.extend([g_w, g_b])
        for p, v, g in zip(net.parameters(), velocity, flat):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            v *= cfg.momentum
            v += g
            p -= cfg.step_size * v
    return trace
