"""Dense noise-prediction network with a sinusoidal timestep embedding.

The image is flattened and concatenated with the embedding of ``t``; the
first layer's weight therefore holds both the pixel weights and a learned
projection of the embedding, which is the same as adding a projected
embedding to the first hidden pre-activation. Hidden layers use SiLU.

Parameters are registered input side first as ``layer{i}.weight`` then
``layer{i}.bias``; this order defines feature coordinates downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .rng import Rng
from .tensor import Parameter, Tensor

MAGIC = b"GSAMIA01"


class TimestepError(ValueError):
    pass


@dataclass(frozen=True)
class TimeEmbedding:
    dim: int
    max_t: int

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ValueError(f"embedding dim must be a positive even number, got {self.dim}")
        if self.max_t < 1:
            raise ValueError("max_t must be >= 1")

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        half = self.dim // 2
        # wavelengths geometric in [1, 1e4]
        freqs = 10.0 ** (-4.0 * np.arange(half) / max(half - 1, 1))
        args = t[:, None] * freqs[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class DenoiserNet:
    input_shape: tuple
    hidden_widths: tuple
    embed: TimeEmbedding
    params: list = field(default_factory=list)

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(p.name, p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def forward(self, x_t, t) -> Tensor:
        """Predicted noise for one image ``input_shape`` or a batch ``(B, *input_shape)``."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor._wrap(np.asarray(x_t, dtype=np.float64))
        single = x_t.shape == tuple(self.input_shape)
        if not single and x_t.shape[1:] != tuple(self.input_shape):
            raise T.ShapeError(f"forward: input shape {x_t.shape} does not match {self.input_shape}")
        rows = 1 if single else x_t.shape[0]
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t.size == 1 and rows > 1:
            t = np.full(rows, int(t[0]))
        if t.size != rows:
            raise T.ShapeError(f"forward: {t.size} timesteps for {rows} images")
        if t.min() < 1 or t.max() > self.embed.max_t:
            raise TimestepError(f"timestep out of range [1, {self.embed.max_t}]: {t.min()}..{t.max()}")

        h = T.reshape(x_t, (rows, self.n_pixels))
        h = T.concat([h, Tensor._wrap(self.embed(t))], axis=1)
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = T.linear(h, w, b)
            if i < self.n_layers - 1:
                h = T.silu(h)
        return T.reshape(h, tuple(self.input_shape) if single else (rows, *self.input_shape))

    __call__ = forward

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays):
        for p, a in zip(self.params, arrays, strict=True):
            if p.data.shape != a.shape:
                raise T.ShapeError(f"{p.name}: shape {a.shape} != {p.data.shape}")
            p.data = np.array(a, dtype=np.float64)

    def copy(self) -> "DenoiserNet":
        params = [Parameter(p.name, p.data.copy()) for p in self.params]
        return DenoiserNet(tuple(self.input_shape), tuple(self.hidden_widths), self.embed, params)


def init_denoiser(input_shape, hidden_widths, embed_dim: int, rng: Rng, max_t: int) -> DenoiserNet:
    input_shape = tuple(int(s) for s in input_shape)
    hidden_widths = tuple(int(w) for w in hidden_widths)
    if not hidden_widths:
        raise ValueError("hidden_widths must be nonempty")
    if any(s <= 0 for s in input_shape) or any(w <= 0 for w in hidden_widths):
        raise ValueError("layer and image extents must be positive")
    embed = TimeEmbedding(embed_dim, max_t)
    n_pix = int(np.prod(input_shape))
    dims = [n_pix + embed_dim, *hidden_widths, n_pix]
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        params.append(Parameter(f"layer{i}.weight", w))
        params.append(Parameter(f"layer{i}.bias", np.zeros(fan_out)))
    return DenoiserNet(input_shape, hidden_widths, embed, params)


def save_denoiser(net: DenoiserNet, path) -> None:
    header = [*net.input_shape, len(net.hidden_widths), *net.hidden_widths,
              net.embed.dim, net.embed.max_t, len(net.params)]
    write_container(path, MAGIC, header, net.state())


def load_denoiser(path) -> DenoiserNet:
    header, arrays = read_container(path, MAGIC)
    c, h, w, nw = header[:4]
    widths = header[4:4 + nw]
    embed_dim, max_t, n = header[4 + nw:7 + nw]
    net = init_denoiser((c, h, w), widths, embed_dim, Rng(0), max_t)
    if n != len(net.params) or len(arrays) != n:
        raise ValueError(f"{path}: parameter count mismatch")
    net.load_state(arrays)
    return net
