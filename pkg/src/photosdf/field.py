"""Parametric scene fields.

Every field exposes the same duck-typed surface:

* ``params`` - one flat float64 tensor holding all learnable values, light
  intensity last;
* ``sdf(x) -> (S, f)`` - signed distance and geometric feature per point;
* ``materials(x, n, f, view_dir=None) -> (diffuse, specular, roughness)``;
* ``with_params(theta)`` - a shallow copy evaluating with another vector.

:class:`FieldStack` is the neural implementation. The analytic adapters in
this module (sphere, torus, box, plane, union) are exact references used as
test oracles and as ground truth for synthetic datasets.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import FieldConfig, NetConfig

DTYPE = torch.float64
SOFTPLUS_BETA = 100.0


class FieldError(RuntimeError):
    """Raised when a field produces non-finite values."""


# --------------------------------------------------------------------------
# positional encoding


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    def out_dim(self, input_dim: int) -> int:
        return input_dim * (int(self.include_input) + 2 * self.num_frequencies)


def encode(x: torch.Tensor, enc: PositionalEncoding) -> torch.Tensor:
    """Frequency ladder 2^k, k = 0..F-1; layout [x, sin(2^0 x), cos(2^0 x), ...]."""
    parts = [x] if enc.include_input else []
    for k in range(enc.num_frequencies):
        freq = 2.0**k
        parts.append(torch.sin(freq * x))
        parts.append(torch.cos(freq * x))
    if not parts:
        return x.new_zeros(*x.shape[:-1], 0)
    return torch.cat(parts, dim=-1)


# --------------------------------------------------------------------------
# functional MLP over a slice of the flat parameter vector


class MLP:
    """Fully connected net whose weights are views into a flat vector.

    Hidden activations are softplus (beta=100) so every composite stays
    twice differentiable; that keeps normals smooth and finite differences
    meaningful.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int, cfg: NetConfig):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.skips = tuple(cfg.skips)
        dims = [in_dim] + [cfg.width] * cfg.num_layers + [out_dim]
        self.shapes: list[tuple[int, int]] = []
        for layer in range(len(dims) - 1):
            fan_in = dims[layer]
            if layer in self.skips:
                fan_in += in_dim
            self.shapes.append((dims[layer + 1], fan_in))
        self.offset = 0

    @property
    def size(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def layers(self, params: torch.Tensor):
        pos = self.offset
        for o, i in self.shapes:
            w = params[pos : pos + o * i].view(o, i)
            pos += o * i
            b = params[pos : pos + o]
            pos += o
            yield w, b

    def __call__(self, params: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        h = inputs
        layers = list(self.layers(params))
        for idx, (w, b) in enumerate(layers):
            if idx in self.skips:
                h = torch.cat([h, inputs], dim=-1) / math.sqrt(2.0)
            h = F.linear(h, w, b)
            if idx < len(layers) - 1:
                h = F.softplus(h, beta=SOFTPLUS_BETA)
        return h

    def init_default(self, params: torch.Tensor, gen: torch.Generator) -> None:
        with torch.no_grad():
            for w, b in self.layers(params):
                fan_in = w.shape[1]
                w.copy_(torch.randn(w.shape, generator=gen, dtype=DTYPE) * math.sqrt(2.0 / fan_in))
                b.zero_()

    def init_geometric(self, params: torch.Tensor, gen: torch.Generator, radius: float, raw_dim: int = 3) -> None:
        """Sphere-like initialization: S(x) ~ |x| - radius at step 0."""
        with torch.no_grad():
            layers = list(self.layers(params))
            last = len(layers) - 1
            for idx, (w, b) in enumerate(layers):
                out_d, in_d = w.shape
                if idx == last:
                    w.normal_(0.0, 1e-4, generator=gen)
                    w[0].copy_(math.sqrt(math.pi) / math.sqrt(in_d) + 1e-4 * torch.randn(in_d, generator=gen, dtype=DTYPE))
                    b.zero_()
                    b[0] = -radius
                    # feature rows: small random so features are informative
                    if out_d > 1:
                        w[1:].normal_(0.0, math.sqrt(2.0 / in_d) * 0.1, generator=gen)
                    continue
                w.normal_(0.0, math.sqrt(2.0) / math.sqrt(out_d), generator=gen)
                b.zero_()
                if idx == 0:
                    w[:, raw_dim:] = 0.0
                elif idx in self.skips:
                    w[:, -(self.in_dim - raw_dim):] = 0.0


# --------------------------------------------------------------------------
# field protocol helpers


class Field:
    """Base class: flat params with the light intensity as the last entry."""

    params: torch.Tensor
    feature_dim: int = 0

    @property
    def light_intensity(self) -> torch.Tensor:
        return self.params[-1]

    def with_params(self, params: torch.Tensor) -> "Field":
        if params.shape != self.params.shape:
            raise ValueError(f"expected params of shape {tuple(self.params.shape)}, got {tuple(params.shape)}")
        out = copy.copy(self)
        out.params = params
        return out

    def sdf(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def materials(self, x, n, f, view_dir=None):
        raise NotImplementedError


def _check_finite(field: Field, values: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(values).all()):
        p = field.params.detach()
        raise FieldError(
            f"non-finite {what}: params |max|={p.abs().max().item():.3e}, "
            f"finite={bool(torch.isfinite(p).all())}, n={p.numel()}"
        )


def eval_sdf(field: Field, x: torch.Tensor, create_graph: bool = False):
    """Signed distance, feature and spatial gradient at ``x``.

    The gradient is exact (autograd through the network). With
    ``create_graph`` it stays differentiable w.r.t. params and ``x``.
    """
    with torch.enable_grad():
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        S, f = field.sdf(x)
        _check_finite(field, S, "SDF value")
        (grad,) = torch.autograd.grad(S, x, torch.ones_like(S), create_graph=create_graph)
    if not create_graph:
        S, f, grad = S.detach(), f.detach(), grad.detach()
    return S, f, grad


def eval_materials(field: Field, x, n, f, view_dir=None):
    return field.materials(x, n, f, view_dir)


# --------------------------------------------------------------------------
# the neural field stack


class FieldStack(Field):
    """SDF, diffuse, specular and roughness MLPs plus light intensity."""

    def __init__(self, cfg: FieldConfig, seed: int = 0):
        self.cfg = cfg
        self.feature_dim = cfg.feature_dim
        self.enc_sdf = PositionalEncoding(cfg.sdf_frequencies)
        self.enc_diffuse = PositionalEncoding(cfg.diffuse_frequencies)
        self.enc_dir = PositionalEncoding(cfg.direction_frequencies)
        self.enc_mat = PositionalEncoding(cfg.material_frequencies)
        fd = cfg.feature_dim
        self.nets = {
            "sdf": MLP("sdf", self.enc_sdf.out_dim(3), 1 + fd, cfg.sdf),
            "diffuse": MLP(
                "diffuse", self.enc_diffuse.out_dim(3) + 3 + self.enc_dir.out_dim(3) + fd, 3, cfg.diffuse
            ),
            "specular": MLP("specular", self.enc_mat.out_dim(3) + 3 + fd, 3, cfg.specular),
            "roughness": MLP("roughness", self.enc_mat.out_dim(3) + 3 + fd, 1, cfg.roughness),
        }
        offset = 0
        for net in self.nets.values():
            net.offset = offset
            offset += net.size
        self.params = torch.zeros(offset + 1, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        self.nets["sdf"].init_geometric(self.params, gen, cfg.init_radius)
        for name in ("diffuse", "specular", "roughness"):
            self.nets[name].init_default(self.params, gen)
        self.params[-1] = cfg.light_intensity

    def slices(self) -> dict[str, slice]:
        out = {name: slice(net.offset, net.offset + net.size) for name, net in self.nets.items()}
        out["light"] = slice(self.params.numel() - 1, self.params.numel())
        return out

    def sdf(self, x):
        h = self.nets["sdf"](self.params, encode(x, self.enc_sdf))
        return h[..., 0], h[..., 1:]

    def _feature(self, f):
        return f if self.cfg.use_feature else torch.zeros_like(f)

    def diffuse(self, x, n, second, f):
        inp = torch.cat([encode(x, self.enc_diffuse), n, encode(second, self.enc_dir), self._feature(f)], dim=-1)
        return torch.sigmoid(self.nets["diffuse"](self.params, inp))

    def materials(self, x, n, f, view_dir=None):
        second = n if view_dir is None else view_dir
        beta = self.diffuse(x, n, second, f)
        inp = torch.cat([encode(x, self.enc_mat), n, self._feature(f)], dim=-1)
        kappa = torch.sigmoid(self.nets["specular"](self.params, inp))
        rough = torch.sigmoid(self.nets["roughness"](self.params, inp))[..., 0]
        return beta, kappa, rough


def fit_sphere(stack: FieldStack, radius: float, steps: int = 300, n_points: int = 2048, lr: float = 2e-3, seed: int = 0) -> FieldStack:
    """Regress the SDF net onto |x| - radius (plus unit gradients).

    Narrow nets start from only a rough sphere under geometric init; a few
    hundred Adam steps make the cold start an accurate sphere.
    """
    from .optim import Adam

    gen = torch.Generator().manual_seed(seed)
    sl = stack.slices()["sdf"]
    lr_vec = torch.zeros_like(stack.params)
    lr_vec[sl] = lr
    theta = stack.params.detach().clone()
    opt = Adam(theta.numel())
    for _ in range(steps):
        d = torch.randn(n_points, 3, dtype=DTYPE, generator=gen)
        d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
        x = d * torch.rand(n_points, 1, dtype=DTYPE, generator=gen) ** (1.0 / 3.0)
        p = theta.clone().requires_grad_(True)
        S, _, g = eval_sdf(stack.with_params(p), x, create_graph=True)
        loss = ((S - (torch.linalg.norm(x, dim=-1) - radius)) ** 2).mean()
        loss = loss + 0.1 * ((torch.linalg.norm(g, dim=-1) - 1.0) ** 2).mean()
        (grad,) = torch.autograd.grad(loss, p)
        theta = opt.step(theta, grad, lr_vec)
    return stack.with_params(theta)


# --------------------------------------------------------------------------
# analytic adapters


class AnalyticShape:
    """Closed-form SDF with a small parameter block."""

    def initial_params(self) -> list[float]:
        return []

    def __call__(self, p: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    @property
    def size(self) -> int:
        return len(self.initial_params())


@dataclass
class Sphere(AnalyticShape):
    radius: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def initial_params(self):
        return [*self.center, self.radius]

    def __call__(self, p, x):
        return torch.linalg.norm(x - p[:3], dim=-1) - p[3]


@dataclass
class Torus(AnalyticShape):
    """Ring in the xy-plane around the z axis."""

    major: float = 1.0
    minor: float = 0.3

    def initial_params(self):
        return [self.major, self.minor]

    def __call__(self, p, x):
        q = torch.linalg.norm(x[..., :2], dim=-1) - p[0]
        return torch.sqrt(q * q + x[..., 2] ** 2) - p[1]


@dataclass
class Box(AnalyticShape):
    half_extent: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def initial_params(self):
        return list(self.half_extent)

    def __call__(self, p, x):
        q = x.abs() - p[:3]
        outside = torch.linalg.norm(torch.clamp(q, min=0.0), dim=-1)
        inside = torch.clamp(q.max(dim=-1).values, max=0.0)
        return outside + inside


@dataclass
class Plane(AnalyticShape):
    """Half-space n.x <= offset; ``normal`` must be unit length."""

    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def initial_params(self):
        return [self.offset]

    def __call__(self, p, x):
        n = torch.tensor(self.normal, dtype=x.dtype)
        return x @ n - p[0]


class Union(AnalyticShape):
    """Exact-outside union (min); ``smooth`` > 0 blends with a polynomial smooth-min."""

    def __init__(self, shapes: list[AnalyticShape], smooth: float = 0.0):
        self.shapes = list(shapes)
        self.smooth = smooth

    def initial_params(self):
        return [v for s in self.shapes for v in s.initial_params()]

    def __call__(self, p, x):
        vals = []
        pos = 0
        for s in self.shapes:
            vals.append(s(p[pos : pos + s.size], x))
            pos += s.size
        out = vals[0]
        for v in vals[1:]:
            if self.smooth > 0:
                k = self.smooth
                h = torch.clamp(0.5 + 0.5 * (v - out) / k, 0.0, 1.0)
                out = v + (out - v) * h - k * h * (1.0 - h)
            else:
                out = torch.minimum(out, v)
        return out


class ConstantMaterial:
    def __init__(self, diffuse=(0.5, 0.5, 0.5), specular=(0.0, 0.0, 0.0), roughness=0.3):
        self.diffuse = diffuse
        self.specular = specular
        self.roughness = roughness

    def __call__(self, x, n):
        shape = x.shape[:-1]
        beta = torch.tensor(self.diffuse, dtype=x.dtype).expand(*shape, 3)
        kappa = torch.tensor(self.specular, dtype=x.dtype).expand(*shape, 3)
        rough = torch.full(shape, float(self.roughness), dtype=x.dtype)
        return beta, kappa, rough


class TwoToneMaterial(ConstantMaterial):
    """Diffuse albedo switches on the sign of the x coordinate."""

    def __init__(self, tone_pos=(0.8, 0.3, 0.2), tone_neg=(0.2, 0.4, 0.8), specular=(0.0, 0.0, 0.0), roughness=0.3):
        super().__init__(tone_pos, specular, roughness)
        self.tone_pos = tone_pos
        self.tone_neg = tone_neg

    def __call__(self, x, n):
        _, kappa, rough = super().__call__(x, n)
        pos = torch.tensor(self.tone_pos, dtype=x.dtype)
        neg = torch.tensor(self.tone_neg, dtype=x.dtype)
        beta = torch.where((x[..., :1] >= 0), pos, neg)
        return beta, kappa, rough


class AnalyticField(Field):
    """Closed-form SDF + material rule behind the neural field interface.

    The feature vector is empty. ``scale`` multiplies the distance; with
    scale 2 the field is no longer a true SDF (used by eikonal tests).
    """

    def __init__(self, shape: AnalyticShape, material=None, light_intensity: float = 1.0, scale: float = 1.0):
        self.shape = shape
        self.material = material or ConstantMaterial()
        self.scale = scale
        self.feature_dim = 0
        self.params = torch.tensor([*shape.initial_params(), light_intensity], dtype=DTYPE)

    def sdf(self, x):
        S = self.scale * self.shape(self.params[:-1], x)
        return S, x.new_zeros(*x.shape[:-1], 0)

    def materials(self, x, n, f, view_dir=None):
        return self.material(x, n)


# --------------------------------------------------------------------------
# reverse-mode gradient tape


class GradientTape:
    """Records a forward pass over a private copy of a field's parameters.

    Usage::

        tape = GradientTape(field)
        loss = tape.record(compute_loss(tape.field))
        grad = backward(tape)
    """

    def __init__(self, field: Field):
        self.params = field.params.detach().clone().requires_grad_(True)
        self.field = field.with_params(self.params)
        self.outputs: torch.Tensor | None = None

    def record(self, outputs: torch.Tensor) -> torch.Tensor:
        self.outputs = outputs
        return outputs


def backward(tape: GradientTape, seed: torch.Tensor | None = None) -> torch.Tensor:
    """Cotangent-weighted gradient of the recorded outputs w.r.t. all params.

    The graph is retained, so repeated calls return identical vectors.
    """
    if tape.outputs is None:
        raise RuntimeError("nothing recorded on this tape")
    out = tape.outputs
    if seed is None:
        if out.numel() != 1:
            raise ValueError("a seed cotangent is required for non-scalar outputs")
        seed = torch.ones_like(out)
    seed = torch.as_tensor(seed, dtype=out.dtype)
    if seed.shape != out.shape:
        raise ValueError(f"seed shape {tuple(seed.shape)} does not match outputs {tuple(out.shape)}")
    if not out.requires_grad:
        return torch.zeros_like(tape.params).detach()
    (grad,) = torch.autograd.grad(out, tape.params, seed, retain_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros_like(tape.params).detach()
    return grad.detach()
