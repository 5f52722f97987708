"""Dense-tensor math with reverse-mode autodiff for the rest of the system.

This is a thin, contract-enforcing layer over torch tensors: torch supplies
storage and the reverse-accumulation engine (including the second-order
graphs the R1 penalty needs), while this module pins down the primitive set,
shape validation, explicit caller-scoped tapes with single-shot backward,
and the finite-difference oracle used to check every primitive's gradient.

Tensors are row-major contiguous f32 (training) or f64 (gradient checks).
A graph node is a tensor with `requires_grad`; leaves are registered on a
Tape via `watch`. Stop-gradient rules are expressed by detaching subgraphs
(`Tensor.detach`), which is why tapes are explicit rather than global.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import torch

Tensor = torch.Tensor

# CPU denormals stall the FPU; gradients of saturated activations hit them.
torch.set_flush_denormal(True)


class ShapeError(ValueError):
    """An op was applied to tensors whose shapes are incompatible."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar root, or wrong mode."""


def tensor(data, dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.as_tensor(data, dtype=dtype)


def _shapes(*xs: Tensor) -> str:
    return " vs ".join(str(tuple(x.shape)) for x in xs)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes not broadcastable: {_shapes(a, b)}") from None


# ---------------------------------------------------------------------------
# Primitive set
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else -1]:
        raise ShapeError(f"matmul: inner dimensions disagree: {_shapes(a, b)}")
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return a * b


def broadcast(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return x.broadcast_to(tuple(shape))
    except RuntimeError:
        raise ShapeError(f"broadcast: {tuple(x.shape)} does not broadcast to {tuple(shape)}") from None


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        return x.reshape(tuple(shape))
    except RuntimeError:
        raise ShapeError(f"reshape: {tuple(x.shape)} has wrong element count for {tuple(shape)}") from None


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat: empty input list")
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat(axis={axis}): incompatible shapes: {_shapes(*xs)}")
    return torch.cat(list(xs), dim=axis)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    size = x.shape[axis]
    if not (0 <= start <= stop <= size):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {tuple(x.shape)}")
    return x.narrow(axis, start, stop - start)


def sum(x: Tensor, axis=None, keepdim: bool = False) -> Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis, keepdim=keepdim)


def mean(x: Tensor, axis=None, keepdim: bool = False) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis, keepdim=keepdim)


def sine(x: Tensor) -> Tensor:
    return torch.sin(x)


def softplus(x: Tensor) -> Tensor:
    return torch.nn.functional.softplus(x)


def exponential(x: Tensor) -> Tensor:
    return torch.exp(x)


def logarithm(x: Tensor) -> Tensor:
    return torch.log(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return torch.nn.functional.leaky_relu(x, negative_slope=slope)


def square(x: Tensor) -> Tensor:
    return x * x


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C_in, H, W); w: (C_out, C_in, kh, kw)."""
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: expected (B,C,H,W) x (O,C,kh,kw) with matching C: {_shapes(x, w)}")
    return torch.nn.functional.conv2d(x, w, stride=stride, padding=padding)


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    if x.dim() != 4:
        raise ShapeError(f"avg_pool2d: expected (B,C,H,W), got {tuple(x.shape)}")
    return torch.nn.functional.avg_pool2d(x, kernel)


def grid_sample_3d(grid: Tensor, points: Tensor) -> Tensor:
    """Trilinear lookup of a feature volume at continuous 3D points.

    grid: (B, C, D, H, W) with axes ordered (z, y, x); points: (B, P, 3) as
    (x, y, z) in [-1, 1] with align_corners semantics (±1 hits the boundary
    voxel centers) and border clamping outside. Returns (B, P, C).
    """
    if grid.dim() != 5 or points.dim() != 3 or points.shape[-1] != 3:
        raise ShapeError(f"grid_sample_3d: expected (B,C,D,H,W) and (B,P,3): {_shapes(grid, points)}")
    if grid.shape[0] != points.shape[0] and grid.shape[0] != 1:
        raise ShapeError(f"grid_sample_3d: batch mismatch: {_shapes(grid, points)}")
    b, p = points.shape[0], points.shape[1]
    if grid.shape[0] == 1 and b > 1:
        grid = grid.expand(b, -1, -1, -1, -1)
    out = torch.nn.functional.grid_sample(
        grid, points.reshape(b, 1, 1, p, 3),
        mode="bilinear", padding_mode="border", align_corners=True,
    )
    return out.reshape(b, grid.shape[1], p).permute(0, 2, 1)


def cumprod(x: Tensor, axis: int) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"cumprod: axis {axis} out of range for {tuple(x.shape)}")
    return torch.cumprod(x, dim=axis)


# Composites of the primitive set, provided for convenience.

def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "broadcast": broadcast,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "sum": sum,
    "mean": mean,
    "sine": sine,
    "softplus": softplus,
    "exponential": exponential,
    "logarithm": logarithm,
    "leaky-relu": leaky_relu,
    "square": square,
    "conv2d": conv2d,
    "avg-pool2d": avg_pool2d,
    "grid-sample-3d": grid_sample_3d,
    "cumulative-product": cumprod,
}


def primitive(op_tag: str, inputs: Sequence[Tensor] | Tensor, **kwargs) -> Tensor:
    """Apply a primitive by tag. `inputs` is a tensor or list of tensors."""
    if op_tag not in _PRIMITIVES:
        raise KeyError(f"unknown primitive: {op_tag!r}")
    fn = _PRIMITIVES[op_tag]
    if op_tag in ("concat",):
        return fn(inputs, **kwargs)
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """Explicit gradient tape over watched leaf tensors.

    Single-shot: `backward` may be called once per tape. In grad-graph mode
    the returned gradients (and those from `input_gradient`) stay attached
    to the graph so penalties on gradients can themselves be trained.
    """

    def __init__(self, grad_graph: bool = False):
        self.grad_graph = grad_graph
        self._watched: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> bool:
        return False

    def watch(self, *tensors: Tensor | Iterable[Tensor]) -> None:
        for t in tensors:
            if isinstance(t, Tensor):
                t.requires_grad_(True)
                self._watched.append(t)
            else:
                self.watch(*t)

    def backward(self, root: Tensor) -> dict[Tensor, Tensor]:
        """Reverse-accumulate d(root)/d(leaf) for every watched leaf.

        Returns a map keyed by leaf tensor identity; leaves the root does
        not reach are omitted.
        """
        if self._consumed:
            raise TapeError("backward already ran on this tape; build a new tape per step")
        if root.dim() != 0:
            raise TapeError(f"backward root must be scalar, got shape {tuple(root.shape)}")
        if not self._watched:
            raise TapeError("no watched tensors on this tape")
        self._consumed = True
        if not root.requires_grad:
            return {}
        grads = torch.autograd.grad(
            root, self._watched, create_graph=self.grad_graph, allow_unused=True,
        )
        return {t: g for t, g in zip(self._watched, grads) if g is not None}

    def input_gradient(self, d_out: Tensor, input: Tensor) -> Tensor:  # noqa: A002
        """Gradient of a scalar output w.r.t. one input, kept differentiable.

        Only legal in grad-graph mode: the result participates in the graph
        so a squared-norm penalty on it back-propagates into parameters.
        """
        if not self.grad_graph:
            raise TapeError("input_gradient requires a tape in grad-graph mode")
        if d_out.dim() != 0:
            raise TapeError(f"input_gradient output must be scalar, got shape {tuple(d_out.shape)}")
        (g,) = torch.autograd.grad(d_out, [input], create_graph=True)
        return g


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[Tensor], Tensor], x: Tensor, step: float) -> Tensor:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    flat = x.detach().clone().reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(f(flat.reshape(x.shape)).detach())
        flat[i] = orig - step
        lo = float(f(flat.reshape(x.shape)).detach())
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max over coordinates of |autodiff − central diff| / max(1, |central diff|)."""
    if not x.dtype.is_floating_point or x.dtype != torch.float64:
        raise TypeError(f"gradient_check requires float64 input, got {x.dtype}")
    leaf = x.detach().clone()
    with Tape() as tape:
        tape.watch(leaf)
        out = f(leaf)
        if out.dim() != 0:
            raise TapeError(f"gradient_check: f must return a scalar, got {tuple(out.shape)}")
    grads = tape.backward(out)
    ad = grads.get(leaf)
    if ad is None:
        ad = torch.zeros_like(leaf)
    fd = finite_difference(lambda v: f(v), x.detach().to(torch.float64), step)
    if torch.isnan(ad).any() or torch.isnan(fd).any():
        raise ValueError("gradient_check: NaN in autodiff or finite-difference estimate")
    rel = (ad - fd).abs() / torch.clamp(fd.abs(), min=1.0)
    return float(rel.max()) if rel.numel() else 0.0
