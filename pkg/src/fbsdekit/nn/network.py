"""Feedforward tanh networks with layer normalization between hidden layers.

The composition per hidden block is affine -> tanh -> layer norm, with the
normalization present only between hidden layers (L-1 normalization layers
for L hidden layers) and an identity output activation.  A switch moves the
normalization before the activation for sensitivity checks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..exceptions import EvaluationFailure
from ..seeds import generator
from . import autodiff as ad
from .autodiff import Tensor

OUT_KINDS = ("scalar", "row", "matrix")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    widths: tuple
    out_kind: str  # 'scalar' | 'row' | 'matrix'
    out_dim: int = 1
    layer_norm: bool = True
    norm_before_activation: bool = False
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.out_kind not in OUT_KINDS:
            raise ValueError(f"out_kind must be one of {OUT_KINDS}")
        if len(self.widths) < 1:
            raise ValueError("at least one hidden layer is required")
        if any(w < 1 for w in self.widths):
            raise ValueError("hidden widths must be positive")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def out_size(self) -> int:
        if self.out_kind == "scalar":
            return 1
        if self.out_kind == "row":
            return self.out_dim
        return self.out_dim * self.out_dim

    def layer_dims(self):
        """(fan_in, fan_out) pairs for every affine layer, output last."""
        dims = []
        prev = self.input_dim
        for w in self.widths:
            dims.append((prev, int(w)))
            prev = int(w)
        dims.append((prev, self.out_size))
        return dims


def default_architecture(d: int, out_kind: str, widths=None,
                         layer_norm: bool = True) -> Architecture:
    """Two hidden layers of 100+d units unless overridden."""
    if widths is None:
        widths = (100 + d, 100 + d)
    return Architecture(
        input_dim=d, widths=tuple(int(w) for w in widths),
        out_kind=out_kind, out_dim=d, layer_norm=layer_norm,
    )


def layer_norm(h, gain, offset, eps: float = 1e-6):
    """Standardize the last axis to zero mean and unit variance (with an
    epsilon floor under the square root), then apply gain and offset.
    Invariant under adding a constant to the normalized axis."""
    return ad.layer_norm_op(h, gain, offset, eps)


class Network:
    """Parameter container plus forward evaluation.

    Canonical parameter order (used by the optimizer and the checkpoint
    format): for each hidden layer l: W_l, b_l, then gain_l, offset_l if a
    normalization layer follows; finally W_out, b_out.
    """

    def __init__(self, arch: Architecture, params):
        self.arch = arch
        self.params = list(params)
        expected = len(self.param_shapes(arch))
        if len(self.params) != expected:
            raise ValueError(f"expected {expected} parameter blocks, got {len(self.params)}")

    @staticmethod
    def param_shapes(arch: Architecture):
        shapes = []
        dims = arch.layer_dims()
        L = arch.depth
        for l in range(L):
            fi, fo = dims[l]
            shapes.append((fi, fo))
            shapes.append((fo,))
            if arch.layer_norm and l < L - 1:
                shapes.append((fo,))  # gain
                shapes.append((fo,))  # offset
        fi, fo = dims[L]
        shapes.append((fi, fo))
        shapes.append((fo,))
        return shapes

    def copy(self) -> "Network":
        return Network(self.arch, [ad.parameter(p.data) for p in self.params])

    def load_from(self, other: "Network"):
        """Warm start: copy another network's parameter values in place."""
        if other.arch != self.arch:
            raise ValueError("architecture mismatch in warm start")
        for p, q in zip(self.params, other.params):
            p.data[...] = q.data

    # -- forward --------------------------------------------------------------

    def _layer_norm(self, h: Tensor, gain: Tensor, offset: Tensor) -> Tensor:
        return layer_norm(h, gain, offset, eps=self.arch.ln_eps)

    def apply_flat(self, x) -> Tensor:
        """Graph forward pass; returns the flat (B, out_size) output."""
        arch = self.arch
        h = ad.wrap(x)
        i = 0
        L = arch.depth
        for l in range(L):
            W, b = self.params[i], self.params[i + 1]
            i += 2
            h = ad.affine(h, W, b)
            has_norm = arch.layer_norm and l < L - 1
            if has_norm and arch.norm_before_activation:
                h = self._layer_norm(h, self.params[i], self.params[i + 1])
                i += 2
                h = ad.tanh(h)
            elif has_norm:
                h = ad.tanh(h)
                h = self._layer_norm(h, self.params[i], self.params[i + 1])
                i += 2
            else:
                h = ad.tanh(h)
        W, b = self.params[i], self.params[i + 1]
        return ad.affine(h, W, b)

    def apply(self, x) -> Tensor:
        """Graph forward pass shaped per out_kind: (B,), (B,d) or (B,d,d)."""
        out = self.apply_flat(x)
        B = out.data.shape[0]
        arch = self.arch
        if arch.out_kind == "scalar":
            return ad.reshape(out, (B,))
        if arch.out_kind == "row":
            return out
        return ad.reshape(out, (B, arch.out_dim, arch.out_dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Plain evaluation on a numpy batch; raises on non-finite output."""
        with ad.no_grad():
            out = self.apply(np.asarray(x, dtype=np.float64)).data
        if not np.all(np.isfinite(out)):
            raise EvaluationFailure("network produced a non-finite output")
        return out


def init_glorot(arch: Architecture, seed: int) -> Network:
    """Glorot-uniform weights, zero biases, unit gains, zero offsets."""
    gen = generator(seed)
    params = []
    dims = arch.layer_dims()
    L = arch.depth
    for l in range(L):
        fi, fo = dims[l]
        a = np.sqrt(6.0 / (fi + fo))
        params.append(ad.parameter(gen.uniform(-a, a, size=(fi, fo))))
        params.append(ad.parameter(np.zeros(fo)))
        if arch.layer_norm and l < L - 1:
            params.append(ad.parameter(np.ones(fo)))
            params.append(ad.parameter(np.zeros(fo)))
    fi, fo = dims[L]
    a = np.sqrt(6.0 / (fi + fo))
    params.append(ad.parameter(gen.uniform(-a, a, size=(fi, fo))))
    params.append(ad.parameter(np.zeros(fo)))
    return Network(arch, params)


def _affine_tangent(h: Tensor, T: Tensor, W: Tensor, b: Tensor) -> tuple:
    """Affine step for (value, tangent) with the tangent in (B, d, S) layout;
    the tangent update is a single reshaped 2-d matmul."""
    B, d, S = T.data.shape
    Tout = ad.matmul(ad.reshape(T, (B * d, S)), W)
    return ad.affine(h, W, b), ad.reshape(Tout, (B, d, W.data.shape[1]))


def _tanh_tangent(h: Tensor, T: Tensor) -> tuple:
    """Push (value, tangent) through tanh; h is the pre-activation."""
    out = ad.tanh(h)
    tt = 1.0 - out * out
    B, S = out.data.shape
    return out, T * ad.reshape(tt, (B, 1, S))


def _layer_norm_tangent(h: Tensor, T: Tensor, gain: Tensor, offset: Tensor,
                        eps: float) -> tuple:
    """Push (value, tangent) through layer normalization.  The normalization
    Jacobian is symmetric, so the tangent update mirrors the closed-form
    vector-Jacobian product."""
    B, S = h.data.shape
    m = ad.mean(h, axis=-1, keepdims=True)
    c = h - m
    v = ad.mean(c * c, axis=-1, keepdims=True)
    s = ad.sqrt(v + eps)
    hh = c / s
    out = hh * gain + offset
    hh3 = ad.reshape(hh, (B, 1, S))
    Tm = ad.mean(T, axis=-1, keepdims=True)
    Th = ad.mean(T * hh3, axis=-1, keepdims=True)
    Tn = (T - Tm - hh3 * Th) / ad.reshape(s, (B, 1, 1))
    return out, Tn * gain


def apply_with_jacobian(net: Network, x: np.ndarray, create_graph: bool = False):
    """Forward output together with the exact input Jacobian.

    Returns (out, jac) where out follows the network's out_kind and jac has
    shape (B, out_size, d).  The Jacobian is propagated in forward mode
    alongside the activations, entirely in recorded tensor operations, so it
    remains differentiable with respect to the parameters (the training of
    Jacobian-containing losses differentiates through it, which brings in
    the second derivative of tanh)."""
    del create_graph  # the tangent graph is always recorded alongside
    arch = net.arch
    h = ad.wrap(np.asarray(x, dtype=np.float64))
    B, d = h.data.shape
    T = Tensor(np.broadcast_to(np.eye(d), (B, d, d)).copy())
    i = 0
    L = arch.depth
    for l in range(L):
        W, b = net.params[i], net.params[i + 1]
        i += 2
        h, T = _affine_tangent(h, T, W, b)
        has_norm = arch.layer_norm and l < L - 1
        if has_norm and arch.norm_before_activation:
            h, T = _layer_norm_tangent(h, T, net.params[i], net.params[i + 1],
                                       arch.ln_eps)
            i += 2
            h, T = _tanh_tangent(h, T)
        elif has_norm:
            h, T = _tanh_tangent(h, T)
            h, T = _layer_norm_tangent(h, T, net.params[i], net.params[i + 1],
                                       arch.ln_eps)
            i += 2
        else:
            h, T = _tanh_tangent(h, T)
    W, b = net.params[i], net.params[i + 1]
    flat, T = _affine_tangent(h, T, W, b)
    jac = ad.transpose(T, (0, 2, 1))  # (B, out_size, d)
    if arch.out_kind == "scalar":
        out = ad.reshape(flat, (B,))
    elif arch.out_kind == "row":
        out = flat
    else:
        out = ad.reshape(flat, (B, arch.out_dim, arch.out_dim))
    return out, jac


def input_jacobian(net: Network, x) -> np.ndarray:
    """Exact Jacobian of the network output at x.

    Accepts (d,) or (B, d); returns (out_size, d) or (B, out_size, d).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    _, jac = apply_with_jacobian(net, xb, create_graph=False)
    out = jac.data
    return out[0] if single else out


def grad_params(loss: Tensor, nets) -> list:
    """Parameter gradients of a scalar loss over one or more networks."""
    if isinstance(nets, Network):
        nets = [nets]
    params = [p for net in nets for p in net.params]
    if loss.data.ndim != 0:
        raise ValueError("loss must be a scalar expression")
    return ad.grad(loss, params)
