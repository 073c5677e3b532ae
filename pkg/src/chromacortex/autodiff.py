"""Minimal reverse-mode differentiation on f64 numpy arrays.

A Tape records primitive operations as they execute; backward() replays the
records once, accumulating gradients into leaf tensors, then marks the tape
consumed. The primitive set is exactly what the decode/translate/re-encode
pipeline and the coefficient fitting need: elementwise arithmetic, reductions,
conv2d, FFT pairs, regularized complex division, and bilinear warp sampling.

No primitive mutates its inputs. Everything runs in float64; finite-difference
checks at h=1e-4 are the correctness oracle for every pullback.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class TapeConsumedError(AutodiffError):
    pass


class NonScalarLossError(AutodiffError):
    pass


class Tape:
    """Ordered record of primitive ops; one backward pass per forward pass."""

    def __init__(self):
        self.nodes: list = []  # (out, inputs, backfn)
        self.consumed = False
        self.div_reg_hits = 0  # bins where the division regularizer dominated

    def var(self, data, requires_grad: bool = True) -> "Tensor":
        return Tensor(np.asarray(data, dtype=np.float64), self, requires_grad)

    def const(self, data) -> "Tensor":
        return Tensor(np.asarray(data, dtype=np.float64), self, False)

    def record(self, out, inputs, backfn):
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self.nodes.append((out, inputs, backfn))


class Tensor:
    __slots__ = ("data", "grad", "tape", "requires_grad")

    def __init__(self, data: np.ndarray, tape: Tape, requires_grad: bool = False):
        self.data = data
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data, self.tape, False)

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, rg={self.requires_grad})"


def _wrap(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise AutodiffError("no tensor operand")


def _accum(t: Tensor, g: np.ndarray):
    # accumulation rebinds rather than mutates, so aliasing a returned grad is safe
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Populate gradients of all reachable leaves; the tape is then consumed."""
    tape = loss.tape
    if tape.consumed:
        raise TapeConsumedError("tape already ran a backward pass")
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss has shape {loss.data.shape}")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backfn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = backfn(out.grad)
        for t, g in zip(inputs, grads):
            if g is not None and t.requires_grad:
                _accum(t, g)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    try:
        out = Tensor(a.data + b.data, tape)
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    tape.record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )
    return out


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    try:
        out = Tensor(a.data - b.data, tape)
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e
    tape.record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, a.tape)
    a.tape.record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    try:
        out = Tensor(a.data * b.data, tape)
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def dot_lastaxis(a: Tensor, b) -> Tensor:
    """Elementwise dot over the trailing axis, broadcasting leading axes."""
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dot_lastaxis: {a.shape} vs {b.shape}")
    out = Tensor(np.sum(a.data * b.data, axis=-1), tape)

    def back(g):
        ge = g[..., None]
        return (
            _unbroadcast(ge * b.data, a.shape),
            _unbroadcast(ge * a.data, b.shape),
        )

    tape.record(out, (a, b), back)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.tape)
    a.tape.record(out, (a,), lambda g: (g * (a.data > 0.0),))
    return out


def softplus(a: Tensor) -> Tensor:
    d = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    out = Tensor(d, a.tape)
    a.tape.record(out, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))
    return out


def exp(a: Tensor) -> Tensor:
    d = np.exp(a.data)
    out = Tensor(d, a.tape)
    a.tape.record(out, (a,), lambda g: (g * d,))
    return out


def powc(a: Tensor, p: float) -> Tensor:
    """a**p for constant p; callers keep a positive for fractional p."""
    d = a.data**p
    out = Tensor(d, a.tape)
    a.tape.record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))
    return out


# ---------------------------------------------------------------------------
# Shape and reduction primitives
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.tape)
    a.tape.record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def crop2d(a: Tensor, i0: int, i1: int, j0: int, j1: int) -> Tensor:
    """Slice axes 1 and 2 of a (B, H, W, ...) tensor; adjoint zero-embeds."""
    out = Tensor(a.data[:, i0:i1, j0:j1], a.tape)

    def back(g):
        ga = np.zeros_like(a.data)
        ga[:, i0:i1, j0:j1] = g
        return (ga,)

    a.tape.record(out, (a,), back)
    return out


def stack(tensors: list, axis: int = 0) -> Tensor:
    tape = _tape_of(*tensors)
    ts = [_wrap(t, tape) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis), tape)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    tape.record(out, tuple(ts), back)
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()), a.tape)
    a.tape.record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(np.float64),))
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), a.tape)
    ax = axis % a.data.ndim

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).astype(np.float64),)

    a.tape.record(out, (a,), back)
    return out


def mse(a: Tensor, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _wrap(a, tape), _wrap(b, tape)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.asarray(np.mean(diff * diff)), tape)
    tape.record(out, (a, b), lambda g: (g * 2.0 * diff / n, g * (-2.0) * diff / n))
    return out


# ---------------------------------------------------------------------------
# conv2d: stride 1, odd kernel, 'same' output, reflect or zero padding
# ---------------------------------------------------------------------------


def _pad_spatial(x: np.ndarray, p: int, q: int, mode: str) -> np.ndarray:
    pads = ((0, 0), (p, p), (q, q)) + ((0, 0),) * (x.ndim - 3)
    return np.pad(x, pads, mode="reflect" if mode == "reflect" else "constant")


def _fold_reflect(gxp: np.ndarray, p: int, q: int, H: int, W: int) -> np.ndarray:
    """Adjoint of separable reflect padding: fold border gradients back inside."""
    ga = gxp[:, p : p + H].copy()
    for t in range(p):
        ga[:, p - t] += gxp[:, t]
        ga[:, H - 2 - t] += gxp[:, p + H + t]
    gb = ga[:, :, q : q + W].copy()
    for s in range(q):
        gb[:, :, q - s] += ga[:, :, s]
        gb[:, :, W - 2 - s] += ga[:, :, q + W + s]
    return gb


def conv2d(x: Tensor, k: Tensor, pad: str = "reflect") -> Tensor:
    """Correlation of (B, H, W, Ci) with (kh, kw, Ci, Co) giving (B, H, W, Co)."""
    tape = _tape_of(x, k)
    x, k = _wrap(x, tape), _wrap(k, tape)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {k.shape}")
    kh, kw = k.shape[0], k.shape[1]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel must be odd-sized")
    p, q = kh // 2, kw // 2
    B, H, W, Ci = x.shape
    xp = _pad_spatial(x.data, p, q, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (B, H, W, Ci, kh, kw)
    out = Tensor(np.einsum("bhwcuv,uvco->bhwo", win, k.data, optimize=True), tape)

    def back(g):
        gk = np.einsum("bhwcuv,bhwo->uvco", win, g, optimize=True)
        # gradient w.r.t. padded input: full correlation with the flipped kernel
        kf = k.data[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh, kw, Co, Ci)
        gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
        gxp = np.einsum("bhwouv,uvoc->bhwc", gwin, kf, optimize=True)  # (B,H+2p,W+2q,Ci)
        if pad == "reflect":
            gx = _fold_reflect(gxp, p, q, H, W)
        else:
            gx = gxp[:, p : p + H, q : q + W]
        return gx, gk

    tape.record(out, (x, k), back)
    return out


# ---------------------------------------------------------------------------
# FFT pair (real input; complex carried as re/im tensor pairs)
# ---------------------------------------------------------------------------


def fft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """2-D DFT over the last two axes of a real tensor."""
    z = np.fft.fft2(x.data, axes=(-2, -1))
    re = Tensor(np.ascontiguousarray(z.real), x.tape)
    im = Tensor(np.ascontiguousarray(z.imag), x.tape)

    def back_re(g):
        return (np.fft.fft2(g, axes=(-2, -1)).real,)

    def back_im(g):
        return (np.fft.fft2(g, axes=(-2, -1)).imag,)

    x.tape.record(re, (x,), back_re)
    x.tape.record(im, (x,), back_im)
    return re, im


def ifft2_real(re: Tensor, im: Tensor) -> Tensor:
    """Real part of the inverse 2-D DFT of re + i*im."""
    tape = _tape_of(re, im)
    z = np.fft.ifft2(re.data + 1j * im.data, axes=(-2, -1))
    out = Tensor(np.ascontiguousarray(z.real), tape)

    def back(g):
        t = np.fft.ifft2(g, axes=(-2, -1))
        return np.ascontiguousarray(t.real), np.ascontiguousarray(-t.imag)

    tape.record(out, (re, im), back)
    return out


def cdiv_reg(
    xre: Tensor, xim: Tensor, wre, wim, eps: float
) -> tuple[Tensor, Tensor]:
    """Regularized complex division x * conj(w) / (|w|^2 + eps^2).

    Counts bins with |w| < eps/10 on the tape's diagnostic counter; those are
    the frequencies where the regularizer, not w, sets the output scale.
    """
    tape = _tape_of(xre, xim, wre, wim)
    xre, xim = _wrap(xre, tape), _wrap(xim, tape)
    wre, wim = _wrap(wre, tape), _wrap(wim, tape)
    d = wre.data**2 + wim.data**2 + eps * eps
    tape.div_reg_hits += int(np.sum(wre.data**2 + wim.data**2 < (eps / 10.0) ** 2))
    yre_d = (xre.data * wre.data + xim.data * wim.data) / d
    yim_d = (xim.data * wre.data - xre.data * wim.data) / d
    yre = Tensor(yre_d, tape)
    yim = Tensor(yim_d, tape)

    def back_for(which):
        def back(g):
            if which == "re":
                gre, gim = g, 0.0
            else:
                gre, gim = 0.0, g
            g_xre = (gre * wre.data - gim * wim.data) / d
            g_xim = (gre * wim.data + gim * wre.data) / d
            sy = gre * yre_d + gim * yim_d
            g_wre = (gre * xre.data + gim * xim.data) / d - 2.0 * wre.data * sy / d
            g_wim = (gre * xim.data - gim * xre.data) / d - 2.0 * wim.data * sy / d
            return (
                _unbroadcast(np.asarray(g_xre, dtype=np.float64), xre.shape),
                _unbroadcast(np.asarray(g_xim, dtype=np.float64), xim.shape),
                _unbroadcast(np.asarray(g_wre, dtype=np.float64), wre.shape),
                _unbroadcast(np.asarray(g_wim, dtype=np.float64), wim.shape),
            )

        return back

    tape.record(yre, (xre, xim, wre, wim), back_for("re"))
    tape.record(yim, (xre, xim, wre, wim), back_for("im"))
    return yre, yim


# ---------------------------------------------------------------------------
# Bilinear warp sampling with reflected boundary
# ---------------------------------------------------------------------------


def _reflect_coord(c: np.ndarray, m: int):
    """Map coordinates into [0, m-1] by reflection; returns value and d/dc sign."""
    if m == 1:
        return np.zeros_like(c), np.zeros_like(c)
    period = 2.0 * (m - 1)
    cm = np.mod(c, period)
    over = cm > (m - 1)
    r = np.where(over, period - cm, cm)
    sign = np.where(over, -1.0, 1.0)
    return r, sign


def bilinear_warp(img: Tensor, coords: Tensor) -> Tensor:
    """Sample (B, H, W, C) at float (row, col) coords (B|1, Ho, Wo, 2)."""
    tape = _tape_of(img, coords)
    img, coords = _wrap(img, tape), _wrap(coords, tape)
    if img.data.ndim != 4 or coords.data.ndim != 4 or coords.shape[3] != 2:
        raise ShapeError(f"bilinear_warp: img {img.shape}, coords {coords.shape}")
    B, H, W, C = img.shape
    if coords.shape[0] not in (B, 1):
        raise ShapeError("bilinear_warp: batch mismatch")
    cdata = coords.data
    if cdata.shape[0] == 1 and B > 1:
        cdata = np.broadcast_to(cdata, (B,) + cdata.shape[1:])
    ri, si = _reflect_coord(cdata[..., 0], H)
    rj, sj = _reflect_coord(cdata[..., 1], W)
    i0 = np.clip(np.floor(ri).astype(np.int64), 0, max(H - 2, 0))
    j0 = np.clip(np.floor(rj).astype(np.int64), 0, max(W - 2, 0))
    fi = ri - i0
    fj = rj - j0
    flat = img.data.reshape(B, H * W, C)
    base = i0 * W + j0
    bidx = np.arange(B)[:, None, None]
    v00 = flat[bidx, base]
    v01 = flat[bidx, base + 1]
    v10 = flat[bidx, base + W]
    v11 = flat[bidx, base + W + 1]
    wfi = fi[..., None]
    wfj = fj[..., None]
    out_d = (
        v00 * (1 - wfi) * (1 - wfj)
        + v01 * (1 - wfi) * wfj
        + v10 * wfi * (1 - wfj)
        + v11 * wfi * wfj
    )
    out = Tensor(out_d, tape)

    def back(g):
        gimg = None
        gcoords = None
        if img.requires_grad:
            w00 = ((1 - fi) * (1 - fj))[..., None] * g
            w01 = ((1 - fi) * fj)[..., None] * g
            w10 = (fi * (1 - fj))[..., None] * g
            w11 = (fi * fj)[..., None] * g
            offs = (np.arange(B) * H * W)[:, None, None]
            cell = np.concatenate(
                [
                    (base + offs).ravel(),
                    (base + 1 + offs).ravel(),
                    (base + W + offs).ravel(),
                    (base + W + 1 + offs).ravel(),
                ]
            )
            comp = (cell[:, None] * C + np.arange(C)[None, :]).ravel()
            vals = np.concatenate(
                [w00.reshape(-1, C), w01.reshape(-1, C), w10.reshape(-1, C), w11.reshape(-1, C)]
            ).ravel()
            gimg = np.bincount(comp, weights=vals, minlength=B * H * W * C).reshape(
                B, H, W, C
            )
        if coords.requires_grad:
            d_dfi = ((v10 - v00) * (1 - wfj) + (v11 - v01) * wfj)
            d_dfj = ((v01 - v00) * (1 - wfi) + (v11 - v10) * wfi)
            gi = np.sum(g * d_dfi, axis=-1) * si
            gj = np.sum(g * d_dfj, axis=-1) * sj
            gcoords = _unbroadcast(np.stack([gi, gj], axis=-1), coords.shape)
        return gimg, gcoords

    tape.record(out, (img, coords), back)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators for one named parameter group."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_arrays(self):
        return {"m": self.m, "v": self.v, "step": self.step}


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """Standard bias-corrected Adam update; returns the updated dict in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} for param {p.shape} ({name})")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Finite-difference checking support
# ---------------------------------------------------------------------------


def fd_grad(f, x: np.ndarray, h: float = 1e-4, indices=None) -> np.ndarray:
    """Central finite differences of scalar f at x, optionally on a subset."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    idx = indices if indices is not None else list(np.ndindex(x.shape))
    for i in idx:
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g
